#include "doctest.h"

#include <cmath>
#include <random>

#include "xicl/objectives.hpp"

using namespace xicl;
using namespace xicl::objectives;
using model::assemble_prompt;

namespace {

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> dist(5, 31);
  std::vector<int> v(n);
  for (auto& t : v) t = dist(rng);
  return v;
}

std::vector<ExamplePair> random_context(std::mt19937_64& rng, std::size_t k) {
  std::vector<ExamplePair> ctx;
  for (std::size_t i = 0; i < k; ++i) ctx.push_back({random_tokens(rng, 3), random_tokens(rng, 2)});
  return ctx;
}

std::vector<double> softmax_row(const ng::Tensor& logits, std::size_t r) {
  std::vector<double> p(logits.cols());
  double mx = -INFINITY, z = 0;
  for (std::size_t c = 0; c < p.size(); ++c) mx = std::max(mx, logits.at(r, c));
  for (std::size_t c = 0; c < p.size(); ++c) z += (p[c] = std::exp(logits.at(r, c) - mx));
  for (auto& v : p) v /= z;
  return p;
}

// Materializes both distributions from full-sequence forwards and sums p log(p/q).
double brute_align(const Model& m, const std::vector<int>& x, const std::vector<ExamplePair>& ctx,
                   const std::vector<int>& y, bool reversed) {
  auto pc = assemble_prompt(ctx, x, 64), p0 = assemble_prompt({}, x, 64);
  auto seq_c = pc.tokens, seq_0 = p0.tokens;
  seq_c.insert(seq_c.end(), y.begin(), y.end());
  seq_0.insert(seq_0.end(), y.begin(), y.end());
  auto lc = m.forward_logits(seq_c), l0 = m.forward_logits(seq_0);
  double total = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    auto p = softmax_row(lc, pc.answer_start - 1 + t);
    auto q = softmax_row(l0, p0.answer_start - 1 + t);
    if (reversed) std::swap(p, q);
    for (std::size_t c = 0; c < p.size(); ++c) total += p[c] * std::log(p[c] / q[c]);
  }
  return total / static_cast<double>(y.size());
}

std::vector<std::vector<double>> grads_of(const std::vector<ng::Tensor>& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& p : ps) out.emplace_back(p.grad().begin(), p.grad().end());
  return out;
}

void clear(std::vector<ng::Tensor>& ps) {
  for (auto& p : ps) p.clear_grad();
}

}  // namespace

TEST_CASE("align_loss examples") {
  auto m = Model::init(model::tiny_config(1));
  std::mt19937_64 rng(4);
  const auto x = random_tokens(rng, 4);
  const auto y = random_tokens(rng, 3);
  CHECK(align_loss(m, x, {}, y).item() == 0.0);

  for (int trial = 0; trial < 30; ++trial) {
    auto ctx = random_context(rng, 1 + trial % 3);
    auto xx = random_tokens(rng, 2 + trial % 3);
    auto yy = random_tokens(rng, 1 + trial % 4);
    const double v = align_loss(m, xx, ctx, yy).item();
    CHECK(v >= -1e-12);
    CHECK(std::abs(v - brute_align(m, xx, ctx, yy, false)) < 1e-12);
    const double r = align_loss(m, xx, ctx, yy, KlDirection::FreeToContext).item();
    CHECK(std::abs(r - brute_align(m, xx, ctx, yy, true)) < 1e-12);
  }
}

TEST_CASE("align_loss treats the context-free branch as a frozen reference") {
  auto m = Model::init(model::tiny_config(2));
  auto ps = m.parameters();
  std::mt19937_64 rng(8);
  const auto x = random_tokens(rng, 4), y = random_tokens(rng, 3);
  const auto ctx = random_context(rng, 2);

  clear(ps);
  ng::backward(align_loss(m, x, ctx, y));
  const auto recomputed = grads_of(ps);

  const auto cached = reference_logits(m, x, y);
  clear(ps);
  ng::backward(align_loss(m, x, ctx, y, cached));
  CHECK(grads_of(ps) == recomputed);

  // A reference built with graph recording on and then detached must also
  // leave the gradient untouched.
  auto live = m.answer_logits(assemble_prompt({}, x, 64), y);
  clear(ps);
  ng::backward(align_loss(m, x, ctx, y, live.detach()));
  CHECK(grads_of(ps) == recomputed);

  // whereas letting gradient flow through the reference changes it
  clear(ps);
  ng::backward(ng::kl_divergence(m.answer_logits(assemble_prompt(ctx, x, 64), y), live));
  CHECK(grads_of(ps) != recomputed);
}

TEST_CASE("coherence_loss examples") {
  auto m = Model::init(model::tiny_config(3));
  std::mt19937_64 rng(5);
  const auto x = random_tokens(rng, 5), y = random_tokens(rng, 3);
  CHECK(coherence_loss(m, x, x).item() == 0.0);
  CHECK(coherence_loss(m, x, y).item() == coherence_loss(m, y, x).item());

  auto hx = m.pooled_embedding(x), hy = m.pooled_embedding(y);
  double manual = 0;
  for (std::size_t c = 0; c < hx.size(); ++c) manual += (hx.at(c) - hy.at(c)) * (hx.at(c) - hy.at(c));
  CHECK(std::abs(coherence_loss(m, x, y).item() - manual) < 1e-13);
  CHECK(manual > 0.0);
}

TEST_CASE("reward components") {
  auto cfg = model::tiny_config(4);
  cfg.zero_output_projection = true;
  auto uniform = Model::init(cfg);
  std::mt19937_64 rng(6);
  const auto x = random_tokens(rng, 3), y = random_tokens(rng, 3);

  // uniform model: per-token likelihood is 1/V
  auto r = reward(uniform, x, random_context(rng, 1), y, 1.0, 0.0);
  CHECK(std::abs(r.accuracy - 1.0 / 32) < 1e-15);
  CHECK(r.diversity == 0.0);
  CHECK(r.reward == r.accuracy);

  CHECK_THROWS_AS(reward(uniform, x, {}, y, -0.1, 0.3), ContractError);
  CHECK_THROWS_AS(reward(uniform, x, {}, y, 0.7, -0.3), ContractError);

  auto m = Model::init(model::tiny_config(5));
  // identical context inputs: cosine 1, no diversity
  const auto same = random_tokens(rng, 4);
  std::vector<ExamplePair> dup{{same, random_tokens(rng, 1)}, {same, random_tokens(rng, 2)}};
  CHECK(std::abs(reward(m, x, dup, y, 0.7, 0.3).diversity) < 1e-15);

  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + trial % 3;
    auto ctx = random_context(rng, k);
    auto rc = reward(m, x, ctx, y, 0.7, 0.3);
    // brute-force pairwise loop
    double d = 0;
    int pairs = 0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        if (j <= i) continue;
        auto a = m.pooled_embedding(ctx[i].x), b = m.pooled_embedding(ctx[j].x);
        double dot = 0, na = 0, nb = 0;
        for (std::size_t c = 0; c < a.size(); ++c) {
          dot += a.at(c) * b.at(c);
          na += a.at(c) * a.at(c);
          nb += b.at(c) * b.at(c);
        }
        d += (1 - dot / std::sqrt(na * nb)) / 2;
        ++pairs;
      }
    CHECK(std::abs(rc.diversity - d / pairs) < 1e-12);
    CHECK(rc.accuracy >= 0.0);
    CHECK(rc.accuracy <= 1.0);
    CHECK(rc.diversity >= 0.0);
    CHECK(rc.diversity <= 1.0);
    CHECK(std::abs(rc.reward - (0.7 * rc.accuracy + 0.3 * rc.diversity)) < 1e-12);
    CHECK(rc.reward <= 1.0);

    auto em = reward(m, x, ctx, y, 1.0, 0.0, AccuracyMode::ExactMatch);
    auto greedy = m.generate(assemble_prompt(ctx, x, 64), y.size());
    CHECK(em.accuracy == (greedy == y ? 1.0 : 0.0));
  }
}

TEST_CASE("exact-match accuracy strips the gold end marker") {
  auto m = Model::init(model::tiny_config(6));
  std::mt19937_64 rng(2);
  const auto x = random_tokens(rng, 3);
  auto prompt = assemble_prompt({}, x, 64);
  auto pred = m.generate(prompt, 4);
  auto gold = pred;
  if (gold.size() < 4) {
    gold.push_back(model::kEos);
    CHECK(reward(m, x, {}, gold, 1.0, 0.0, AccuracyMode::ExactMatch).accuracy == 1.0);
  }
}

TEST_CASE("reinforce_loss examples") {
  auto theta = ng::Tensor::parameter({3}, {0.2, -0.1, 0.4});
  auto lp = ng::index(ng::log_softmax(theta, 0), 1);

  auto zero = reinforce_loss(lp, 0.6, 0.6);
  CHECK(zero.item() == 0.0);
  ng::backward(zero);
  for (double g : theta.grad()) CHECK(g == 0.0);

  // reward above baseline: descending the loss raises the log-prob
  theta.clear_grad();
  ng::backward(reinforce_loss(lp, 0.9, 0.2));
  std::vector<double> stepped(theta.data().begin(), theta.data().end());
  for (std::size_t i = 0; i < 3; ++i) stepped[i] -= 0.1 * theta.grad()[i];
  auto after = ng::index(ng::log_softmax(ng::Tensor::vector(stepped), 0), 1);
  CHECK(after.item() > lp.item());
}

TEST_CASE("reinforce estimator is unbiased on an enumerable policy") {
  const std::vector<double> rewards{1.0, 0.2, 0.5};
  auto theta = ng::Tensor::parameter({3}, {0.3, -0.5, 0.1});

  // exact gradient of -E[R] by enumeration
  ng::backward(ng::scale(ng::sum(ng::mul(ng::softmax(theta, 0), ng::Tensor::vector(rewards))), -1.0));
  const std::vector<double> exact(theta.grad().begin(), theta.grad().end());

  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto probs = ng::softmax(theta.detach(), 0);
  std::vector<double> est(3, 0.0);
  const int n = 100000;
  const double baseline = 0.5;
  for (int i = 0; i < n; ++i) {
    double r = u(rng);
    std::size_t a = 0;
    while (a < 2 && r >= probs.at(a)) r -= probs.at(a++);
    theta.clear_grad();
    ng::backward(reinforce_loss(ng::index(ng::log_softmax(theta, 0), a), rewards[a], baseline));
    for (std::size_t j = 0; j < 3; ++j) est[j] += theta.grad()[j] / n;
  }
  double diff = 0, norm = 0;
  for (std::size_t j = 0; j < 3; ++j) {
    diff += (est[j] - exact[j]) * (est[j] - exact[j]);
    norm += exact[j] * exact[j];
  }
  CHECK(std::sqrt(diff / norm) < 0.02);
}

TEST_CASE("total_loss examples") {
  auto a = ng::Tensor::scalar(0.2), c = ng::Tensor::scalar(1.0), r = ng::Tensor::scalar(0.3);
  auto t = total_loss(a, c, r, 0.1, 0.1);
  CHECK(std::abs(t.breakdown.total - 0.33) < 1e-12);
  CHECK(std::abs(t.breakdown.total - (t.breakdown.align + 0.1 * t.breakdown.coherence + 0.1 * t.breakdown.rl)) < 1e-12);
  CHECK(total_loss(a, c, r, 0.0, 0.0).breakdown.total == 0.2);
  CHECK_THROWS_AS(total_loss(a, c, r, -0.1, 0.1), ContractError);
  CHECK_THROWS_AS(total_loss(a, c, r, 0.1, -0.1), ContractError);
  CHECK(total_loss(a, c, r, 0.1, 0.1, 0.0).breakdown.total == doctest::Approx(0.13).epsilon(1e-14));
}

TEST_CASE("answer_nll and the likelihood-anchored total") {
  auto m = Model::init(model::tiny_config(2));
  std::mt19937_64 rng(4);
  const auto x = random_tokens(rng, 4), y = random_tokens(rng, 3);
  const auto ctx = random_context(rng, 2);
  const auto prompt = assemble_prompt(ctx, x, 64);
  const auto logits = m.answer_logits(prompt, y);
  // per-token mean of the teacher-forced log-likelihood
  CHECK(std::abs(answer_nll(logits, y).item() + m.sequence_log_prob(prompt, y).item() / 3.0) < 1e-12);
  CHECK_THROWS_AS(answer_nll(logits, std::vector<int>{5, 6}), ContractError);
  // the logits-based alignment agrees with the prompt-building one
  CHECK(std::abs(align_from_logits(logits, reference_logits(m, x, y)).item() - align_loss(m, x, ctx, y).item()) <
        1e-12);

  ObjectiveConfig cfg;
  cfg.nll_weight = 0.5;
  auto t = total_loss(ng::Tensor::scalar(2.0), ng::Tensor::scalar(0.2), ng::Tensor::scalar(1.0),
                      ng::Tensor::scalar(0.3), cfg);
  CHECK(std::abs(t.breakdown.total - (1.0 + 0.33)) < 1e-12);
  CHECK(t.breakdown.nll == 2.0);
  CHECK(t.breakdown.nll_weight == 0.5);
  cfg.nll_weight = 0.0;
  CHECK(total_loss(ng::Tensor::scalar(2.0), ng::Tensor::scalar(0.2), ng::Tensor::scalar(1.0), ng::Tensor::scalar(0.3),
                   cfg)
            .breakdown.total == doctest::Approx(0.33).epsilon(1e-14));
  cfg.nll_weight = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("losses pass the finite difference check on the tiny model") {
  auto m = Model::init(model::tiny_config(7));
  auto ps = m.parameters();
  std::mt19937_64 rng(12);
  const auto x = random_tokens(rng, 4), y = random_tokens(rng, 3);
  const auto ctx = random_context(rng, 2);
  const auto ref = reference_logits(m, x, y);
  auto bank = ng::Tensor::constant({3, 8}, std::vector<double>(24, 0.0));
  {
    std::normal_distribution<double> nd;
    std::vector<double> b(24);
    for (auto& v : b) v = nd(rng);
    bank = ng::Tensor::constant({3, 8}, b);
  }
  auto selection = [&] { return ng::index(ng::log_softmax(ng::cosine_scores(m.pooled_embedding(x), bank), 0), 2); };
  auto align = [&] { return align_loss(m, x, ctx, y, ref); };
  auto coh = [&] { return coherence_loss(m, x, y); };
  auto total = [&] { return total_loss(align(), coh(), reinforce_loss(selection(), 0.8, 0.3), 0.1, 0.1).value; };

  for (auto [name, fn] : std::vector<std::pair<std::string, std::function<ng::Tensor()>>>{
           {"align", align},
           {"align_reversed", [&] { return align_loss(m, x, ctx, y, ref, KlDirection::FreeToContext); }},
           {"coherence", coh},
           {"total", total},
           {"nll", [&] { return answer_nll(m.answer_logits(assemble_prompt(ctx, x, 64), y), y); }}}) {
    auto rep = ng::finite_diff_check(name, fn, ps, 64, 1e-5, 1e-4, 17);
    INFO(name << " " << rep.max_rel_error);
    CHECK(rep.passed);
  }

  // gradient of the composite is the weighted sum of component gradients
  clear(ps);
  ng::backward(total());
  const auto g_total = grads_of(ps);
  clear(ps);
  ng::backward(align());
  ng::backward(ng::scale(coh(), 0.1));
  ng::backward(ng::scale(reinforce_loss(selection(), 0.8, 0.3), 0.1));
  const auto g_sum = grads_of(ps);
  for (std::size_t i = 0; i < g_total.size(); ++i)
    for (std::size_t j = 0; j < g_total[i].size(); ++j) CHECK(std::abs(g_total[i][j] - g_sum[i][j]) < 1e-12);
}
