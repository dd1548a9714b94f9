#include "xicl/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace xicl::objectives {

namespace ngo = xicl::ng;

std::string to_string(KlDirection d) {
  return d == KlDirection::ContextToFree ? "context_to_free" : "free_to_context";
}

std::string to_string(AccuracyMode m) { return m == AccuracyMode::Smooth ? "smooth" : "exact_match"; }

KlDirection kl_direction_from_string(const std::string& s) {
  if (s == "context_to_free") return KlDirection::ContextToFree;
  if (s == "free_to_context") return KlDirection::FreeToContext;
  throw ContractError("unknown KL direction '" + s + "'");
}

AccuracyMode accuracy_mode_from_string(const std::string& s) {
  if (s == "smooth") return AccuracyMode::Smooth;
  if (s == "exact_match") return AccuracyMode::ExactMatch;
  throw ContractError("unknown accuracy mode '" + s + "'");
}

void ObjectiveConfig::validate() const {
  require(nll_weight >= 0.0 && align_weight >= 0.0 && lambda >= 0.0 && gamma >= 0.0, "loss weights must be nonnegative");
  require(alpha >= 0.0 && beta >= 0.0, "reward weights must be nonnegative");
}

Tensor reference_logits(const Model& m, std::span<const int> x, std::span<const int> y_gold) {
  ngo::NoGradGuard guard;
  const auto prompt = model::assemble_prompt({}, x, m.config().ctx_len);
  return m.answer_logits(prompt, y_gold).detach();
}

Tensor align_loss(const Model& m, std::span<const int> x, std::span<const ExamplePair> context,
                  std::span<const int> y_gold, const Tensor& reference, KlDirection dir) {
  const auto prompt = model::assemble_prompt(context, x, m.config().ctx_len);
  return align_from_logits(m.answer_logits(prompt, y_gold), reference, dir);
}

Tensor align_from_logits(const Tensor& with_ctx, const Tensor& reference, KlDirection dir) {
  require(with_ctx.shape() == reference.shape(), "align_loss: reference does not match the answer length");
  return dir == KlDirection::ContextToFree ? ngo::kl_divergence(with_ctx, reference)
                                           : ngo::kl_divergence(reference, with_ctx);
}

Tensor answer_nll(const Tensor& logits, std::span<const int> y) {
  require(logits.shape().size() == 2 && logits.shape()[0] == y.size() && !y.empty(),
          "answer_nll: one logit row per answer token required");
  std::vector<std::size_t> rows(y.size()), cols(y.begin(), y.end());
  std::iota(rows.begin(), rows.end(), 0);
  return ngo::scale(ngo::sum(ngo::pick(ngo::log_softmax(logits, 1), rows, cols)), -1.0 / static_cast<double>(y.size()));
}

Tensor align_loss(const Model& m, std::span<const int> x, std::span<const ExamplePair> context,
                  std::span<const int> y_gold, KlDirection dir) {
  return align_loss(m, x, context, y_gold, reference_logits(m, x, y_gold), dir);
}

Tensor coherence_loss(const Model& m, std::span<const int> x, std::span<const int> y) {
  require(!x.empty() && !y.empty(), "coherence_loss: empty sequence");
  return ngo::squared_l2(m.pooled_embedding(x), m.pooled_embedding(y));
}

double diversity(std::span<const std::vector<double>> e) {
  if (e.size() <= 1) return 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      double dot = 0.0, ni = 0.0, nj = 0.0;
      for (std::size_t c = 0; c < e[i].size(); ++c) {
        dot += e[i][c] * e[j][c];
        ni += e[i][c] * e[i][c];
        nj += e[j][c] * e[j][c];
      }
      const double cos = ni > 0.0 && nj > 0.0 ? std::clamp(dot / std::sqrt(ni * nj), -1.0, 1.0) : 0.0;
      total += (1.0 - cos) / 2.0;
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

RewardComponents reward(const Model& m, std::span<const int> x, std::span<const ExamplePair> context,
                        std::span<const int> y_gold, double alpha, double beta, AccuracyMode mode,
                        std::span<const std::vector<double>> context_embeddings) {
  require(alpha >= 0.0 && beta >= 0.0, "reward: alpha and beta must be nonnegative");
  require(!y_gold.empty(), "reward: empty gold answer");
  ngo::NoGradGuard guard;
  const auto prompt = model::assemble_prompt(context, x, m.config().ctx_len);

  RewardComponents r;
  r.alpha = alpha;
  r.beta = beta;
  if (mode == AccuracyMode::Smooth) {
    const double lp = m.sequence_log_prob(prompt, y_gold).item();
    r.accuracy = std::exp(lp / static_cast<double>(y_gold.size()));
  } else {
    std::vector<int> gold(y_gold.begin(), y_gold.end());
    if (!gold.empty() && gold.back() == model::kEos) gold.pop_back();
    r.accuracy = m.generate(prompt, y_gold.size()) == gold ? 1.0 : 0.0;
  }

  std::vector<std::vector<double>> emb;
  if (context_embeddings.empty() && context.size() > 1) {
    for (const auto& ex : context) {
      auto p = m.pooled_embedding(ex.x);
      emb.emplace_back(p.data().begin(), p.data().end());
    }
    context_embeddings = emb;
  }
  require(context.size() <= 1 || context_embeddings.size() == context.size(),
          "reward: one embedding per context example required");
  r.diversity = context.size() <= 1 ? 0.0 : diversity(context_embeddings);
  r.reward = alpha * r.accuracy + beta * r.diversity;
  return r;
}

Tensor reinforce_loss(const Tensor& log_prob_of_selection, double reward, double baseline) {
  return ngo::scale(log_prob_of_selection, -(reward - baseline));
}

TotalLoss total_loss(const Tensor& align, const Tensor& coherence, const Tensor& rl, double lambda, double gamma,
                     double align_weight) {
  require(lambda >= 0.0 && gamma >= 0.0 && align_weight >= 0.0, "total_loss: weights must be nonnegative");
  TotalLoss out;
  out.value = ngo::add(ngo::add(ngo::scale(align, align_weight), ngo::scale(coherence, lambda)), ngo::scale(rl, gamma));
  auto& b = out.breakdown;
  b.align = align.item();
  b.coherence = coherence.item();
  b.rl = rl.item();
  b.lambda = lambda;
  b.gamma = gamma;
  b.align_weight = align_weight;
  b.total = out.value.item();
  return out;
}

TotalLoss total_loss(const Tensor& nll, const Tensor& align, const Tensor& coherence, const Tensor& rl,
                     const ObjectiveConfig& cfg) {
  require(cfg.nll_weight >= 0.0, "total_loss: weights must be nonnegative");
  TotalLoss out = total_loss(align, coherence, rl, cfg.lambda, cfg.gamma, cfg.align_weight);
  out.value = ngo::add(ngo::scale(nll, cfg.nll_weight), out.value);
  out.breakdown.nll = nll.item();
  out.breakdown.nll_weight = cfg.nll_weight;
  out.breakdown.total = out.value.item();
  return out;
}

}  // namespace xicl::objectives
