#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "json.hpp"
#include "xicl/evalbench.hpp"

using namespace xicl;
using namespace xicl::evalbench;
using json = nlohmann::json;

namespace {

// Modified n-gram precision counts by scanning every window pair.
std::pair<std::size_t, std::size_t> brute_counts(const Tokens& c, const Tokens& r, std::size_t n) {
  if (c.size() < n) return {0, 0};
  std::size_t total = c.size() - n + 1, matched = 0;
  std::vector<bool> seen(total, false);
  for (std::size_t i = 0; i < total; ++i) {
    if (seen[i]) continue;
    auto same = [&](const Tokens& a, std::size_t ai, const Tokens& b, std::size_t bi) {
      for (std::size_t t = 0; t < n; ++t)
        if (a[ai + t] != b[bi + t]) return false;
      return true;
    };
    std::size_t in_c = 0, in_r = 0;
    for (std::size_t j = i; j < total; ++j)
      if (same(c, i, c, j)) {
        ++in_c;
        seen[j] = true;
      }
    for (std::size_t j = 0; j + n <= r.size(); ++j) in_r += same(c, i, r, j);
    matched += std::min(in_c, in_r);
  }
  return {matched, total};
}

double brute_bleu(const Tokens& c, const Tokens& r) {
  double prod = 1.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto [m, t] = brute_counts(c, r, n);
    if (n == 1 && m == 0) return 0.0;
    prod *= n == 1 ? double(m) / double(t) : (double(m) + 1) / (double(t) + 1);
  }
  const double bp = c.size() < r.size() ? std::exp(1.0 - double(r.size()) / double(c.size())) : 1.0;
  return bp * std::pow(prod, 0.25);
}

// Per-label F1 from a dense confusion matrix with an extra "other" column.
double confusion_macro_f1(const std::vector<std::string>& p, const std::vector<std::string>& g,
                          const std::vector<std::string>& labels) {
  const std::size_t L = labels.size();
  std::vector<std::vector<double>> M(L, std::vector<double>(L + 1, 0.0));
  auto idx = [&](const std::string& s) {
    return static_cast<std::size_t>(std::find(labels.begin(), labels.end(), s) - labels.begin());
  };
  for (std::size_t i = 0; i < g.size(); ++i) M[idx(g[i])][std::min(idx(p[i]), L)] += 1;
  double f = 0;
  for (std::size_t l = 0; l < L; ++l) {
    double col = 0, row = 0;
    for (std::size_t j = 0; j < L; ++j) col += M[j][l];
    for (std::size_t j = 0; j <= L; ++j) row += M[l][j];
    const double P = col > 0 ? M[l][l] / col : 0, R = row > 0 ? M[l][l] / row : 0;
    f += P + R > 0 ? 2 * P * R / (P + R) : 0;
  }
  return f / double(L);
}

corpus::CorpusManifest tiny_manifest() {
  corpus::CorpusConfig cc;
  cc.per_family = 1;
  cc.train_high = 20;
  cc.demo_high = 6;
  cc.dev = 2;
  cc.test = 3;
  return corpus::build_manifest(cc);
}

BenchConfig tiny_bench() {
  BenchConfig b;
  b.model.vocab_size = 96;
  b.model.d_model = 8;
  b.model.n_layers = 1;
  b.model.n_heads = 2;
  b.model.ctx_len = 128;
  b.pretrain.steps = 4;
  b.pretrain.batch = 2;
  b.loop.total_steps = 3;
  b.loop.warmup_steps = 1;
  b.loop.batch = 2;
  b.loop.k = 2;
  b.loop.generate_every = 0;
  b.eval_k = 2;
  b.seeds = {1, 2};
  b.methods = all_methods();
  return b;
}

}  // namespace

TEST_CASE("accuracy examples") {
  const std::vector<Tokens> g{{"a"}, {"b", "c"}, {"d"}, {"e"}};
  CHECK(accuracy(g, g) == 1.0);
  CHECK(accuracy(std::vector<Tokens>{{"x"}, {"b"}, {}, {"d"}}, g) == 0.0);
  CHECK(accuracy(std::vector<Tokens>{{"a"}, {"b", "c"}, {"q"}, {"e"}}, g) == 0.75);
  CHECK_THROWS_AS(accuracy(std::vector<Tokens>{}, std::vector<Tokens>{}), ContractError);
  CHECK_THROWS_AS(accuracy(std::vector<Tokens>{{"a"}}, g), ContractError);
}

TEST_CASE("macro_f1 examples") {
  const std::vector<std::string> labels{"A", "B"};
  SUBCASE("perfect") {
    const std::vector<std::string> g{"A", "B", "B"};
    CHECK(macro_f1(g, g, labels) == 1.0);
  }
  SUBCASE("hand-built binary confusion") {
    // A: TP=2 FP=1 FN=1 ; B: TP=1 FP=1 FN=1
    const std::vector<std::string> g{"A", "A", "A", "B", "B"};
    const std::vector<std::string> p{"A", "A", "B", "B", "A"};
    const double fa = 2 * (2.0 / 3) * (2.0 / 3) / (4.0 / 3), fb = 2 * 0.5 * 0.5 / 1.0;
    CHECK(macro_f1(p, g, labels) == doctest::Approx((fa + fb) / 2).epsilon(1e-15));
  }
  SUBCASE("order invariance and unknown labels") {
    std::vector<std::string> g{"A", "B", "A", "A", "B"}, p{"B", "B", "A", "zzz", "A"};
    const double v = macro_f1(p, g, labels);
    std::reverse(g.begin(), g.end());
    std::reverse(p.begin(), p.end());
    CHECK(macro_f1(p, g, labels) == v);
    CHECK_THROWS_AS(macro_f1(p, std::vector<std::string>{"A", "B", "C", "A", "A"}, labels), ContractError);
  }
}

TEST_CASE("macro_f1 matches a confusion-matrix oracle on 1000 random prediction sets") {
  std::mt19937_64 rng(3);
  const std::vector<std::string> labels{"positive", "negative", "neutral"};
  const std::vector<std::string> preds_pool{"positive", "negative", "neutral", "other"};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<std::string> p, g;
    for (std::size_t i = 0; i < n; ++i) {
      g.push_back(labels[rng() % 3]);
      p.push_back(preds_pool[rng() % 4]);
    }
    const double got = macro_f1(p, g, labels);
    CHECK(std::abs(got - confusion_macro_f1(p, g, labels)) < 1e-12);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
  }
}

TEST_CASE("bleu examples") {
  const Tokens ref{"the", "cat", "sees", "a", "dog"};
  CHECK(bleu(ref, std::vector<Tokens>{ref}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(bleu(Tokens{"x", "y"}, std::vector<Tokens>{ref}) == 0.0);
  CHECK_THROWS_AS(bleu(Tokens{}, std::vector<Tokens>{ref}), ContractError);
  CHECK_THROWS_AS(bleu(ref, std::vector<Tokens>{Tokens{}}), ContractError);
  // short candidate: unigram 2/2, bigram (1+1)/(1+1), no trigrams or 4-grams
  const double want = std::exp(1.0 - 5.0 / 2.0);
  CHECK(bleu(Tokens{"the", "cat"}, std::vector<Tokens>{ref}) == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("bleu matches a brute-force n-gram counter on 1000 random pairs") {
  std::mt19937_64 rng(8);
  const std::vector<std::string> words{"a", "b", "c", "d", "e", "f"};
  for (int trial = 0; trial < 1000; ++trial) {
    Tokens c, r;
    const std::size_t nc = 1 + rng() % 9, nr = 1 + rng() % 9;
    for (std::size_t i = 0; i < nc; ++i) c.push_back(words[rng() % words.size()]);
    for (std::size_t i = 0; i < nr; ++i) r.push_back(words[rng() % words.size()]);
    const double got = bleu(c, std::vector<Tokens>{r});
    CHECK(std::abs(got - brute_bleu(c, r)) <= 1e-12);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
  }
}

TEST_CASE("token_f1 examples") {
  CHECK(token_f1({"a", "b"}, {"a", "b"}) == 1.0);
  CHECK(token_f1({}, {"a"}) == 0.0);
  CHECK(token_f1({"a", "a", "c"}, {"a", "b"}) == doctest::Approx(2 * (1.0 / 3) * 0.5 / (1.0 / 3 + 0.5)));
}

TEST_CASE("method specs differ from the base only in their defining weights") {
  objectives::ObjectiveConfig base;
  const auto full = MethodSpec::make(Method::OursFull, base);
  const auto na = MethodSpec::make(Method::OursNoAlign, base);
  const auto nc = MethodSpec::make(Method::OursNoCoherence, base);
  const auto rl = MethodSpec::make(Method::RlOnly, base);
  CHECK(full.objective == base);

  auto diff = [](const MethodSpec& a, const MethodSpec& b) {
    const auto pa = json::parse(plan_json(RunPlan{a, {}, {}, {}, {}, {}, 0, 0}));
    const auto pb = json::parse(plan_json(RunPlan{b, {}, {}, {}, {}, {}, 0, 0}));
    std::vector<std::string> keys;
    for (const auto& op : json::diff(pa, pb)) keys.push_back(op["path"].get<std::string>());
    return keys;
  };
  CHECK(diff(full, na) == std::vector<std::string>{"/method/name", "/method/objective/align_weight"});
  CHECK(diff(full, nc) == std::vector<std::string>{"/method/name", "/method/objective/lambda"});
  CHECK(rl.objective.align_weight == 0.0);
  CHECK(rl.objective.lambda == 0.0);
  CHECK(rl.objective.gamma == base.gamma);
  CHECK_FALSE(MethodSpec::make(Method::Random, base).trains);
  CHECK(MethodSpec::make(Method::Random, base).selection == Selection::Random);
  CHECK_FALSE(MethodSpec::make(Method::CosineRet, base).trains);
  for (auto m : all_methods()) CHECK(method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(method_from_string("sbert"), ContractError);
}

TEST_CASE("fairness guard rejects unequal budgets") {
  objectives::ObjectiveConfig base;
  std::vector<RunPlan> plans;
  for (auto m : all_methods()) plans.push_back(RunPlan{MethodSpec::make(m, base), {}, {}, {}, base, {1, 2, 3}, 4, 0});
  CHECK_NOTHROW(check_fairness(plans));
  auto bad = plans;
  bad[2].loop.total_steps = 1000;
  CHECK_THROWS_AS(check_fairness(bad), ContractError);
  bad = plans;
  bad[4].seeds = {1, 2};
  CHECK_THROWS_AS(check_fairness(bad), ContractError);
  bad = plans;
  bad[3].spec.objective.gamma = 0.5;  // a method quietly changing another weight
  CHECK_THROWS_AS(check_fairness(bad), ContractError);
}

TEST_CASE("random selection with k = 0 is zero-shot evaluation") {
  const auto man = tiny_manifest();
  const auto cfg = tiny_bench();
  const auto m = pretrained_model(cfg, man, 1);
  const auto state = loop::make_train_state(m, man, cfg.loop, 1);
  const auto base = cfg.objective;
  auto rnd = evaluate(m, state.bank, man, MethodSpec::make(Method::Random, base), 0, 1);
  auto cos = evaluate(m, state.bank, man, MethodSpec::make(Method::CosineRet, base), 0, 1);
  REQUIRE(rnd.size() == cos.size());
  for (std::size_t i = 0; i < rnd.size(); ++i) {
    rnd[i].method = cos[i].method;
    CHECK(rnd[i] == cos[i]);
  }
}

TEST_CASE("benchmark report structure, rollups and formats") {
  const auto man = tiny_manifest();
  const auto cfg = tiny_bench();
  const auto rep = run_benchmark(cfg, man, "abc");

  // 6 methods x 2 seeds x 4 languages x 4 tasks
  CHECK(rep.cells.size() == 6 * 2 * 4 * 4);
  REQUIRE(rep.rollups.size() == 6);
  for (const auto& r : rep.rollups) {
    CHECK(r.family_tier.size() == 8);
    CHECK(r.unseen.size() == 2);
    CHECK(r.overall.per_seed.size() == 2);
    // overall = instance-weighted mean over the classify/translate cells
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      double num = 0, den = 0, hnum = 0, hden = 0;
      for (const auto& c : rep.cells) {
        if (c.method != r.method || c.seed != cfg.seeds[si]) continue;
        if (c.task != Task::Classify && c.task != Task::Translate) continue;
        num += c.accuracy * double(c.n);
        den += double(c.n);
        if (c.tier == "high") {
          hnum += c.accuracy * double(c.n);
          hden += double(c.n);
        }
      }
      CHECK(std::abs(r.overall.per_seed[si] - num / den) < 1e-9);
      CHECK(std::abs(r.high.per_seed[si] - hnum / hden) < 1e-9);
    }
  }
  for (const auto& c : rep.cells) {
    CHECK(c.n > 0);
    CHECK(c.accuracy >= 0.0);
    CHECK(c.accuracy <= 1.0);
    CHECK(c.macro_f1 >= 0.0);
    CHECK(c.macro_f1 <= 1.0);
    CHECK(c.bleu.has_value() == (c.task == Task::Translate));
  }

  // CSV and JSON agree cell by cell
  const auto j = json::parse(rep.to_json());
  CHECK(j["schema_version"] == EvalReport::kSchemaVersion);
  CHECK(j["metadata"]["config_hash"] == "abc");
  std::istringstream csv(rep.to_csv());
  std::string line;
  std::getline(csv, line);
  CHECK(line.rfind("# schema_version=1", 0) == 0);
  std::getline(csv, line);
  std::size_t row = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string x;
    while (std::getline(ss, x, ',')) f.push_back(x);
    if (f.size() == 9) f.push_back("");
    REQUIRE(f.size() == 10);
    const auto& c = j["cells"][row++];
    CHECK(f[0] == c["method"].get<std::string>());
    CHECK(std::stoull(f[1]) == c["seed"].get<std::uint64_t>());
    CHECK(f[2] == c["lang_id"].get<std::string>());
    CHECK(f[5] == c["task"].get<std::string>());
    CHECK(std::stoull(f[6]) == c["n"].get<std::size_t>());
    CHECK(std::stod(f[7]) == c["accuracy"].get<double>());
    CHECK(std::stod(f[8]) == c["macro_f1"].get<double>());
    if (f[9].empty())
      CHECK(c["bleu"].is_null());
    else
      CHECK(std::stod(f[9]) == c["bleu"].get<double>());
  }
  CHECK(row == rep.cells.size());

  // same configuration, same bytes
  const auto again = run_benchmark(cfg, man, "abc");
  CHECK(again.to_json() == rep.to_json());
  CHECK(again.to_csv() == rep.to_csv());
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}
