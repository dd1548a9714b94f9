#include "xicl/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace xicl::evalbench {

using json = nlohmann::ordered_json;
using loop::Item;
using loop::MemoryBank;
using loop::Model;

// ---------------------------------------------------------------------------
// Metrics

double accuracy(std::span<const Tokens> preds, std::span<const Tokens> golds) {
  require(!golds.empty(), "accuracy: no instances");
  require(preds.size() == golds.size(), "accuracy: prediction and gold counts differ");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == golds[i];
  return static_cast<double>(hit) / static_cast<double>(golds.size());
}

double macro_f1(std::span<const std::string> preds, std::span<const std::string> golds,
                std::span<const std::string> labels) {
  require(!golds.empty(), "macro_f1: no instances");
  require(preds.size() == golds.size(), "macro_f1: prediction and gold counts differ");
  require(!labels.empty(), "macro_f1: empty label set");
  std::map<std::string, std::size_t> at;
  for (std::size_t i = 0; i < labels.size(); ++i) at.emplace(labels[i], i);
  std::vector<double> tp(labels.size()), fp(labels.size()), fn(labels.size());
  for (std::size_t i = 0; i < golds.size(); ++i) {
    auto g = at.find(golds[i]);
    require(g != at.end(), "macro_f1: gold label '" + golds[i] + "' is not in the label set");
    auto p = at.find(preds[i]);
    if (p != at.end() && p->second == g->second) {
      tp[g->second] += 1;
    } else {
      fn[g->second] += 1;
      if (p != at.end()) fp[p->second] += 1;
    }
  }
  double total = 0.0;
  for (std::size_t l = 0; l < labels.size(); ++l) {
    const double prec = tp[l] + fp[l] > 0 ? tp[l] / (tp[l] + fp[l]) : 0.0;
    const double rec = tp[l] + fn[l] > 0 ? tp[l] / (tp[l] + fn[l]) : 0.0;
    total += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
  }
  return total / static_cast<double>(labels.size());
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngrams(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

}  // namespace

double bleu(const Tokens& cand, std::span<const Tokens> refs) {
  require(!cand.empty(), "bleu: empty candidate");
  require(!refs.empty(), "bleu: no reference");
  for (const auto& r : refs) require(!r.empty(), "bleu: empty reference");
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto c = ngrams(cand, n);
    std::map<std::vector<std::string>, std::size_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, cnt] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
    std::size_t matched = 0, total = 0;
    for (const auto& [g, cnt] : c) {
      total += cnt;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(cnt, it->second);
    }
    double p;
    if (n == 1) {
      if (matched == 0) return 0.0;
      p = static_cast<double>(matched) / static_cast<double>(total);
    } else {
      p = (static_cast<double>(matched) + 1.0) / (static_cast<double>(total) + 1.0);
    }
    log_sum += std::log(p);
  }
  // closest reference length, shorter on ties
  const double c = static_cast<double>(cand.size());
  double r = static_cast<double>(refs[0].size());
  for (const auto& ref : refs) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

double token_f1(const Tokens& pred, const Tokens& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string, int> g;
  for (const auto& t : gold) ++g[t];
  std::size_t common = 0;
  for (const auto& t : pred)
    if (auto it = g.find(t); it != g.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(pred.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2 * p * r / (p + r);
}

// ---------------------------------------------------------------------------
// Methods

std::string to_string(Method m) {
  switch (m) {
    case Method::Random: return "random";
    case Method::CosineRet: return "cosine_ret";
    case Method::RlOnly: return "rl_only";
    case Method::OursFull: return "ours_full";
    case Method::OursNoAlign: return "ours_no_align";
    case Method::OursNoCoherence: return "ours_no_coherence";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (auto m : all_methods())
    if (to_string(m) == s) return m;
  throw ContractError("unknown method '" + s + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> v{Method::Random,   Method::CosineRet,   Method::RlOnly,
                                     Method::OursFull, Method::OursNoAlign, Method::OursNoCoherence};
  return v;
}

const std::vector<Method>& ablation_methods() {
  static const std::vector<Method> v{Method::OursFull, Method::OursNoAlign, Method::OursNoCoherence};
  return v;
}

MethodSpec MethodSpec::make(Method m, const objectives::ObjectiveConfig& base) {
  MethodSpec s;
  s.method = m;
  s.objective = base;
  switch (m) {
    case Method::Random:
      s.trains = false;
      s.selection = Selection::Random;
      break;
    case Method::CosineRet:
      s.trains = false;
      break;
    case Method::RlOnly:
      s.objective.align_weight = 0.0;
      s.objective.lambda = 0.0;
      break;
    case Method::OursFull: break;
    case Method::OursNoAlign: s.objective.align_weight = 0.0; break;
    case Method::OursNoCoherence: s.objective.lambda = 0.0; break;
  }
  return s;
}

namespace {

json objective_json(const objectives::ObjectiveConfig& o) {
  return json{{"nll_weight", o.nll_weight},
              {"align_weight", o.align_weight},
              {"lambda", o.lambda},
              {"gamma", o.gamma},
              {"alpha", o.alpha},
              {"beta", o.beta},
              {"kl_direction", objectives::to_string(o.kl_direction)},
              {"accuracy_mode", objectives::to_string(o.accuracy_mode)}};
}

}  // namespace

std::string plan_json(const RunPlan& p) {
  const auto& mc = p.model;
  const auto& pc = p.pretrain;
  const auto& lc = p.loop;
  json j;
  j["method"] = json{{"name", to_string(p.spec.method)},
                     {"trains", p.spec.trains},
                     {"selection", p.spec.selection == Selection::Random ? "random" : "cosine"},
                     {"objective", objective_json(p.spec.objective)}};
  j["model"] = json{{"vocab_size", mc.vocab_size}, {"d_model", mc.d_model},   {"n_layers", mc.n_layers},
                    {"n_heads", mc.n_heads},       {"ctx_len", mc.ctx_len},   {"seed", mc.seed},
                    {"init_std", mc.init_std},     {"zero_output_projection", mc.zero_output_projection}};
  j["pretrain"] = json{{"steps", pc.steps}, {"batch", pc.batch}, {"lr", pc.lr}, {"k", pc.k},
                       {"same_language", pc.same_language}, {"lr_warmup", pc.lr_warmup},
                       {"min_lr_fraction", pc.min_lr_fraction}};
  j["loop"] = json{{"k", lc.k},
                   {"temperature", lc.temperature},
                   {"warmup_steps", lc.warmup_steps},
                   {"total_steps", lc.total_steps},
                   {"batch", lc.batch},
                   {"lr", lc.lr},
                   {"bank_capacity", lc.bank_capacity},
                   {"refresh_every", lc.refresh_every},
                   {"checkpoint_every", lc.checkpoint_every},
                   {"baseline_decay", lc.baseline_decay},
                   {"generate_every", lc.generate_every},
                   {"generate_count", lc.generate_count}};
  j["base_objective"] = objective_json(p.base_objective);
  j["seeds"] = p.seeds;
  j["eval"] = json{{"k", p.eval_k}, {"limit", p.eval_limit}};
  return j.dump();
}

void check_fairness(std::span<const RunPlan> plans) {
  if (plans.empty()) return;
  auto shared = [](const RunPlan& p) {
    auto j = json::parse(plan_json(p));
    j.erase("method");
    return j.dump();
  };
  const auto ref = shared(plans[0]);
  for (const auto& p : plans) {
    if (shared(p) != ref)
      throw ContractError("fairness guard: " + to_string(p.spec.method) + " runs under a different budget than " +
                          to_string(plans[0].spec.method));
    if (p.spec != MethodSpec::make(p.spec.method, p.base_objective))
      throw ContractError("fairness guard: " + to_string(p.spec.method) +
                          " overrides more than its defining weights");
  }
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::string joined(const Tokens& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + t[i];
  return s;
}

Tokens strip_eos(const corpus::Vocabulary& vocab, std::vector<int> ids) {
  if (!ids.empty() && ids.back() == model::kEos) ids.pop_back();
  Tokens out;
  for (int id : ids)
    out.push_back(id >= 0 && static_cast<std::size_t>(id) < vocab.size() ? vocab.token(id) : "<oov>");
  return out;
}

}  // namespace

std::vector<Cell> evaluate(const Model& m, const MemoryBank& bank, const corpus::CorpusManifest& manifest,
                           const MethodSpec& spec, std::size_t k, std::uint64_t seed, std::size_t limit) {
  const auto vocab = manifest.vocabulary();
  std::vector<Cell> cells;
  Rng rng(mix_seed(seed, 0xe7a1));
  std::map<Task, std::vector<std::size_t>> pool;
  for (auto t : corpus::kAllTasks) pool[t] = bank.slots_for(t);
  for (const auto& lang : manifest.languages) {
    for (auto task : corpus::kAllTasks) {
      const auto& ids = manifest.splits.at({lang.lang_id, task}).test;
      const std::size_t n = limit == 0 ? ids.size() : std::min(limit, ids.size());
      if (n == 0) continue;
      std::vector<Tokens> preds, golds;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& inst = manifest.instances[ids[i]];
        const Item it = loop::make_item(inst, vocab);
        std::vector<int> out;
        if (spec.selection == Selection::Random) {
          const auto& slots = pool[task];
          std::vector<model::ExamplePair> ctx;
          const std::size_t kk = std::min(k, slots.size());
          std::vector<std::size_t> picked;
          while (picked.size() < kk) {
            const auto s = slots[uniform_index(rng, slots.size())];
            if (std::find(picked.begin(), picked.end(), s) != picked.end()) continue;
            picked.push_back(s);
            ctx.push_back(bank.entry(s).pair);
          }
          out = loop::decode_with(m, ctx, it.x);
        } else {
          out = loop::infer(m, bank, it.x, k, task);
        }
        preds.push_back(strip_eos(vocab, out));
        golds.push_back(inst.y);
      }
      Cell c;
      c.method = to_string(spec.method);
      c.seed = seed;
      c.lang_id = lang.lang_id;
      c.family = corpus::to_string(lang.family);
      c.tier = corpus::to_string(lang.tier);
      c.task = task;
      c.n = n;
      c.accuracy = accuracy(preds, golds);
      if (task == Task::Classify) {
        std::vector<std::string> p, g;
        for (std::size_t i = 0; i < n; ++i) {
          p.push_back(joined(preds[i]));
          g.push_back(joined(golds[i]));
        }
        c.macro_f1 = macro_f1(p, g, corpus::Lexicon::labels());
      } else if (task == Task::Ner) {
        static const std::vector<std::string> tags{"ENT", "O"};
        std::vector<std::string> p, g;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < golds[i].size(); ++j) {
            g.push_back(golds[i][j]);
            p.push_back(j < preds[i].size() ? preds[i][j] : "<none>");
          }
        c.macro_f1 = macro_f1(p, g, tags);
      } else {
        double f = 0.0;
        for (std::size_t i = 0; i < n; ++i) f += token_f1(preds[i], golds[i]);
        c.macro_f1 = f / static_cast<double>(n);
      }
      if (task == Task::Translate) {
        double b = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          if (!preds[i].empty()) b += bleu(preds[i], std::span<const Tokens>(&golds[i], 1));
        c.bleu = b / static_cast<double>(n);
      }
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

Model pretrained_model(const BenchConfig& cfg, const corpus::CorpusManifest& manifest, std::uint64_t seed) {
  auto mc = cfg.model;
  mc.seed = mix_seed(seed, 0x30de1);
  require(mc.vocab_size >= manifest.vocabulary().size(), "model vocab_size is smaller than the corpus vocabulary");
  auto m = Model::init(mc);
  loop::pretrain(m, manifest, cfg.pretrain, seed);
  return m;
}

std::vector<Cell> run_method(const MethodSpec& spec, const Model& start, const corpus::CorpusManifest& manifest,
                             const BenchConfig& cfg, std::uint64_t seed, Model* trained) {
  auto state = loop::make_train_state(start, manifest, cfg.loop, seed);
  if (spec.trains) {
    loop::run_training(state, manifest, cfg.loop, spec.objective);
    state.bank.refresh(state.model, state.step);
  }
  if (trained) *trained = Model(state.model.config(), state.model.params().clone());
  return evaluate(state.model, state.bank, manifest, spec, cfg.eval_k, seed, cfg.eval_limit);
}

// ---------------------------------------------------------------------------
// Report

std::vector<MethodRollup> rollup(std::span<const Cell> cells, std::span<const Method> methods,
                                 std::span<const std::uint64_t> seeds) {
  std::vector<MethodRollup> out;
  for (auto method : methods) {
    MethodRollup r;
    r.method = to_string(method);
    auto score = [&](auto keep, auto value) {
      Score s;
      for (auto seed : seeds) {
        std::vector<Cell> mine;
        for (const auto& c : cells)
          if (c.method == r.method && c.seed == seed && keep(c)) mine.push_back(c);
        double num = 0.0;
        std::size_t n = 0;
        for (const auto& c : mine) {
          num += value(c) * static_cast<double>(c.n);
          n += c.n;
        }
        s.per_seed.push_back(n == 0 ? 0.0 : num / static_cast<double>(n));
        s.n = n;
      }
      for (double v : s.per_seed) s.mean += v;
      if (!s.per_seed.empty()) s.mean /= static_cast<double>(s.per_seed.size());
      return s;
    };
    auto acc = [](const Cell& c) { return c.accuracy; };
    auto trained = [](const Cell& c) { return corpus::is_trained_task(c.task); };
    r.high = score([&](const Cell& c) { return trained(c) && c.tier == "high"; }, acc);
    r.low = score([&](const Cell& c) { return trained(c) && c.tier == "low"; }, acc);
    r.overall = score(trained, acc);
    for (auto fam : {corpus::Family::F1, corpus::Family::F2, corpus::Family::F3, corpus::Family::F4})
      for (auto tier : {corpus::Tier::High, corpus::Tier::Low}) {
        const auto f = corpus::to_string(fam), t = corpus::to_string(tier);
        r.family_tier[f + "/" + t] =
            score([&](const Cell& c) { return trained(c) && c.family == f && c.tier == t; }, acc);
      }
    for (auto task : {Task::Summarize, Task::Ner}) {
      auto keep = [task](const Cell& c) { return c.task == task; };
      r.unseen[corpus::to_string(task)] = score(keep, acc);
      r.unseen_f1[corpus::to_string(task)] = score(keep, [](const Cell& c) { return c.macro_f1; });
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

json score_json(const Score& s) { return json{{"mean", s.mean}, {"per_seed", s.per_seed}, {"n", s.n}}; }

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["metadata"] = json{{"config_hash", config_hash},
                       {"corpus_seed", corpus_seed},
                       {"seeds", seeds},
                       {"bleu", kBleuScheme},
                       {"overall", "instance-weighted mean accuracy over classify and translate test cells"},
                       {"macro_f1", "classify: label macro-F1; ner: positional tag macro-F1 over {ENT, O}; "
                                    "translate and summarize: mean bag-of-token F1"}};
  json rs = json::array();
  for (const auto& r : rollups) {
    json ft = json::object(), un = json::object(), unf = json::object();
    for (const auto& [k, v] : r.family_tier) ft[k] = score_json(v);
    for (const auto& [k, v] : r.unseen) un[k] = score_json(v);
    for (const auto& [k, v] : r.unseen_f1) unf[k] = score_json(v);
    rs.push_back(json{{"method", r.method},
                      {"high", score_json(r.high)},
                      {"low", score_json(r.low)},
                      {"overall", score_json(r.overall)},
                      {"family_tier", ft},
                      {"unseen_accuracy", un},
                      {"unseen_f1", unf}});
  }
  j["rollups"] = rs;
  json cs = json::array();
  for (const auto& c : cells) {
    json cj{{"method", c.method},     {"seed", c.seed},         {"lang_id", c.lang_id},
            {"family", c.family},     {"tier", c.tier},         {"task", corpus::to_string(c.task)},
            {"n", c.n},               {"accuracy", c.accuracy}, {"macro_f1", c.macro_f1}};
    cj["bleu"] = c.bleu ? json(*c.bleu) : json(nullptr);
    cs.push_back(cj);
  }
  j["cells"] = cs;
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "# schema_version=" << kSchemaVersion << " config_hash=" << config_hash << "\n";
  os << "method,seed,lang_id,family,tier,task,n,accuracy,macro_f1,bleu\n";
  for (const auto& c : cells)
    os << c.method << ',' << c.seed << ',' << c.lang_id << ',' << c.family << ',' << c.tier << ','
       << corpus::to_string(c.task) << ',' << c.n << ',' << num(c.accuracy) << ',' << num(c.macro_f1) << ','
       << (c.bleu ? num(*c.bleu) : "") << '\n';
  return os.str();
}

EvalReport run_benchmark(const BenchConfig& cfg, const corpus::CorpusManifest& manifest,
                         const std::string& config_hash, const BenchHooks& hooks) {
  require(!cfg.methods.empty(), "benchmark: no methods configured");
  require(!cfg.seeds.empty(), "benchmark: no seeds configured");
  std::vector<RunPlan> plans;
  for (auto m : cfg.methods)
    plans.push_back(RunPlan{MethodSpec::make(m, cfg.objective), cfg.model, cfg.pretrain, cfg.loop, cfg.objective,
                            cfg.seeds, cfg.eval_k, cfg.eval_limit});
  check_fairness(plans);
  auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };

  std::map<Method, std::vector<Cell>> by_method;
  for (auto seed : cfg.seeds) {
    log("seed " + std::to_string(seed) + ": pretraining");
    const Model start = pretrained_model(cfg, manifest, seed);
    for (const auto& p : plans) {
      log("seed " + std::to_string(seed) + ": " + to_string(p.spec.method));
      Model trained;
      auto cells = run_method(p.spec, start, manifest, cfg, seed, &trained);
      if (p.spec.trains && hooks.on_trained) hooks.on_trained(p.spec.method, seed, start, trained);
      auto& dst = by_method[p.spec.method];
      dst.insert(dst.end(), cells.begin(), cells.end());
    }
  }
  EvalReport rep;
  rep.config_hash = config_hash;
  rep.corpus_seed = manifest.seed;
  rep.seeds = cfg.seeds;
  for (auto m : cfg.methods) rep.cells.insert(rep.cells.end(), by_method[m].begin(), by_method[m].end());
  rep.rollups = rollup(rep.cells, cfg.methods, cfg.seeds);
  return rep;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace xicl::evalbench
