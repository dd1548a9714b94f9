#include "xicl/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "xicl/loop.hpp"
#include "xicl/objectives.hpp"

namespace xicl::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

void RunConfig::override_seed(std::uint64_t s) {
  seed = s;
  bench.seeds = {s};
}

RunConfig default_config() {
  RunConfig c;
  auto& b = c.bench;
  b.model.vocab_size = 128;
  b.model.d_model = 64;
  b.model.n_layers = 2;
  b.model.n_heads = 4;
  b.model.ctx_len = 160;
  b.loop.batch = 4;
  b.methods = evalbench::all_methods();
  b.seeds = {1, 2, 3};
  return c;
}

std::string RunConfig::to_json() const {
  const auto& b = bench;
  json j;
  j["output"] = output;
  j["seed"] = seed;
  j["corpus"] = json{{"seed", corpus.seed},         {"per_family", corpus.per_family},
                     {"low_fraction", corpus.low_fraction}, {"train_high", corpus.train_high},
                     {"demo_high", corpus.demo_high}, {"dev", corpus.dev},
                     {"test", corpus.test}};
  j["model"] = json{{"vocab_size", b.model.vocab_size}, {"d_model", b.model.d_model},
                    {"n_layers", b.model.n_layers},     {"n_heads", b.model.n_heads},
                    {"ctx_len", b.model.ctx_len},       {"init_std", b.model.init_std}};
  j["pretrain"] = json{{"steps", b.pretrain.steps},
                       {"batch", b.pretrain.batch},
                       {"lr", b.pretrain.lr},
                       {"k", b.pretrain.k},
                       {"same_language", b.pretrain.same_language},
                       {"lr_warmup", b.pretrain.lr_warmup},
                       {"min_lr_fraction", b.pretrain.min_lr_fraction}};
  j["objective"] = json{{"nll_weight", b.objective.nll_weight},
                        {"align_weight", b.objective.align_weight},
                        {"lambda", b.objective.lambda},
                        {"gamma", b.objective.gamma},
                        {"alpha", b.objective.alpha},
                        {"beta", b.objective.beta},
                        {"kl_direction", objectives::to_string(b.objective.kl_direction)},
                        {"accuracy_mode", objectives::to_string(b.objective.accuracy_mode)}};
  j["loop"] = json{{"k", b.loop.k},
                   {"temperature", b.loop.temperature},
                   {"warmup_steps", b.loop.warmup_steps},
                   {"total_steps", b.loop.total_steps},
                   {"batch", b.loop.batch},
                   {"lr", b.loop.lr},
                   {"bank_capacity", b.loop.bank_capacity},
                   {"refresh_every", b.loop.refresh_every},
                   {"checkpoint_every", b.loop.checkpoint_every},
                   {"baseline_decay", b.loop.baseline_decay},
                   {"generate_every", b.loop.generate_every},
                   {"generate_count", b.loop.generate_count}};
  json methods = json::array();
  for (auto m : b.methods) methods.push_back(evalbench::to_string(m));
  j["eval"] = json{{"methods", methods}, {"seeds", b.seeds}, {"k", b.eval_k}, {"limit", b.eval_limit}};
  return j.dump(2) + "\n";
}

namespace {

// Overlays `in` onto `base`, rejecting keys and value kinds that `base` does
// not have.
void overlay(json& base, const json& in, const std::string& path) {
  if (!in.is_object()) throw ConfigError((path.empty() ? "config" : path) + " must be an object");
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    const json& v = it.value();
    if (slot.is_object()) {
      overlay(slot, v, key);
      continue;
    }
    bool ok;
    if (slot.is_number_unsigned() || slot.is_number_integer())
      ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    else if (slot.is_number_float())
      ok = v.is_number();
    else if (slot.is_string())
      ok = v.is_string();
    else if (slot.is_boolean())
      ok = v.is_boolean();
    else if (slot.is_array())
      ok = v.is_array();
    else
      ok = false;
    if (!ok) throw ConfigError("config key '" + key + "' has the wrong type");
    slot = v;
  }
}

template <class T>
T field(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + section + "." + key + "': " + e.what());
  }
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json in;
  try {
    in = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json j = json::parse(default_config().to_json());
  overlay(j, in, "");

  RunConfig c;
  c.output = j.at("output").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  auto& cc = c.corpus;
  cc.seed = field<std::uint64_t>(j, "corpus", "seed");
  cc.per_family = field<std::size_t>(j, "corpus", "per_family");
  cc.low_fraction = field<double>(j, "corpus", "low_fraction");
  cc.train_high = field<std::size_t>(j, "corpus", "train_high");
  cc.demo_high = field<std::size_t>(j, "corpus", "demo_high");
  cc.dev = field<std::size_t>(j, "corpus", "dev");
  cc.test = field<std::size_t>(j, "corpus", "test");
  auto& b = c.bench;
  b.model.vocab_size = field<std::size_t>(j, "model", "vocab_size");
  b.model.d_model = field<std::size_t>(j, "model", "d_model");
  b.model.n_layers = field<std::size_t>(j, "model", "n_layers");
  b.model.n_heads = field<std::size_t>(j, "model", "n_heads");
  b.model.ctx_len = field<std::size_t>(j, "model", "ctx_len");
  b.model.init_std = field<double>(j, "model", "init_std");
  b.pretrain.steps = field<std::size_t>(j, "pretrain", "steps");
  b.pretrain.batch = field<std::size_t>(j, "pretrain", "batch");
  b.pretrain.lr = field<double>(j, "pretrain", "lr");
  b.pretrain.k = field<std::size_t>(j, "pretrain", "k");
  b.pretrain.same_language = field<double>(j, "pretrain", "same_language");
  b.pretrain.lr_warmup = field<std::size_t>(j, "pretrain", "lr_warmup");
  b.pretrain.min_lr_fraction = field<double>(j, "pretrain", "min_lr_fraction");
  auto& o = b.objective;
  o.nll_weight = field<double>(j, "objective", "nll_weight");
  o.align_weight = field<double>(j, "objective", "align_weight");
  o.lambda = field<double>(j, "objective", "lambda");
  o.gamma = field<double>(j, "objective", "gamma");
  o.alpha = field<double>(j, "objective", "alpha");
  o.beta = field<double>(j, "objective", "beta");
  auto& l = b.loop;
  l.k = field<std::size_t>(j, "loop", "k");
  l.temperature = field<double>(j, "loop", "temperature");
  l.warmup_steps = field<std::size_t>(j, "loop", "warmup_steps");
  l.total_steps = field<std::size_t>(j, "loop", "total_steps");
  l.batch = field<std::size_t>(j, "loop", "batch");
  l.lr = field<double>(j, "loop", "lr");
  l.bank_capacity = field<std::size_t>(j, "loop", "bank_capacity");
  l.refresh_every = field<std::size_t>(j, "loop", "refresh_every");
  l.checkpoint_every = field<std::size_t>(j, "loop", "checkpoint_every");
  l.baseline_decay = field<double>(j, "loop", "baseline_decay");
  l.generate_every = field<std::size_t>(j, "loop", "generate_every");
  l.generate_count = field<std::size_t>(j, "loop", "generate_count");
  b.eval_k = field<std::size_t>(j, "eval", "k");
  b.eval_limit = field<std::size_t>(j, "eval", "limit");
  b.seeds = field<std::vector<std::uint64_t>>(j, "eval", "seeds");
  try {
    o.kl_direction = objectives::kl_direction_from_string(field<std::string>(j, "objective", "kl_direction"));
    o.accuracy_mode = objectives::accuracy_mode_from_string(field<std::string>(j, "objective", "accuracy_mode"));
    b.methods.clear();
    for (const auto& s : field<std::vector<std::string>>(j, "eval", "methods"))
      b.methods.push_back(evalbench::method_from_string(s));
    model::ModelConfig mc = b.model;
    mc.validate();
    o.validate();
    l.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (cc.per_family == 0) throw ConfigError("corpus.per_family must be at least 1");
  if (cc.low_fraction < 0.0 || cc.low_fraction > 1.0) throw ConfigError("corpus.low_fraction must lie in [0, 1]");
  if (b.pretrain.batch == 0) throw ConfigError("pretrain.batch must be positive");
  for (std::size_t i = 0; i < b.methods.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (b.methods[i] == b.methods[k]) throw ConfigError("eval.methods lists a method twice");
  return c;
}

// ---------------------------------------------------------------------------
// Gradient check

std::vector<ng::GradCheckReport> gradcheck_all(double corrupt_factor, std::size_t probes) {
  auto m = model::Model::init(model::tiny_config(7));
  auto ps = m.parameters();
  Rng rng(12);
  auto tokens = [&](std::size_t n) {
    std::vector<int> v(n);
    for (auto& t : v) t = 5 + static_cast<int>(uniform_index(rng, 27));
    return v;
  };
  const auto x = tokens(4), y = tokens(3);
  const std::vector<model::ExamplePair> ctx{{tokens(3), tokens(2)}, {tokens(3), tokens(2)}};
  const auto ref = objectives::reference_logits(m, x, y);
  std::vector<double> bank(24);
  for (auto& v : bank) v = normal(rng);
  const auto bank_t = ng::Tensor::constant({3, 8}, bank);
  const auto ctx_len = m.config().ctx_len;

  auto wrap = [&](ng::Tensor t) {
    return corrupt_factor == 1.0 ? t : ng::testing::miscaled_gradient(t, corrupt_factor);
  };
  auto align = [&] { return objectives::align_loss(m, x, ctx, y, ref); };
  auto coh = [&] { return objectives::coherence_loss(m, x, y); };
  auto rl = [&] {
    auto sel = ng::index(ng::log_softmax(ng::cosine_scores(m.pooled_embedding(x), bank_t), 0), 2);
    return objectives::reinforce_loss(sel, 0.8, 0.3);
  };
  auto nll = [&] { return objectives::answer_nll(m.answer_logits(model::assemble_prompt(ctx, x, ctx_len), y), y); };
  const objectives::ObjectiveConfig obj;

  std::vector<std::pair<std::string, std::function<ng::Tensor()>>> losses{
      {"align", [&] { return wrap(align()); }},
      {"coherence", [&] { return wrap(coh()); }},
      {"total", [&] { return wrap(objectives::total_loss(nll(), align(), coh(), rl(), obj).value); }},
      {"sequence_log_prob",
       [&] { return wrap(m.sequence_log_prob(model::assemble_prompt(ctx, x, ctx_len), y)); }},
  };
  std::vector<ng::GradCheckReport> out;
  std::uint64_t seed = 17;
  for (auto& [name, fn] : losses) out.push_back(ng::finite_diff_check(name, fn, ps, probes, 1e-5, 1e-4, seed++));
  return out;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  if (ec) throw IoError("cannot create " + p.parent_path().string() + ": " + ec.message());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed for " + p.string());
}

fs::path out_dir(const RunConfig& cfg) {
  if (cfg.output.empty()) throw ConfigError("no output directory: set \"output\" or pass --output");
  return cfg.output;
}

void emit_config(const RunConfig& cfg, const std::string& text) {
  write_file(out_dir(cfg) / "config.input.json", text);
  write_file(out_dir(cfg) / "config.effective.json", cfg.to_json());
}

corpus::CorpusManifest load_corpus(const RunConfig& cfg) {
  const auto dir = out_dir(cfg) / "corpus";
  if (!fs::exists(dir / "manifest.json")) throw IoError("no corpus at " + dir.string() + "; run gen-corpus first");
  auto m = corpus::load_manifest(dir);
  corpus::validate_manifest(m);
  return m;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

}  // namespace

int cmd_gen_corpus(const RunConfig& cfg, const std::string& text) {
  const auto dir = out_dir(cfg) / "corpus";
  const auto manifest = corpus::build_manifest(cfg.corpus);
  corpus::validate_manifest(manifest);
  const auto header = corpus::manifest_header_text(manifest);
  const auto instances = corpus::instances_text(manifest);
  emit_config(cfg, text);
  bool same = false;
  if (fs::exists(dir / "manifest.json") && fs::exists(dir / "instances.jsonl"))
    same = read_file(dir / "manifest.json") == header && read_file(dir / "instances.jsonl") == instances;
  if (!same) corpus::write_manifest(manifest, dir);

  std::size_t high = 0;
  for (const auto& l : manifest.languages) high += l.tier == corpus::Tier::High;
  std::printf("languages: %zu (%zu high, %zu low)\n", manifest.languages.size(), high,
              manifest.languages.size() - high);
  std::printf("vocabulary: %zu tokens\n", manifest.vocabulary().size());
  for (auto task : corpus::kAllTasks) {
    std::size_t tr = 0, dv = 0, te = 0;
    for (const auto& [key, ids] : manifest.splits)
      if (key.second == task) {
        tr += ids.train.size();
        dv += ids.dev.size();
        te += ids.test.size();
      }
    std::printf("%-10s train %zu dev %zu test %zu\n", corpus::to_string(task).c_str(), tr, dv, te);
  }
  std::printf("instances: %zu\n%s %s\n", manifest.instances.size(), same ? "unchanged:" : "wrote:",
              dir.string().c_str());
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& text) {
  const auto manifest = load_corpus(cfg);
  emit_config(cfg, text);
  const auto dir = out_dir(cfg) / "train";
  log_line("pretraining (" + std::to_string(cfg.bench.pretrain.steps) + " steps)");
  const auto start = evalbench::pretrained_model(cfg.bench, manifest, cfg.seed);
  std::error_code ec;
  fs::create_directories(dir, ec);
  model::save_checkpoint(dir / "pretrained.ckpt", start, 0);
  auto state = loop::make_train_state(start, manifest, cfg.bench.loop, cfg.seed);
  loop::RunOptions opts;
  opts.output_dir = dir;
  opts.on_step = [](const loop::StepRecord& r) {
    if (r.step % 100 == 0) log_line("step " + std::to_string(r.step) + " " + loop::to_json_line(r));
  };
  const auto recs = loop::run_training(state, manifest, cfg.bench.loop, cfg.bench.objective, opts);
  std::printf("trained %zu steps; final checkpoint %s\n", recs.size(), (dir / "final.ckpt").string().c_str());
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg_in, const std::string& text, bool ablate) {
  RunConfig cfg = cfg_in;
  if (ablate) cfg.bench.methods = evalbench::ablation_methods();
  const auto manifest = load_corpus(cfg);
  emit_config(cfg, text);
  // the hash names the experiment, not where it was written
  RunConfig unplaced = cfg;
  unplaced.output.clear();
  const auto hash = evalbench::fnv1a_hex(unplaced.to_json());
  evalbench::BenchHooks hooks;
  hooks.log = log_line;
  const auto rep = evalbench::run_benchmark(cfg.bench, manifest, hash, hooks);
  const auto dir = out_dir(cfg) / (ablate ? "ablate" : "eval");
  write_file(dir / "report.json", rep.to_json());
  write_file(dir / "report.csv", rep.to_csv());
  std::printf("%-18s %8s %8s %8s\n", "method", "high", "low", "overall");
  for (const auto& r : rep.rollups)
    std::printf("%-18s %8.4f %8.4f %8.4f\n", r.method.c_str(), r.high.mean, r.low.mean, r.overall.mean);
  std::printf("report: %s\n", (dir / "report.json").string().c_str());
  return kExitOk;
}

int cmd_gradcheck(double corrupt_factor) {
  bool ok = true;
  for (const auto& r : gradcheck_all(corrupt_factor)) {
    std::printf("%-18s probes %3zu  max rel error %.3e  tol %.0e  %s\n", r.op_name.c_str(), r.probe_count,
                r.max_rel_error, r.tolerance, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitGradcheck;
}

int run(int argc, char** argv) {
  CLI::App app{"Self-retrieving in-context learning on a synthetic multilingual benchmark"};
  app.require_subcommand(1);
  std::string config_path, output;
  std::optional<std::uint64_t> seed;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config (JSON)")->required();
    sub->add_option("--output", output, "output directory (overrides the config)");
    sub->add_option("--seed-override", seed, std::string("run seed; also read from ") + kSeedEnv);
  };
  auto* gen = app.add_subcommand("gen-corpus", "build and write the synthetic corpus");
  auto* train = app.add_subcommand("train", "pretrain, then run the training loop");
  auto* eval = app.add_subcommand("eval", "run the configured methods over all seeds");
  auto* ablate = app.add_subcommand("ablate", "run the three ablation variants");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  for (auto* s : {gen, train, eval, ablate}) add_common(s);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (grad->parsed()) return cmd_gradcheck();
    const std::string text = read_file(config_path);
    RunConfig cfg = parse_config(text);
    if (!output.empty()) cfg.output = output;
    if (!seed) {
      if (const char* env = std::getenv(kSeedEnv); env && *env) {
        try {
          std::size_t used = 0;
          const auto v = std::stoull(env, &used);
          if (used != std::string(env).size()) throw std::invalid_argument(env);
          seed = v;
        } catch (const std::exception&) {
          throw ConfigError(std::string(kSeedEnv) + " is not an unsigned integer");
        }
      }
    }
    if (seed) cfg.override_seed(*seed);
    if (gen->parsed()) return cmd_gen_corpus(cfg, text);
    if (train->parsed()) return cmd_train(cfg, text);
    return cmd_eval(cfg, text, ablate->parsed());
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kExitNonFinite;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace xicl::cli
