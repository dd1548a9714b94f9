#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "xicl/cli.hpp"

using namespace xicl;
using namespace xicl::cli;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kSmall = R"({
  "corpus": {"per_family": 1, "train_high": 20, "demo_high": 6, "dev": 2, "test": 3},
  "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "ctx_len": 128},
  "pretrain": {"steps": 4, "batch": 2},
  "loop": {"total_steps": 3, "warmup_steps": 1, "batch": 2, "k": 2, "generate_every": 0},
  "eval": {"methods": ["random", "rl_only"], "seeds": [1], "k": 2}
})";

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("xicl_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_config(const fs::path& dir, const std::string& text) {
  const auto p = dir / "run.json";
  std::ofstream(p) << text;
  return p.string();
}

int call(std::vector<std::string> args) {
  args.insert(args.begin(), "xicl");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct EnvSeed {
  explicit EnvSeed(const char* v) { ::setenv(kSeedEnv, v, 1); }
  ~EnvSeed() { ::unsetenv(kSeedEnv); }
};

}  // namespace

TEST_CASE("config parsing is strict and fills defaults") {
  CHECK(parse_config("{}") == default_config());
  CHECK(parse_config(default_config().to_json()) == default_config());

  const auto c = parse_config(kSmall);
  CHECK(c.corpus.per_family == 1);
  CHECK(c.bench.model.d_model == 8);
  CHECK(c.bench.model.vocab_size == default_config().bench.model.vocab_size);
  CHECK(c.bench.methods.size() == 2);

  CHECK_THROWS_AS(parse_config(R"({"modle": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"model": {"d_model": 8, "width": 3}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"model": {"d_model": "eight"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"eval": {"methods": ["ours_full", "ours_full"]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"eval": {"methods": ["oracle"]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"model": {"d_model": 10, "n_heads": 4}})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
}

TEST_CASE("seed override replaces the run and evaluation seeds") {
  auto c = parse_config(kSmall);
  c.override_seed(42);
  CHECK(c.seed == 42);
  CHECK(c.bench.seeds == std::vector<std::uint64_t>{42});
}

TEST_CASE("exit codes") {
  const auto dir = scratch("codes");
  const auto good = write_config(dir, kSmall);
  const auto out = (dir / "out").string();

  CHECK(call({"gen-corpus", "--config", (dir / "missing.json").string()}) == kExitIo);
  CHECK(call({"train", "--config", good, "--output", out}) == kExitIo);  // no corpus yet
  CHECK(call({"gen-corpus", "--config", good, "--output", out, "--seed-override", "x"}) == kExitConfig);
  {
    EnvSeed env("12abc");
    CHECK(call({"gen-corpus", "--config", good, "--output", out}) == kExitConfig);
  }
  const auto bad = dir / "bad.json";
  std::ofstream(bad) << R"({"loop": {"total_steps": 3, "bogus": 1}})";
  CHECK(call({"gen-corpus", "--config", bad.string(), "--output", out}) == kExitConfig);
  CHECK(call({"frobnicate"}) == kExitConfig);
}

TEST_CASE("the seed flag wins over the environment") {
  const auto dir = scratch("seed");
  const auto cfg = write_config(dir, kSmall);
  auto effective_seed = [&](const std::string& out) {
    return json::parse(slurp(fs::path(out) / "config.effective.json"))["seed"].get<std::uint64_t>();
  };
  const auto a = (dir / "a").string(), b = (dir / "b").string(), c = (dir / "c").string();
  CHECK(call({"gen-corpus", "--config", cfg, "--output", a}) == kExitOk);
  CHECK(effective_seed(a) == 1);
  EnvSeed env("9");
  CHECK(call({"gen-corpus", "--config", cfg, "--output", b}) == kExitOk);
  CHECK(effective_seed(b) == 9);
  CHECK(call({"gen-corpus", "--config", cfg, "--output", c, "--seed-override", "7"}) == kExitOk);
  CHECK(effective_seed(c) == 7);
  // the input config is kept verbatim
  CHECK(slurp(fs::path(c) / "config.input.json") == kSmall);
}

TEST_CASE("gen-corpus is idempotent and honours per_family") {
  const auto dir = scratch("gen");
  const auto cfg = write_config(dir, kSmall);
  const auto out = dir / "out";
  REQUIRE(call({"gen-corpus", "--config", cfg, "--output", out.string()}) == kExitOk);
  const auto manifest = slurp(out / "corpus" / "manifest.json");
  const auto stamp = fs::last_write_time(out / "corpus" / "instances.jsonl");
  REQUIRE(call({"gen-corpus", "--config", cfg, "--output", out.string()}) == kExitOk);
  CHECK(slurp(out / "corpus" / "manifest.json") == manifest);
  CHECK(fs::last_write_time(out / "corpus" / "instances.jsonl") == stamp);

  const auto m = corpus::load_manifest(out / "corpus");
  CHECK(m.languages.size() == 4);
}

TEST_CASE("train then eval writes checkpoints and matching reports") {
  const auto dir = scratch("pipeline");
  const auto cfg = write_config(dir, kSmall);
  const auto out = dir / "out";
  REQUIRE(call({"gen-corpus", "--config", cfg, "--output", out.string()}) == kExitOk);
  REQUIRE(call({"train", "--config", cfg, "--output", out.string()}) == kExitOk);
  CHECK(fs::exists(out / "train" / "pretrained.ckpt"));
  CHECK(fs::exists(out / "train" / "final.ckpt"));
  REQUIRE(call({"eval", "--config", cfg, "--output", out.string()}) == kExitOk);
  const auto rep = json::parse(slurp(out / "eval" / "report.json"));
  CHECK(rep["schema_version"] == 1);
  const auto csv = slurp(out / "eval" / "report.csv");
  CHECK(csv.rfind("# schema_version=1 config_hash=" + rep["metadata"]["config_hash"].get<std::string>(), 0) == 0);

  // the hash ignores where the run was written
  const auto elsewhere = dir / "elsewhere";
  REQUIRE(call({"gen-corpus", "--config", cfg, "--output", elsewhere.string()}) == kExitOk);
  REQUIRE(call({"eval", "--config", cfg, "--output", elsewhere.string()}) == kExitOk);
  CHECK(slurp(elsewhere / "eval" / "report.json") == slurp(out / "eval" / "report.json"));

  REQUIRE(call({"ablate", "--config", cfg, "--output", out.string()}) == kExitOk);
  const auto abl = json::parse(slurp(out / "ablate" / "report.json"));
  std::set<std::string> methods;
  for (const auto& c : abl["cells"]) methods.insert(c["method"].get<std::string>());
  CHECK(methods == std::set<std::string>{"ours_full", "ours_no_align", "ours_no_coherence"});
}

TEST_CASE("gradcheck passes and catches a corrupted gradient") {
  CHECK(cmd_gradcheck() == kExitOk);
  CHECK(call({"gradcheck"}) == kExitOk);
  CHECK(cmd_gradcheck(1.5) == kExitGradcheck);
  for (const auto& r : gradcheck_all()) {
    CHECK(r.probe_count >= 64);
    CHECK(r.tolerance <= 1e-4);
  }
}
