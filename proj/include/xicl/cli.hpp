#pragma once

// Command-line front end: one JSON config file drives every subcommand.
//
//   xicl gen-corpus --config run.json [--output DIR] [--seed-override N]
//   xicl train | eval | ablate   (same flags)
//   xicl gradcheck
//
// Exit codes: 0 success, 2 config error, 3 I/O error, 4 non-finite loss,
// 5 gradient check failure, 1 anything else.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xicl/corpus.hpp"
#include "xicl/evalbench.hpp"
#include "xicl/numgrad.hpp"

namespace xicl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNonFinite = 4;
inline constexpr int kExitGradcheck = 5;

// Environment variable consulted when --seed-override is absent.
inline constexpr const char* kSeedEnv = "XICL_SEED";

struct RunConfig {
  std::string output;
  std::uint64_t seed = 1;  // training run seed
  corpus::CorpusConfig corpus;
  evalbench::BenchConfig bench;  // model, pretrain, loop, objective, eval methods/seeds

  // Replaces the run seed and the evaluation seed list.
  void override_seed(std::uint64_t s);
  std::string to_json() const;
  bool operator==(const RunConfig& o) const { return to_json() == o.to_json(); }
};

// Benchmark-scale defaults (see configs/default.json).
RunConfig default_config();

// Strict: unknown keys and wrongly typed values throw ConfigError. Missing
// keys keep their defaults.
RunConfig parse_config(const std::string& text);

// Finite-difference checks of every loss on the tiny config. A
// corrupt_factor other than 1 miscales the backward pass of each loss (a
// negative control).
std::vector<ng::GradCheckReport> gradcheck_all(double corrupt_factor = 1.0, std::size_t probes = 64);

// Subcommands; return an exit code.
int cmd_gen_corpus(const RunConfig& cfg, const std::string& config_text);
int cmd_train(const RunConfig& cfg, const std::string& config_text);
int cmd_eval(const RunConfig& cfg, const std::string& config_text, bool ablate);
int cmd_gradcheck(double corrupt_factor = 1.0);

int run(int argc, char** argv);

}  // namespace xicl::cli
