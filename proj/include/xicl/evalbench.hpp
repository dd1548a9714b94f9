#pragma once

// Baselines, metrics and the benchmark harness: every method starts from the
// same pretrained checkpoint per seed, trains (when it trains at all) under
// one shared budget, and is scored on the test splits.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xicl/corpus.hpp"
#include "xicl/loop.hpp"
#include "xicl/model.hpp"
#include "xicl/objectives.hpp"

namespace xicl::evalbench {

using corpus::Task;
using Tokens = std::vector<std::string>;

// ---- metrics ----

double accuracy(std::span<const Tokens> preds, std::span<const Tokens> golds);
double macro_f1(std::span<const std::string> preds, std::span<const std::string> golds,
                std::span<const std::string> labels);
// Sentence BLEU-4: clipped n-gram precisions, add-one smoothing for n >= 2,
// brevity penalty against the closest reference length.
double bleu(const Tokens& candidate, std::span<const Tokens> references);
// Bag-of-tokens F1 between one prediction and its gold sequence.
double token_f1(const Tokens& pred, const Tokens& gold);

inline constexpr const char* kBleuScheme =
    "sentence BLEU-4, uniform weights; p1 = clipped matches / candidate unigrams; p_n (n>=2) = (matches + 1) / "
    "(candidate n-grams + 1); brevity penalty exp(1 - r/c) when c < r with r the closest reference length; 0 when "
    "p1 = 0 or the prediction is empty";

// ---- methods ----

enum class Method { Random, CosineRet, RlOnly, OursFull, OursNoAlign, OursNoCoherence };
enum class Selection { Random, Cosine };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
const std::vector<Method>& all_methods();
const std::vector<Method>& ablation_methods();

struct MethodSpec {
  Method method = Method::OursFull;
  bool trains = true;
  Selection selection = Selection::Cosine;
  objectives::ObjectiveConfig objective;

  // Derives the method's objective from the shared base by overriding only
  // the weights the method is defined by.
  static MethodSpec make(Method m, const objectives::ObjectiveConfig& base);
  bool operator==(const MethodSpec&) const = default;
};

struct BenchConfig {
  model::ModelConfig model;
  loop::PretrainConfig pretrain;
  loop::LoopConfig loop;
  objectives::ObjectiveConfig objective;
  std::vector<Method> methods;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t eval_k = 4;
  // cap on test items per (language, task); 0 = whole split
  std::size_t eval_limit = 0;
};

// Everything a single (method, seed) run depends on.
struct RunPlan {
  MethodSpec spec;
  model::ModelConfig model;
  loop::PretrainConfig pretrain;
  loop::LoopConfig loop;
  objectives::ObjectiveConfig base_objective;
  std::vector<std::uint64_t> seeds;
  std::size_t eval_k = 0;
  std::size_t eval_limit = 0;
};

std::string plan_json(const RunPlan& p);
// Throws ContractError unless the plans differ only in their MethodSpec.
void check_fairness(std::span<const RunPlan> plans);

// ---- report ----

struct Cell {
  std::string method;
  std::uint64_t seed = 0;
  std::string lang_id;
  std::string family;
  std::string tier;
  Task task = Task::Classify;
  std::size_t n = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;  // classify: label macro-F1; ner: tag macro-F1; else mean token F1
  std::optional<double> bleu;  // translate only
  bool operator==(const Cell&) const = default;
};

struct Score {
  double mean = 0.0;
  std::vector<double> per_seed;
  std::size_t n = 0;  // instances per seed
};

struct MethodRollup {
  std::string method;
  Score high, low, overall;
  std::map<std::string, Score> family_tier;  // "F1/high"
  std::map<std::string, Score> unseen;       // "summarize", "ner" (accuracy)
  std::map<std::string, Score> unseen_f1;
};

struct EvalReport {
  static constexpr int kSchemaVersion = 1;
  std::string config_hash;
  std::uint64_t corpus_seed = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<Cell> cells;  // (method, seed, language, task) order
  std::vector<MethodRollup> rollups;

  std::string to_json() const;
  std::string to_csv() const;
};

std::vector<MethodRollup> rollup(std::span<const Cell> cells, std::span<const Method> methods,
                                 std::span<const std::uint64_t> seeds);

// Scores one model on the test splits of every (language, task). `bank`
// supplies demonstrations; Random draws k uniformly from the same task.
std::vector<Cell> evaluate(const loop::Model& m, const loop::MemoryBank& bank, const corpus::CorpusManifest& manifest,
                           const MethodSpec& spec, std::size_t k, std::uint64_t seed, std::size_t limit = 0);

// Pretrained starting point for `seed`, shared by every method.
loop::Model pretrained_model(const BenchConfig& cfg, const corpus::CorpusManifest& manifest, std::uint64_t seed);

std::vector<Cell> run_method(const MethodSpec& spec, const loop::Model& start, const corpus::CorpusManifest& manifest,
                             const BenchConfig& cfg, std::uint64_t seed, loop::Model* trained = nullptr);

struct BenchHooks {
  std::function<void(const std::string&)> log;
  // called after each training method with its start and final models
  std::function<void(Method, std::uint64_t seed, const loop::Model& start, const loop::Model& trained)> on_trained;
};

EvalReport run_benchmark(const BenchConfig& cfg, const corpus::CorpusManifest& manifest,
                         const std::string& config_hash, const BenchHooks& hooks = {});

// FNV-1a 64 of the bytes, hex.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace xicl::evalbench
