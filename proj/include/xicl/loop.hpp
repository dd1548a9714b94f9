#pragma once

// Training orchestration: the memory bank the model retrieves demonstrations
// from, the sampling policy over it, verified self-generated pairs, the
// warmup-then-RL schedule and retriever-free inference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xicl/corpus.hpp"
#include "xicl/model.hpp"
#include "xicl/objectives.hpp"
#include "xicl/rng.hpp"

namespace xicl::loop {

using corpus::Task;
using model::ExamplePair;
using model::Model;
using ng::Tensor;

enum class Source { Memory, Generated };
enum class SelectMode { Sample, Argmax };
enum class Phase { Warmup, Rl };

std::string to_string(Source s);
std::string to_string(Phase p);

// A training or evaluation datum in token ids. x starts with the task tag and
// y ends with EOS.
struct Item {
  std::vector<int> x;
  std::vector<int> y;
  std::string lang_id;
  Task task = Task::Classify;
  std::uint64_t frame_id = 0;
};

Item make_item(const corpus::TaskInstance& inst, const corpus::Vocabulary& vocab);

struct BankEntry {
  std::uint64_t id = 0;  // assigned by the bank
  ExamplePair pair;
  std::string lang_id;
  Task task = Task::Classify;
  std::uint64_t frame_id = 0;
  Source source = Source::Memory;
};

class MemoryBank {
 public:
  explicit MemoryBank(std::size_t capacity = 2048) : capacity_(capacity) {}

  // Inserts an entry and caches its embedding under `model` tagged with
  // `version`. When full, the oldest entry is evicted.
  std::uint64_t add(BankEntry e, const Model& model, std::int64_t version);
  // Recomputes every cached embedding.
  void refresh(const Model& model, std::int64_t version);

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  const BankEntry& entry(std::size_t slot) const { return entries_.at(slot); }
  const std::vector<BankEntry>& entries() const { return entries_; }
  const std::vector<double>& embedding(std::size_t slot) const { return embeddings_.at(slot); }
  std::int64_t embedding_version(std::size_t slot) const { return versions_.at(slot); }
  // Slot holding (lang, task, frame), if any.
  std::optional<std::size_t> find(const std::string& lang_id, Task task, std::uint64_t frame_id) const;
  // Slots whose entry has `task`, in slot order.
  std::vector<std::size_t> slots_for(Task task) const;
  // Constant [n x d] matrix of cached embeddings for the given slots.
  Tensor embedding_matrix(std::span<const std::size_t> slots) const;

  std::string serialize() const;
  static MemoryBank deserialize(const std::string& bytes);
  bool operator==(const MemoryBank&) const;

 private:
  static std::string key(const std::string& lang_id, Task task, std::uint64_t frame_id);

  std::size_t capacity_;
  std::size_t cursor_ = 0;  // next slot to evict once full
  std::uint64_t next_id_ = 0;
  std::vector<BankEntry> entries_;
  std::vector<std::vector<double>> embeddings_;
  std::vector<std::int64_t> versions_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ContextSet {
  std::vector<ExamplePair> examples;
  std::vector<std::uint64_t> ids;  // bank entry ids, in selection order
  std::vector<std::size_t> slots;
  std::vector<Source> sources;
  Tensor selection_log_prob;

  std::size_t k() const { return examples.size(); }
  // Generated when any member was self-generated.
  Source source() const;
};

struct Selection {
  std::vector<std::size_t> order;  // positions into the score vector
  Tensor log_prob;                 // sum of conditional step log-probs
};

// Sequential sampling without replacement from softmax(scores / temperature).
// Argmax mode ranks by score, ties broken by `tie_keys` ascending (position
// when empty); its log_prob is that of drawing the same ordered set.
Selection sequential_select(const Tensor& scores, std::size_t k, double temperature, SelectMode mode, Rng* rng,
                            std::span<const std::uint64_t> tie_keys = {});
// Reference log-probability of drawing `order`, in plain arithmetic.
double sequential_log_prob(std::span<const double> scores, std::span<const std::size_t> order, double temperature);

struct SelectFilter {
  std::optional<Task> task;
  std::vector<std::uint64_t> exclude_ids;
};

ContextSet select_context(const Model& m, std::span<const int> x, const MemoryBank& bank, std::size_t k,
                          double temperature, SelectMode mode, Rng& rng, const SelectFilter& filter = {});

// Samples frames outside every dev/test split of (lang, task), decodes with
// the model and keeps the pairs whose output equals the corpus gold answer.
std::vector<BankEntry> generate_pairs(const Model& m, const corpus::CorpusManifest& manifest,
                                      const corpus::Vocabulary& vocab, const std::string& lang_id, Task task,
                                      std::size_t n, std::uint64_t seed, const model::DecodeOptions& opts = {});

// Upper bound on generated answer length.
inline constexpr std::size_t kMaxAnswerLength = corpus::kMaxSourceLength + 1;

// Number of leading demonstrations that fit in ctx_len together with x and
// `answer_budget` generated tokens.
std::size_t fitting_demos(std::span<const ExamplePair> context, std::span<const int> x, std::size_t ctx_len,
                          std::size_t answer_budget);

// Greedy decoding of a prompt built from `context` (trimmed to fit), capped at
// the context window.
std::vector<int> decode_with(const Model& m, std::span<const ExamplePair> context, std::span<const int> x,
                             std::size_t max_len = kMaxAnswerLength);

// Argmax selection, prompt assembly and greedy decoding. An empty candidate
// pool falls back to a zero-shot prompt with a warning on stderr.
std::vector<int> infer(const Model& m, const MemoryBank& bank, std::span<const int> x, std::size_t k,
                       std::optional<Task> task = std::nullopt, std::size_t max_len = kMaxAnswerLength);

// Pretraining on in-context prompts by maximum likelihood.
struct PretrainConfig {
  std::size_t steps = 6000;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::size_t k = 4;
  // chance that a demonstration comes from the query's own language
  double same_language = 1.0;
  // linear warmup, then cosine decay to min_lr_fraction * lr
  std::size_t lr_warmup = 100;
  double min_lr_fraction = 1.0;

  bool operator==(const PretrainConfig&) const = default;
};

struct LoopConfig {
  std::size_t k = 4;
  double temperature = 1.0;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 2000;
  std::size_t batch = 16;
  double lr = 3e-4;
  std::size_t bank_capacity = 2048;
  std::size_t refresh_every = 50;
  std::size_t checkpoint_every = 500;
  double baseline_decay = 0.99;
  // after warmup, every generate_every steps try generate_count fresh pairs
  std::size_t generate_every = 250;
  std::size_t generate_count = 8;

  void validate() const;
  bool operator==(const LoopConfig&) const = default;
};

struct TrainState {
  std::int64_t step = 0;
  Model model;
  ng::Adam optimizer;
  double baseline = 0.0;
  bool baseline_set = false;
  Rng rng;
  MemoryBank bank;

  Phase phase(const LoopConfig& cfg) const;
  TrainState clone() const;
  std::string serialize() const;
  static TrainState deserialize(const std::string& bytes);
};

// Fresh state for `model` with every train/demo instance of `manifest` in
// the bank.
TrainState make_train_state(const Model& model, const corpus::CorpusManifest& manifest, const LoopConfig& cfg,
                            std::uint64_t seed);
void save_train_state(const std::filesystem::path& path, const TrainState& s);
TrainState load_train_state(const std::filesystem::path& path);

// Raised when a loss or gradient stops being finite; what() carries a dump of
// the batch.
class NonFiniteLoss : public NumericError {
 public:
  using NumericError::NumericError;
};

struct StepRecord {
  std::int64_t step = 0;  // index of the completed step, from 0
  Phase phase = Phase::Warmup;
  objectives::LossBreakdown loss;  // batch means
  double reward_mean = 0.0;
  std::size_t bank_size = 0;
};

std::string to_json_line(const StepRecord& r);

StepRecord train_step(TrainState& state, std::span<const Item> batch, const LoopConfig& cfg,
                      const objectives::ObjectiveConfig& obj);

// All (lang, trained task) train items, in manifest order.
std::vector<Item> training_pool(const corpus::CorpusManifest& manifest, const corpus::Vocabulary& vocab);

std::vector<double> pretrain(Model& m, const corpus::CorpusManifest& manifest, const PretrainConfig& cfg,
                             std::uint64_t seed);

struct RunOptions {
  std::optional<std::filesystem::path> output_dir;  // checkpoints + metrics.jsonl
  std::function<void(const StepRecord&)> on_step;
};

// Runs until state.step == cfg.total_steps. Checkpoints (model file plus
// resumable train state) are written every checkpoint_every steps and at the
// end.
std::vector<StepRecord> run_training(TrainState& state, const corpus::CorpusManifest& manifest,
                                     const LoopConfig& cfg, const objectives::ObjectiveConfig& obj,
                                     const RunOptions& opts = {});

}  // namespace xicl::loop
