#pragma once

// Tiny pre-norm decoder-only transformer over the corpus vocabulary.
//
// Token layout of an assembled prompt:
//   BOS (x_1 SEP y_1 EXSEP) ... (x_k SEP y_k EXSEP) x SEP
// The model continues after the final SEP and terminates its answer with EOS.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xicl/numgrad.hpp"

namespace xicl::model {

using ng::Tensor;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kSep = 2;
inline constexpr int kExSep = 3;
inline constexpr int kEos = 4;
inline constexpr int kNumSpecials = 5;

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ctx_len = 256;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  bool zero_output_projection = false;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Gradient-check sized model.
ModelConfig tiny_config(std::uint64_t seed = 0);

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor w_qkv;  // d x 3d, [Q | K | V]
  Tensor w_attn_out;
  Tensor ln2_gain, ln2_bias;
  Tensor w_fc1, b_fc1;  // d x 4d
  Tensor w_fc2, b_fc2;  // 4d x d
};

// Parameters in checkpoint order:
//   tok_emb, pos_emb, then per layer (ln1_gain, ln1_bias, w_qkv, w_attn_out,
//   ln2_gain, ln2_bias, w_fc1, b_fc1, w_fc2, b_fc2), then lnf_gain, lnf_bias,
//   w_out.
struct Params {
  Tensor tok_emb;  // V x d
  Tensor pos_emb;  // ctx x d
  std::vector<LayerParams> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor w_out;  // d x V

  std::vector<Tensor> all() const;
  std::vector<std::string> names() const;
  Params clone() const;
};

struct ExamplePair {
  std::vector<int> x;
  std::vector<int> y;
  bool operator==(const ExamplePair&) const = default;
};

struct Prompt {
  std::vector<int> tokens;
  std::size_t query_begin = 0;  // [query_begin, query_end) is x
  std::size_t query_end = 0;
  std::size_t answer_start = 0;  // tokens[answer_start - 1] == SEP
};

Prompt assemble_prompt(std::span<const ExamplePair> context, std::span<const int> x, std::size_t ctx_len);

struct ParsedPrompt {
  std::vector<ExamplePair> context;
  std::vector<int> x;
};
// Inverse of assemble_prompt for token streams that contain no separator
// tokens inside examples.
ParsedPrompt parse_prompt(std::span<const int> tokens);

enum class DecodeMode { Greedy, Sample };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, Params params);
  static Model init(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const Params& params() const { return params_; }
  Params& params() { return params_; }
  std::vector<Tensor> parameters() const { return params_.all(); }

  // Final-layer (post layer-norm) hidden states, T x d. PAD keys are masked.
  Tensor hidden_states(std::span<const int> tokens) const;
  // T x V next-token logits; row t depends only on tokens[0..t].
  Tensor forward_logits(std::span<const int> tokens) const;
  // Logits at the given rows only.
  Tensor logits_at(std::span<const int> tokens, std::span<const std::size_t> positions) const;

  // Teacher-forced sum_t log p(y_t | prompt, y_<t).
  Tensor sequence_log_prob(const Prompt& prompt, std::span<const int> y) const;
  // Per-position answer logits: row t is the distribution of y_t.
  Tensor answer_logits(const Prompt& prompt, std::span<const int> y) const;
  // Mean of final hidden states over non-PAD positions.
  Tensor pooled_embedding(std::span<const int> tokens) const;

  std::vector<int> generate(const Prompt& prompt, std::size_t max_len, const DecodeOptions& opts = {}) const;

 private:
  void check_length(std::size_t n) const;

  ModelConfig cfg_;
  Params params_;
};

// ---- checkpoint file ----
// Layout: 8-byte magic "XICLCKPT", u32 format version, u64 header length,
// JSON header (config, step, parameter names and shapes), then every
// parameter's values as little-endian float64 in Params::all() order.
struct CheckpointHeader {
  ModelConfig config;
  std::int64_t step = 0;
};

std::string serialize_checkpoint(const Model& model, std::int64_t step);
Model deserialize_checkpoint(const std::string& bytes, CheckpointHeader* header = nullptr);
void save_checkpoint(const std::filesystem::path& path, const Model& model, std::int64_t step);
Model load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

// Little-endian helpers shared with the training-state format.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64s(std::string& out, std::span<const double> values);

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}
  std::uint32_t u32();
  std::uint64_t u64();
  void f64s(std::span<double> out);
  std::string take(std::size_t n);
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace xicl::model
