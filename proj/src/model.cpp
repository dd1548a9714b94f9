#include "xicl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "xicl/rng.hpp"

namespace xicl::model {

using json = nlohmann::ordered_json;
namespace ngo = xicl::ng;

void ModelConfig::validate() const {
  require(vocab_size > kNumSpecials, "model: vocab_size must exceed the special tokens");
  require(d_model > 0 && n_layers > 0 && n_heads > 0 && ctx_len > 0, "model: sizes must be positive");
  require(d_model % n_heads == 0, "model: d_model must be divisible by n_heads");
  require(init_std > 0.0, "model: init_std must be positive");
}

ModelConfig tiny_config(std::uint64_t seed) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ctx_len = 64;
  c.seed = seed;
  c.init_std = 0.3;
  return c;
}

// ---------------------------------------------------------------------------
// Params

std::vector<Tensor> Params::all() const {
  std::vector<Tensor> out{tok_emb, pos_emb};
  for (const auto& l : layers) {
    out.insert(out.end(), {l.ln1_gain, l.ln1_bias, l.w_qkv, l.w_attn_out, l.ln2_gain, l.ln2_bias, l.w_fc1, l.b_fc1,
                           l.w_fc2, l.b_fc2});
  }
  out.insert(out.end(), {lnf_gain, lnf_bias, w_out});
  return out;
}

std::vector<std::string> Params::names() const {
  std::vector<std::string> out{"tok_emb", "pos_emb"};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    for (const char* n : {"ln1_gain", "ln1_bias", "w_qkv", "w_attn_out", "ln2_gain", "ln2_bias", "w_fc1", "b_fc1",
                          "w_fc2", "b_fc2"})
      out.push_back(p + n);
  }
  out.insert(out.end(), {"lnf_gain", "lnf_bias", "w_out"});
  return out;
}

Params Params::clone() const {
  auto copy = [](const Tensor& t) {
    return Tensor::parameter(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
  };
  Params p;
  p.tok_emb = copy(tok_emb);
  p.pos_emb = copy(pos_emb);
  for (const auto& l : layers) {
    p.layers.push_back({copy(l.ln1_gain), copy(l.ln1_bias), copy(l.w_qkv), copy(l.w_attn_out), copy(l.ln2_gain),
                        copy(l.ln2_bias), copy(l.w_fc1), copy(l.b_fc1), copy(l.w_fc2), copy(l.b_fc2)});
  }
  p.lnf_gain = copy(lnf_gain);
  p.lnf_bias = copy(lnf_bias);
  p.w_out = copy(w_out);
  return p;
}

// ---------------------------------------------------------------------------
// Prompt layout

Prompt assemble_prompt(std::span<const ExamplePair> context, std::span<const int> x, std::size_t ctx_len) {
  std::size_t required = 1 + x.size() + 1;
  for (const auto& ex : context) required += ex.x.size() + ex.y.size() + 2;
  if (required > ctx_len) {
    throw ContractError("prompt needs " + std::to_string(required) + " tokens but context holds " +
                        std::to_string(ctx_len));
  }
  Prompt p;
  p.tokens.reserve(required);
  p.tokens.push_back(kBos);
  for (const auto& ex : context) {
    p.tokens.insert(p.tokens.end(), ex.x.begin(), ex.x.end());
    p.tokens.push_back(kSep);
    p.tokens.insert(p.tokens.end(), ex.y.begin(), ex.y.end());
    p.tokens.push_back(kExSep);
  }
  p.query_begin = p.tokens.size();
  p.tokens.insert(p.tokens.end(), x.begin(), x.end());
  p.query_end = p.tokens.size();
  p.tokens.push_back(kSep);
  p.answer_start = p.tokens.size();
  return p;
}

ParsedPrompt parse_prompt(std::span<const int> tokens) {
  require(!tokens.empty() && tokens.front() == kBos, "parse_prompt: missing BOS");
  require(tokens.size() >= 2 && tokens.back() == kSep, "parse_prompt: prompt must end with SEP");
  ParsedPrompt out;
  std::vector<int> seg;
  std::vector<int> first;
  bool have_sep = false;
  for (std::size_t i = 1; i + 1 < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t == kSep) {
      require(!have_sep, "parse_prompt: two SEPs in one example");
      first = std::move(seg);
      seg.clear();
      have_sep = true;
    } else if (t == kExSep) {
      require(have_sep, "parse_prompt: example without SEP");
      out.context.push_back({std::move(first), std::move(seg)});
      first.clear();
      seg.clear();
      have_sep = false;
    } else {
      seg.push_back(t);
    }
  }
  require(!have_sep, "parse_prompt: query contains SEP");
  out.x = std::move(seg);
  return out;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig cfg, Params params) : cfg_(cfg), params_(std::move(params)) { cfg_.validate(); }

Model Model::init(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t V = cfg.vocab_size, d = cfg.d_model;
  auto gaussian = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = cfg.init_std * normal(rng);
    return Tensor::parameter({r, c}, std::move(v));
  };
  auto constant = [](std::size_t n, double value) { return Tensor::parameter({n}, std::vector<double>(n, value)); };
  Params p;
  p.tok_emb = gaussian(V, d);
  p.pos_emb = gaussian(cfg.ctx_len, d);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_gain = constant(d, 1.0);
    lp.ln1_bias = constant(d, 0.0);
    lp.w_qkv = gaussian(d, 3 * d);
    lp.w_attn_out = gaussian(d, d);
    lp.ln2_gain = constant(d, 1.0);
    lp.ln2_bias = constant(d, 0.0);
    lp.w_fc1 = gaussian(d, 4 * d);
    lp.b_fc1 = constant(4 * d, 0.0);
    lp.w_fc2 = gaussian(4 * d, d);
    lp.b_fc2 = constant(d, 0.0);
    p.layers.push_back(std::move(lp));
  }
  p.lnf_gain = constant(d, 1.0);
  p.lnf_bias = constant(d, 0.0);
  p.w_out = cfg.zero_output_projection ? Tensor::zeros({d, V}, true) : gaussian(d, V);
  return Model(cfg, std::move(p));
}

void Model::check_length(std::size_t n) const {
  require(n > 0, "model: empty token sequence");
  if (n > cfg_.ctx_len) {
    throw ContractError("sequence of " + std::to_string(n) + " tokens exceeds ctx_len " +
                        std::to_string(cfg_.ctx_len));
  }
}

Tensor Model::hidden_states(std::span<const int> tokens) const {
  const std::size_t T = tokens.size();
  check_length(T);
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size)
      throw ContractError("token id " + std::to_string(t) + " outside vocabulary");
  }
  std::vector<std::uint8_t> key_valid(T);
  for (std::size_t t = 0; t < T; ++t) key_valid[t] = tokens[t] != kPad;

  Tensor x = ngo::add(ngo::embedding(params_.tok_emb, tokens), ngo::slice_rows(params_.pos_emb, 0, T));
  for (const auto& l : params_.layers) {
    Tensor h = ngo::layer_norm(x, l.ln1_gain, l.ln1_bias);
    Tensor att = ngo::causal_attention(ngo::matmul(h, l.w_qkv), cfg_.n_heads, key_valid);
    x = ngo::add(x, ngo::matmul(att, l.w_attn_out));
    Tensor h2 = ngo::layer_norm(x, l.ln2_gain, l.ln2_bias);
    Tensor f = ngo::gelu(ngo::add_rowwise(ngo::matmul(h2, l.w_fc1), l.b_fc1));
    x = ngo::add(x, ngo::add_rowwise(ngo::matmul(f, l.w_fc2), l.b_fc2));
  }
  return ngo::layer_norm(x, params_.lnf_gain, params_.lnf_bias);
}

Tensor Model::forward_logits(std::span<const int> tokens) const {
  return ngo::matmul(hidden_states(tokens), params_.w_out);
}

Tensor Model::logits_at(std::span<const int> tokens, std::span<const std::size_t> positions) const {
  return ngo::matmul(ngo::select_rows(hidden_states(tokens), positions), params_.w_out);
}

Tensor Model::answer_logits(const Prompt& prompt, std::span<const int> y) const {
  require(!y.empty(), "sequence_log_prob: empty target sequence");
  require(prompt.answer_start == prompt.tokens.size() && prompt.answer_start > 0 &&
              prompt.tokens[prompt.answer_start - 1] == kSep,
          "sequence_log_prob: malformed prompt");
  std::vector<int> input = prompt.tokens;
  input.insert(input.end(), y.begin(), y.end() - 1);
  std::vector<std::size_t> rows(y.size());
  std::iota(rows.begin(), rows.end(), prompt.answer_start - 1);
  return logits_at(input, rows);
}

Tensor Model::sequence_log_prob(const Prompt& prompt, std::span<const int> y) const {
  Tensor lp = ngo::log_softmax(answer_logits(prompt, y), 1);
  std::vector<std::size_t> rows(y.size()), cols(y.begin(), y.end());
  std::iota(rows.begin(), rows.end(), 0);
  return ngo::sum(ngo::pick(lp, rows, cols));
}

Tensor Model::pooled_embedding(std::span<const int> tokens) const {
  std::vector<double> mask(tokens.size());
  bool any = false;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    mask[t] = tokens[t] != kPad ? 1.0 : 0.0;
    any = any || mask[t] != 0.0;
  }
  require(any, "pooled_embedding: input has no non-PAD token");
  return ngo::mean_pool(hidden_states(tokens), Tensor::vector(std::move(mask)));
}

std::vector<int> Model::generate(const Prompt& prompt, std::size_t max_len, const DecodeOptions& opts) const {
  std::vector<int> out;
  if (max_len == 0) return out;
  ngo::NoGradGuard guard;
  Rng rng(opts.seed);
  std::vector<int> tokens = prompt.tokens;
  const std::size_t V = cfg_.vocab_size;
  for (std::size_t step = 0; step < max_len; ++step) {
    const std::size_t last = tokens.size() - 1;
    Tensor logits = logits_at(tokens, std::span<const std::size_t>(&last, 1));
    auto row = logits.data();
    int next = 0;
    if (opts.mode == DecodeMode::Greedy) {
      next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    } else {
      require(opts.temperature > 0.0, "generate: temperature must be positive");
      double mx = -INFINITY;
      for (double v : row) mx = std::max(mx, v / opts.temperature);
      std::vector<double> w(V);
      double z = 0.0;
      for (std::size_t i = 0; i < V; ++i) {
        w[i] = std::exp(row[i] / opts.temperature - mx);
        z += w[i];
      }
      double u = uniform01(rng) * z;
      next = static_cast<int>(V - 1);
      for (std::size_t i = 0; i < V; ++i) {
        if (u < w[i]) {
          next = static_cast<int>(i);
          break;
        }
        u -= w[i];
      }
    }
    if (next == kEos) break;
    out.push_back(next);
    tokens.push_back(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[8] = {'X', 'I', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

json config_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"ctx_len", c.ctx_len},   {"seed", c.seed},
              {"init_std", c.init_std},     {"zero_output_projection", c.zero_output_projection}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ctx_len = j.at("ctx_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.init_std = j.at("init_std").get<double>();
  c.zero_output_projection = j.at("zero_output_projection").get<bool>();
  return c;
}
}  // namespace

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64s(std::string& out, std::span<const double> values) {
  for (double d : values) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

std::string ByteReader::take(std::size_t n) {
  if (pos_ + n > bytes_.size()) throw IoError("truncated binary file");
  std::string s = bytes_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::uint32_t ByteReader::u32() {
  const std::string s = take(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
  return v;
}

std::uint64_t ByteReader::u64() {
  const std::string s = take(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
  return v;
}

void ByteReader::f64s(std::span<double> out) {
  for (auto& d : out) d = std::bit_cast<double>(u64());
}

std::string serialize_checkpoint(const Model& model, std::int64_t step) {
  json h;
  h["config"] = config_json(model.config());
  h["step"] = step;
  json shapes = json::array();
  const auto params = model.parameters();
  const auto names = model.params().names();
  for (std::size_t i = 0; i < params.size(); ++i) shapes.push_back(json{{"name", names[i]}, {"shape", params[i].shape()}});
  h["params"] = shapes;
  const std::string header = h.dump();
  std::string out(kMagic, kMagic + 8);
  put_u32(out, kFormatVersion);
  put_u64(out, header.size());
  out += header;
  for (const auto& p : params) put_f64s(out, p.data());
  return out;
}

Model deserialize_checkpoint(const std::string& bytes, CheckpointHeader* header) {
  ByteReader r(bytes);
  if (r.take(8) != std::string(kMagic, kMagic + 8)) throw IoError("not a checkpoint file (bad magic)");
  if (r.u32() != kFormatVersion) throw IoError("unsupported checkpoint version");
  json h;
  try {
    h = json::parse(r.take(r.u64()));
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  const ModelConfig cfg = config_from_json(h.at("config"));
  Model model = Model::init(cfg);
  auto params = model.parameters();
  const auto names = model.params().names();
  const auto& shapes = h.at("params");
  require(shapes.size() == params.size(), "checkpoint parameter count does not match config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(shapes[i].at("name").get<std::string>() == names[i], "checkpoint parameter order mismatch at " + names[i]);
    require(shapes[i].at("shape").get<ng::Shape>() == params[i].shape(), "checkpoint shape mismatch for " + names[i]);
    r.f64s(params[i].mutable_data());
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint payload");
  if (header) {
    header->config = cfg;
    header->step = h.at("step").get<std::int64_t>();
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::int64_t step) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << serialize_checkpoint(model, step);
  if (!os) throw IoError("write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str(), header);
}

}  // namespace xicl::model
