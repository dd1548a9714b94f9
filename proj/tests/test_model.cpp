#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "xicl/model.hpp"

using namespace xicl;
using namespace xicl::model;

namespace {

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n, int lo, int hi) {
  std::uniform_int_distribution<int> dist(lo, hi - 1);
  std::vector<int> v(n);
  for (auto& t : v) t = dist(rng);
  return v;
}

// Plain-loop forward pass used as an oracle. Shares nothing with numgrad.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const ng::Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Mat ln(const Mat& x, const ng::Tensor& g, const ng::Tensor& b) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mu = 0, var = 0;
    for (double v : x[r]) mu += v / n;
    for (double v : x[r]) var += (v - mu) * (v - mu) / n;
    for (std::size_t c = 0; c < x[r].size(); ++c) out[r][c] = (x[r][c] - mu) / std::sqrt(var + 1e-5) * g.at(c) + b.at(c);
  }
  return out;
}

Mat oracle_logits(const Model& m, const std::vector<int>& tokens) {
  const auto& p = m.params();
  const std::size_t T = tokens.size(), d = m.config().d_model, H = m.config().n_heads, dh = d / H;
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < d; ++c) x[t][c] = p.tok_emb.at(tokens[t], c) + p.pos_emb.at(t, c);
  for (const auto& l : p.layers) {
    Mat qkv = mm(ln(x, l.ln1_gain, l.ln1_bias), to_mat(l.w_qkv));
    Mat att(T, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
          s.push_back(dot / std::sqrt(static_cast<double>(dh)));
        }
        double mx = *std::max_element(s.begin(), s.end()), z = 0;
        for (double& v : s) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t c = 0; c < dh; ++c) att[i][h * dh + c] += s[j] / z * qkv[j][2 * d + h * dh + c];
      }
    }
    Mat proj = mm(att, to_mat(l.w_attn_out));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) x[t][c] += proj[t][c];
    Mat f = mm(ln(x, l.ln2_gain, l.ln2_bias), to_mat(l.w_fc1));
    for (auto& row : f)
      for (std::size_t c = 0; c < row.size(); ++c) {
        const double v = row[c] + l.b_fc1.at(c);
        row[c] = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
      }
    Mat g = mm(f, to_mat(l.w_fc2));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) x[t][c] += g[t][c] + l.b_fc2.at(c);
  }
  return mm(ln(x, p.lnf_gain, p.lnf_bias), to_mat(p.w_out));
}

}  // namespace

TEST_CASE("zero output projection gives uniform next-token distributions") {
  auto cfg = tiny_config(3);
  cfg.zero_output_projection = true;
  auto m = Model::init(cfg);
  std::mt19937_64 rng(1);
  auto toks = random_tokens(rng, 10, 1, 32);
  auto p = ng::softmax(m.forward_logits(toks), 1);
  for (double v : p.data()) CHECK(std::abs(v - 1.0 / 32) < 1e-15);

  // uniform model: log p(y) = |y| ln(1/32)
  auto prompt = assemble_prompt({}, std::vector<int>{7, 8}, cfg.ctx_len);
  const std::vector<int> y{9, 10, 4};
  CHECK(std::abs(m.sequence_log_prob(prompt, y).item() - 3 * std::log(1.0 / 32)) < 1e-12);
}

TEST_CASE("forward is causal at every position") {
  auto m = Model::init(tiny_config(5));
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto toks = random_tokens(rng, 12, 1, 32);
    auto base = m.forward_logits(toks);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      auto pert = toks;
      pert[t] = pert[t] == 31 ? 5 : pert[t] + 1;
      auto out = m.forward_logits(pert);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < 32; ++c) REQUIRE(out.at(r, c) == base.at(r, c));
      bool changed = false;
      for (std::size_t c = 0; c < 32; ++c) changed = changed || out.at(t, c) != base.at(t, c);
      CHECK(changed);
    }
  }
}

TEST_CASE("forward matches a straight-line oracle") {
  auto m = Model::init(tiny_config(11));
  const std::vector<int> toks{1, 9, 17, 2, 30, 4, 12};
  auto got = m.forward_logits(toks);
  auto want = oracle_logits(m, toks);
  for (std::size_t r = 0; r < toks.size(); ++r)
    for (std::size_t c = 0; c < 32; ++c) CHECK(std::abs(got.at(r, c) - want[r][c]) < 1e-12);

  const std::vector<std::size_t> rows{6, 2};
  auto sel = m.logits_at(toks, rows);
  for (std::size_t c = 0; c < 32; ++c) CHECK(std::abs(sel.at(1, c) - got.at(2, c)) < 1e-12);
}

TEST_CASE("sequence_log_prob matches per-token log-softmax picks") {
  auto m = Model::init(tiny_config(4));
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ExamplePair> ctx{{random_tokens(rng, 3, 5, 32), random_tokens(rng, 2, 5, 32)}};
    auto x = random_tokens(rng, 4, 5, 32);
    auto y = random_tokens(rng, 1 + trial % 4, 5, 32);
    auto prompt = assemble_prompt(ctx, x, 64);

    std::vector<int> full = prompt.tokens;
    full.insert(full.end(), y.begin(), y.end());
    auto logits = oracle_logits(m, full);
    double want = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
      const auto& row = logits[prompt.answer_start - 1 + t];
      double mx = *std::max_element(row.begin(), row.end()), z = 0;
      for (double v : row) z += std::exp(v - mx);
      want += row[y[t]] - mx - std::log(z);
    }
    const double got = m.sequence_log_prob(prompt, y).item();
    CHECK(std::abs(got - want) < 1e-10);
    CHECK(got <= 0.0);

    auto longer = y;
    longer.push_back(7);
    CHECK(m.sequence_log_prob(prompt, longer).item() <= got);
  }
  auto prompt = assemble_prompt({}, std::vector<int>{6}, 64);
  CHECK_THROWS_AS(m.sequence_log_prob(prompt, std::vector<int>{}), ContractError);
}

TEST_CASE("single-token continuations sum to one") {
  auto m = Model::init(tiny_config(8));
  auto prompt = assemble_prompt(std::vector<ExamplePair>{{{6, 7}, {8}}}, std::vector<int>{9, 10}, 64);
  double total = 0.0;
  for (int v = 0; v < 32; ++v) total += std::exp(m.sequence_log_prob(prompt, std::vector<int>{v}).item());
  CHECK(std::abs(total - 1.0) < 1e-9);
}

TEST_CASE("pooled embedding") {
  auto m = Model::init(tiny_config(6));
  const std::vector<int> one{13};
  auto h = m.hidden_states(one);
  auto pooled = m.pooled_embedding(one);
  for (std::size_t c = 0; c < 8; ++c) CHECK(pooled.at(c) == h.at(0, c));

  const std::vector<int> seq{9, 14, 22, 5};
  auto base = m.pooled_embedding(seq);
  auto padded = seq;
  padded.insert(padded.end(), {kPad, kPad, kPad});
  auto p2 = m.pooled_embedding(padded);
  for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(p2.at(c) - base.at(c)) < 1e-12);

  auto hs = m.hidden_states(seq);
  for (std::size_t c = 0; c < 8; ++c) {
    double s = 0;
    for (std::size_t t = 0; t < seq.size(); ++t) s += hs.at(t, c);
    CHECK(std::abs(base.at(c) - s / 4) < 1e-12);
  }
  CHECK_THROWS_AS(m.pooled_embedding(std::vector<int>{kPad, kPad}), ContractError);
}

TEST_CASE("prompt layout") {
  auto p0 = assemble_prompt({}, std::vector<int>{10, 11}, 16);
  CHECK(p0.tokens == std::vector<int>{kBos, 10, 11, kSep});
  CHECK(p0.query_begin == 1);
  CHECK(p0.query_end == 3);
  CHECK(p0.answer_start == 4);

  // a b SEP c EXSEP d SEP with a=20, b=21, c=22, d=23
  std::vector<ExamplePair> ctx{{{20, 21}, {22}}};
  auto p1 = assemble_prompt(ctx, std::vector<int>{23}, 16);
  CHECK(p1.tokens == std::vector<int>{kBos, 20, 21, kSep, 22, kExSep, 23, kSep});
  CHECK(p1.tokens[p1.answer_start - 1] == kSep);

  try {
    assemble_prompt(ctx, std::vector<int>{23}, 7);
    FAIL("expected overflow");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("needs 8") != std::string::npos);
    CHECK(std::string(e.what()).find("holds 7") != std::string::npos);
  }
}

TEST_CASE("prompt round trip through the layout parser") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> len(0, 5), kdist(0, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<ExamplePair> ctx(static_cast<std::size_t>(kdist(rng)));
    for (auto& ex : ctx) {
      ex.x = random_tokens(rng, static_cast<std::size_t>(1 + len(rng)), 5, 60);
      ex.y = random_tokens(rng, static_cast<std::size_t>(1 + len(rng)), 5, 60);
    }
    auto x = random_tokens(rng, static_cast<std::size_t>(1 + len(rng)), 5, 60);
    auto p = assemble_prompt(ctx, x, 256);
    auto parsed = parse_prompt(p.tokens);
    REQUIRE(parsed.context == ctx);
    REQUIRE(parsed.x == x);
    REQUIRE(std::vector<int>(p.tokens.begin() + p.query_begin, p.tokens.begin() + p.query_end) == x);
  }
}

TEST_CASE("generate") {
  auto m = Model::init(tiny_config(9));
  auto prompt = assemble_prompt(std::vector<ExamplePair>{{{6, 7}, {8}}}, std::vector<int>{9}, 64);
  CHECK(m.generate(prompt, 0).empty());

  auto out = m.generate(prompt, 6);
  CHECK(out.size() <= 6);
  // greedy: each emitted token is the argmax of the logits at that step
  auto toks = prompt.tokens;
  for (std::size_t i = 0; i <= out.size() && i < 6; ++i) {
    auto logits = m.forward_logits(toks);
    const std::size_t last = toks.size() - 1;
    int best = 0;
    for (int v = 1; v < 32; ++v)
      if (logits.at(last, v) > logits.at(last, best)) best = v;
    if (i == out.size()) {
      CHECK(best == kEos);
      break;
    }
    CHECK(out[i] == best);
    toks.push_back(best);
  }

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = assemble_prompt({}, random_tokens(rng, 3, 5, 32), 64);
    auto greedy = m.generate(p, 5);
    auto cold = m.generate(p, 5, {DecodeMode::Sample, 1e-4, static_cast<std::uint64_t>(trial)});
    CHECK(greedy == cold);
    auto s1 = m.generate(p, 5, {DecodeMode::Sample, 1.0, 42});
    auto s2 = m.generate(p, 5, {DecodeMode::Sample, 1.0, 42});
    CHECK(s1 == s2);
  }
}

TEST_CASE("initialization is a pure function of the config") {
  auto a = Model::init(tiny_config(12));
  auto b = Model::init(tiny_config(12));
  auto c = Model::init(tiny_config(13));
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
    differs = differs || !std::equal(pa[i].data().begin(), pa[i].data().end(), pc[i].data().begin());
  }
  CHECK(differs);

  auto def = Model::init(ModelConfig{});
  double sq = 0;
  for (double v : def.params().tok_emb.data()) sq += v * v;
  const double sd = std::sqrt(sq / static_cast<double>(def.params().tok_emb.size()));
  CHECK(std::abs(sd - 0.02) < 0.001);

  ModelConfig bad;
  bad.n_heads = 3;
  CHECK_THROWS_AS(Model::init(bad), ContractError);
}

TEST_CASE("overflowing the context is a contract error") {
  auto m = Model::init(tiny_config(1));
  std::vector<int> toks(65, 6);
  CHECK_THROWS_AS(m.forward_logits(toks), ContractError);
}

TEST_CASE("sequence_log_prob gradient passes finite differences") {
  auto m = Model::init(tiny_config(2));
  auto params = m.parameters();
  auto prompt = assemble_prompt(std::vector<ExamplePair>{{{6, 7, 8}, {9}}, {{10, 11}, {12}}}, std::vector<int>{13, 14}, 64);
  const std::vector<int> y{15, 16, 4};
  auto rep = ng::finite_diff_check("sequence_log_prob", [&] { return m.sequence_log_prob(prompt, y); }, params, 128,
                                   1e-5, 1e-4, 3);
  INFO("max_rel_error=" << rep.max_rel_error);
  CHECK(rep.passed);
}

TEST_CASE("checkpoint round trip") {
  auto m = Model::init(tiny_config(21));
  const auto bytes = serialize_checkpoint(m, 17);
  CheckpointHeader h;
  auto back = deserialize_checkpoint(bytes, &h);
  CHECK(h.step == 17);
  CHECK(h.config == m.config());
  CHECK(serialize_checkpoint(back, 17) == bytes);

  const auto dir = std::filesystem::temp_directory_path() / "xicl_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", m, 3);
  auto loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(serialize_checkpoint(loaded, 17) == bytes);
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), IoError);
  CHECK_THROWS_AS(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), IoError);
  // header advertising a different shape
  auto tampered = bytes;
  const auto pos = tampered.find("[32,8]");
  REQUIRE(pos != std::string::npos);
  tampered.replace(pos, 6, "[8,32]");
  CHECK_THROWS_AS(deserialize_checkpoint(tampered), ContractError);
}
