#include "xicl/loop.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace xicl::loop {

using json = nlohmann::ordered_json;
namespace ngo = xicl::ng;
using corpus::CorpusManifest;
using corpus::Vocabulary;

static_assert(Vocabulary::kPad == model::kPad && Vocabulary::kBos == model::kBos && Vocabulary::kSep == model::kSep &&
              Vocabulary::kExSep == model::kExSep && Vocabulary::kEos == model::kEos);

std::string to_string(Source s) { return s == Source::Memory ? "memory" : "generated"; }
std::string to_string(Phase p) { return p == Phase::Warmup ? "warmup" : "rl"; }

Item make_item(const corpus::TaskInstance& inst, const Vocabulary& vocab) {
  Item it;
  it.x.push_back(Vocabulary::task_tag(inst.task));
  const auto xs = vocab.encode(inst.x);
  it.x.insert(it.x.end(), xs.begin(), xs.end());
  it.y = vocab.encode(inst.y);
  it.y.push_back(model::kEos);
  it.lang_id = inst.lang_id;
  it.task = inst.task;
  it.frame_id = inst.frame_id;
  return it;
}

// ---------------------------------------------------------------------------
// Memory bank

namespace {

std::vector<double> pooled(const Model& m, std::span<const int> x) {
  ngo::NoGradGuard guard;
  auto p = m.pooled_embedding(x);
  return {p.data().begin(), p.data().end()};
}

}  // namespace

std::string MemoryBank::key(const std::string& lang_id, Task task, std::uint64_t frame_id) {
  return lang_id + "/" + corpus::to_string(task) + "/" + std::to_string(frame_id);
}

std::uint64_t MemoryBank::add(BankEntry e, const Model& model, std::int64_t version) {
  require(capacity_ > 0, "memory bank has zero capacity");
  const auto k = key(e.lang_id, e.task, e.frame_id);
  if (auto it = index_.find(k); it != index_.end()) return entries_[it->second].id;
  e.id = next_id_++;
  auto emb = pooled(model, e.pair.x);
  std::size_t slot;
  if (entries_.size() < capacity_) {
    slot = entries_.size();
    entries_.push_back(std::move(e));
    embeddings_.push_back(std::move(emb));
    versions_.push_back(version);
  } else {
    slot = cursor_;
    cursor_ = (cursor_ + 1) % capacity_;
    const auto& old = entries_[slot];
    index_.erase(key(old.lang_id, old.task, old.frame_id));
    entries_[slot] = std::move(e);
    embeddings_[slot] = std::move(emb);
    versions_[slot] = version;
  }
  index_[k] = slot;
  return entries_[slot].id;
}

void MemoryBank::refresh(const Model& model, std::int64_t version) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    embeddings_[i] = pooled(model, entries_[i].pair.x);
    versions_[i] = version;
  }
}

std::optional<std::size_t> MemoryBank::find(const std::string& lang_id, Task task, std::uint64_t frame_id) const {
  auto it = index_.find(key(lang_id, task, frame_id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> MemoryBank::slots_for(Task task) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].task == task) out.push_back(i);
  return out;
}

Tensor MemoryBank::embedding_matrix(std::span<const std::size_t> slots) const {
  require(!slots.empty(), "embedding_matrix: no slots");
  const std::size_t d = embeddings_.at(slots[0]).size();
  std::vector<double> data;
  data.reserve(slots.size() * d);
  for (auto s : slots) data.insert(data.end(), embeddings_.at(s).begin(), embeddings_.at(s).end());
  return Tensor::constant({slots.size(), d}, std::move(data));
}

std::string MemoryBank::serialize() const {
  json j;
  j["capacity"] = capacity_;
  j["cursor"] = cursor_;
  j["next_id"] = next_id_;
  json es = json::array();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    es.push_back(json{{"id", e.id},
                      {"x", e.pair.x},
                      {"y", e.pair.y},
                      {"lang_id", e.lang_id},
                      {"task", corpus::to_string(e.task)},
                      {"frame_id", e.frame_id},
                      {"source", to_string(e.source)},
                      {"version", versions_[i]}});
  }
  j["entries"] = es;
  std::string out;
  const std::string head = j.dump();
  model::put_u64(out, head.size());
  out += head;
  model::put_u64(out, embeddings_.empty() ? 0 : embeddings_[0].size());
  for (const auto& e : embeddings_) model::put_f64s(out, e);
  return out;
}

MemoryBank MemoryBank::deserialize(const std::string& bytes) {
  model::ByteReader r(bytes);
  json j;
  try {
    j = json::parse(r.take(r.u64()));
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed memory bank: ") + e.what());
  }
  MemoryBank b(j.at("capacity").get<std::size_t>());
  b.cursor_ = j.at("cursor").get<std::size_t>();
  b.next_id_ = j.at("next_id").get<std::uint64_t>();
  const auto d = r.u64();
  for (const auto& ej : j.at("entries")) {
    BankEntry e;
    e.id = ej.at("id").get<std::uint64_t>();
    e.pair.x = ej.at("x").get<std::vector<int>>();
    e.pair.y = ej.at("y").get<std::vector<int>>();
    e.lang_id = ej.at("lang_id").get<std::string>();
    e.task = corpus::task_from_string(ej.at("task").get<std::string>());
    e.frame_id = ej.at("frame_id").get<std::uint64_t>();
    e.source = ej.at("source").get<std::string>() == "generated" ? Source::Generated : Source::Memory;
    b.index_[key(e.lang_id, e.task, e.frame_id)] = b.entries_.size();
    b.versions_.push_back(ej.at("version").get<std::int64_t>());
    b.entries_.push_back(std::move(e));
    std::vector<double> emb(d);
    r.f64s(emb);
    b.embeddings_.push_back(std::move(emb));
  }
  if (!r.done()) throw IoError("trailing bytes after memory bank");
  return b;
}

bool MemoryBank::operator==(const MemoryBank& o) const { return serialize() == o.serialize(); }

Source ContextSet::source() const {
  return std::find(sources.begin(), sources.end(), Source::Generated) != sources.end() ? Source::Generated
                                                                                        : Source::Memory;
}

// ---------------------------------------------------------------------------
// Selection

Selection sequential_select(const Tensor& scores, std::size_t k, double temperature, SelectMode mode, Rng* rng,
                            std::span<const std::uint64_t> tie_keys) {
  const std::size_t n = scores.size();
  require(k <= n, "select: k=" + std::to_string(k) + " exceeds the " + std::to_string(n) + " candidates");
  require(temperature > 0.0, "select: temperature must be positive");
  require(tie_keys.empty() || tie_keys.size() == n, "select: one tie key per candidate");
  Selection sel;
  sel.log_prob = Tensor::scalar(0.0);
  if (k == 0) return sel;

  const Tensor scaled = ngo::scale(scores, std::isinf(temperature) ? 0.0 : 1.0 / temperature);
  std::vector<std::size_t> ranked;
  if (mode == SelectMode::Argmax) {
    ranked.resize(n);
    std::iota(ranked.begin(), ranked.end(), 0);
    auto key = [&](std::size_t i) { return tie_keys.empty() ? static_cast<std::uint64_t>(i) : tie_keys[i]; };
    std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
      if (scores.at(a) != scores.at(b)) return scores.at(a) > scores.at(b);
      return key(a) < key(b);
    });
  } else {
    require(rng != nullptr, "select: sampling needs a random source");
  }

  std::vector<std::size_t> remaining(n);
  std::iota(remaining.begin(), remaining.end(), 0);
  std::vector<Tensor> terms;
  for (std::size_t step = 0; step < k; ++step) {
    const Tensor logp = ngo::log_softmax(ngo::gather(scaled, remaining), 0);
    std::size_t pos = 0;
    if (mode == SelectMode::Argmax) {
      pos = static_cast<std::size_t>(std::find(remaining.begin(), remaining.end(), ranked[step]) - remaining.begin());
    } else {
      double u = uniform01(*rng);
      pos = remaining.size() - 1;
      for (std::size_t i = 0; i < remaining.size(); ++i) {
        const double p = std::exp(logp.at(i));
        if (u < p) {
          pos = i;
          break;
        }
        u -= p;
      }
    }
    terms.push_back(ngo::index(logp, pos));
    sel.order.push_back(remaining[pos]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pos));
  }
  sel.log_prob = ngo::sum(ngo::stack(terms));
  return sel;
}

double sequential_log_prob(std::span<const double> scores, std::span<const std::size_t> order, double temperature) {
  const double inv = std::isinf(temperature) ? 0.0 : 1.0 / temperature;
  std::vector<bool> taken(scores.size(), false);
  double lp = 0.0;
  for (auto o : order) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!taken[i]) mx = std::max(mx, scores[i] * inv);
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!taken[i]) z += std::exp(scores[i] * inv - mx);
    lp += scores[o] * inv - mx - std::log(z);
    taken[o] = true;
  }
  return lp;
}

ContextSet select_context(const Model& m, std::span<const int> x, const MemoryBank& bank, std::size_t k,
                          double temperature, SelectMode mode, Rng& rng, const SelectFilter& filter) {
  ContextSet ctx;
  ctx.selection_log_prob = Tensor::scalar(0.0);
  if (k == 0) return ctx;
  require(!bank.empty(), "select_context: memory bank is empty");
  std::vector<std::size_t> cands;
  std::vector<std::uint64_t> ids;
  for (std::size_t s = 0; s < bank.size(); ++s) {
    const auto& e = bank.entry(s);
    if (filter.task && e.task != *filter.task) continue;
    if (std::find(filter.exclude_ids.begin(), filter.exclude_ids.end(), e.id) != filter.exclude_ids.end()) continue;
    cands.push_back(s);
    ids.push_back(e.id);
  }
  require(k <= cands.size(), "select_context: k=" + std::to_string(k) + " exceeds the " +
                                 std::to_string(cands.size()) + " eligible bank entries");
  const Tensor scores = ngo::cosine_scores(m.pooled_embedding(x), bank.embedding_matrix(cands));
  auto sel = sequential_select(scores, k, temperature, mode, &rng, ids);
  for (auto pos : sel.order) {
    const auto& e = bank.entry(cands[pos]);
    ctx.examples.push_back(e.pair);
    ctx.ids.push_back(e.id);
    ctx.slots.push_back(cands[pos]);
    ctx.sources.push_back(e.source);
  }
  ctx.selection_log_prob = sel.log_prob;
  return ctx;
}

// ---------------------------------------------------------------------------
// Self-generated pairs and inference

namespace {

std::uint64_t random_frame_id(Rng& rng, Task task) {
  const auto n = corpus::single_clause_inventory();
  if (task == Task::Summarize) return n + uniform_index(rng, n) * n + uniform_index(rng, n);
  return uniform_index(rng, n);
}

}  // namespace

std::vector<BankEntry> generate_pairs(const Model& m, const CorpusManifest& manifest, const Vocabulary& vocab,
                                      const std::string& lang_id, Task task, std::size_t n, std::uint64_t seed,
                                      const model::DecodeOptions& opts) {
  std::vector<BankEntry> out;
  if (n == 0) return out;
  const auto& lang = manifest.language(lang_id);
  std::unordered_set<std::uint64_t> held_out;
  if (auto it = manifest.splits.find({lang_id, task}); it != manifest.splits.end()) {
    for (auto i : it->second.dev) held_out.insert(manifest.instances[i].frame_id);
    for (auto i : it->second.test) held_out.insert(manifest.instances[i].frame_id);
  }
  Rng rng(seed);
  ngo::NoGradGuard guard;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t fid;
    do {
      fid = random_frame_id(rng, task);
    } while (held_out.count(fid));
    const Item item = make_item(corpus::make_task_instance(fid, task, lang), vocab);
    const auto prompt = model::assemble_prompt({}, item.x, m.config().ctx_len);
    model::DecodeOptions o = opts;
    o.seed = mix_seed(seed, i);
    const auto pred = m.generate(prompt, kMaxAnswerLength, o);
    if (pred.size() + 1 == item.y.size() && std::equal(pred.begin(), pred.end(), item.y.begin())) {
      BankEntry e;
      e.pair = {item.x, item.y};
      e.lang_id = lang_id;
      e.task = task;
      e.frame_id = fid;
      e.source = Source::Generated;
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::vector<int> infer(const Model& m, const MemoryBank& bank, std::span<const int> x, std::size_t k,
                       std::optional<Task> task, std::size_t max_len) {
  ngo::NoGradGuard guard;
  std::size_t eligible = 0;
  for (const auto& e : bank.entries()) eligible += !task || e.task == *task;
  if (eligible == 0 && k > 0) {
    std::cerr << "warning: memory bank has no eligible entries, decoding zero-shot\n";
    k = 0;
  }
  Rng unused(0);
  const auto ctx = select_context(m, x, bank, std::min(k, eligible), 1.0, SelectMode::Argmax, unused, {task, {}});
  return decode_with(m, ctx.examples, x, max_len);
}

std::size_t fitting_demos(std::span<const ExamplePair> context, std::span<const int> x, std::size_t ctx_len,
                          std::size_t answer_budget) {
  std::size_t used = 2 + x.size() + answer_budget;  // BOS, SEP
  std::size_t n = 0;
  for (const auto& ex : context) {
    used += ex.x.size() + ex.y.size() + 2;
    if (used > ctx_len) break;
    ++n;
  }
  return n;
}

std::vector<int> decode_with(const Model& m, std::span<const ExamplePair> context, std::span<const int> x,
                             std::size_t max_len) {
  ngo::NoGradGuard guard;
  const std::size_t ctx_len = m.config().ctx_len;
  // keep room for at least a short answer; an oversized query still errors
  const std::size_t n = fitting_demos(context, x, ctx_len, std::min<std::size_t>(max_len, 8));
  const auto prompt = model::assemble_prompt(context.first(n), x, ctx_len);
  const std::size_t room = ctx_len - prompt.tokens.size() + 1;
  return m.generate(prompt, std::min(max_len, room));
}

// ---------------------------------------------------------------------------
// Training state

void LoopConfig::validate() const {
  require(temperature > 0.0, "loop.temperature must be positive");
  require(batch > 0, "loop.batch must be positive");
  require(lr > 0.0, "loop.lr must be positive");
  require(bank_capacity > 0, "loop.bank_capacity must be positive");
  require(baseline_decay >= 0.0 && baseline_decay <= 1.0, "loop.baseline_decay must lie in [0, 1]");
}

Phase TrainState::phase(const LoopConfig& cfg) const {
  return static_cast<std::size_t>(step) < cfg.warmup_steps ? Phase::Warmup : Phase::Rl;
}

TrainState TrainState::clone() const {
  TrainState s;
  s.step = step;
  s.model = Model(model.config(), model.params().clone());
  s.optimizer = ng::Adam(s.model.parameters());
  s.optimizer.first_moments() = optimizer.first_moments();
  s.optimizer.second_moments() = optimizer.second_moments();
  s.optimizer.set_steps(optimizer.steps());
  s.baseline = baseline;
  s.baseline_set = baseline_set;
  s.rng = rng;
  s.bank = bank;
  return s;
}

namespace {
constexpr char kStateMagic[8] = {'X', 'I', 'C', 'L', 'S', 'T', 'A', 'T'};
constexpr std::uint32_t kStateVersion = 1;

void put_blob(std::string& out, const std::string& blob) {
  model::put_u64(out, blob.size());
  out += blob;
}
}  // namespace

std::string TrainState::serialize() const {
  std::ostringstream rs;
  rs << rng;
  json h{{"step", step},
         {"baseline", baseline},
         {"baseline_set", baseline_set},
         {"adam_steps", optimizer.steps()},
         {"rng", rs.str()}};
  std::string out(kStateMagic, kStateMagic + 8);
  model::put_u32(out, kStateVersion);
  put_blob(out, h.dump());
  // baseline is also stored bit-exact; the JSON copy is for humans
  model::put_f64s(out, std::span<const double>(&baseline, 1));
  put_blob(out, model::serialize_checkpoint(model, step));
  for (const auto& m : optimizer.first_moments()) model::put_f64s(out, m);
  for (const auto& v : optimizer.second_moments()) model::put_f64s(out, v);
  put_blob(out, bank.serialize());
  return out;
}

TrainState TrainState::deserialize(const std::string& bytes) {
  model::ByteReader r(bytes);
  if (r.take(8) != std::string(kStateMagic, kStateMagic + 8)) throw IoError("not a train state file (bad magic)");
  if (r.u32() != kStateVersion) throw IoError("unsupported train state version");
  json h;
  try {
    h = json::parse(r.take(r.u64()));
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed train state header: ") + e.what());
  }
  TrainState s;
  s.step = h.at("step").get<std::int64_t>();
  r.f64s(std::span<double>(&s.baseline, 1));
  s.baseline_set = h.at("baseline_set").get<bool>();
  std::istringstream rs(h.at("rng").get<std::string>());
  rs >> s.rng;
  if (!rs) throw IoError("malformed generator state");
  s.model = model::deserialize_checkpoint(r.take(r.u64()));
  s.optimizer = ng::Adam(s.model.parameters());
  for (auto& m : s.optimizer.first_moments()) r.f64s(m);
  for (auto& v : s.optimizer.second_moments()) r.f64s(v);
  s.optimizer.set_steps(h.at("adam_steps").get<std::int64_t>());
  s.bank = MemoryBank::deserialize(r.take(r.u64()));
  if (!r.done()) throw IoError("trailing bytes after train state");
  return s;
}

TrainState make_train_state(const Model& m, const CorpusManifest& manifest, const LoopConfig& cfg,
                            std::uint64_t seed) {
  TrainState s;
  s.model = Model(m.config(), m.params().clone());
  s.optimizer = ng::Adam(s.model.parameters());
  s.rng = Rng(mix_seed(seed, 0x7121));
  s.bank = MemoryBank(cfg.bank_capacity);
  const auto vocab = manifest.vocabulary();
  for (const auto& lang : manifest.languages) {
    for (auto task : corpus::kAllTasks) {
      for (auto idx : manifest.splits.at({lang.lang_id, task}).train) {
        const Item it = make_item(manifest.instances[idx], vocab);
        BankEntry e;
        e.pair = {it.x, it.y};
        e.lang_id = it.lang_id;
        e.task = it.task;
        e.frame_id = it.frame_id;
        s.bank.add(std::move(e), s.model, 0);
      }
    }
  }
  return s;
}

void save_train_state(const std::filesystem::path& path, const TrainState& s) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << s.serialize();
  if (!os) throw IoError("write failed for " + path.string());
}

TrainState load_train_state(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return TrainState::deserialize(ss.str());
}

// ---------------------------------------------------------------------------
// Steps

std::string to_json_line(const StepRecord& r) {
  json j{{"step", r.step},
         {"phase", to_string(r.phase)},
         {"nll", r.loss.nll},
         {"align", r.loss.align},
         {"coherence", r.loss.coherence},
         {"rl", r.loss.rl},
         {"total", r.loss.total},
         {"reward_mean", r.reward_mean},
         {"bank_size", r.bank_size}};
  return j.dump();
}

namespace {

std::string dump_batch(std::span<const Item> batch, std::int64_t step) {
  std::ostringstream os;
  os << "non-finite loss at step " << step << "; batch:";
  for (const auto& it : batch) {
    os << "\n  " << it.lang_id << " " << corpus::to_string(it.task) << " frame " << it.frame_id << " x=[";
    for (int t : it.x) os << ' ' << t;
    os << " ] y=[";
    for (int t : it.y) os << ' ' << t;
    os << " ]";
  }
  return os.str();
}

}  // namespace

StepRecord train_step(TrainState& state, std::span<const Item> batch, const LoopConfig& cfg,
                      const objectives::ObjectiveConfig& obj) {
  require(!batch.empty(), "train_step: empty batch");
  StepRecord rec;
  rec.step = state.step;
  rec.phase = state.phase(cfg);
  rec.loss.lambda = obj.lambda;
  rec.loss.gamma = obj.gamma;
  rec.loss.align_weight = obj.align_weight;
  rec.loss.nll_weight = obj.nll_weight;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const bool rl_active = rec.phase == Phase::Rl && obj.gamma > 0.0;
  std::size_t rewards = 0;

  try {
    if (cfg.refresh_every > 0 && state.step % static_cast<std::int64_t>(cfg.refresh_every) == 0)
      state.bank.refresh(state.model, state.step);
    state.optimizer.zero_grad();
    const Model& m = state.model;
    for (const auto& item : batch) {
      SelectFilter filter{item.task, {}};
      if (auto own = state.bank.find(item.lang_id, item.task, item.frame_id))
        filter.exclude_ids.push_back(state.bank.entry(*own).id);
      const auto ctx = select_context(m, item.x, state.bank, cfg.k, cfg.temperature, SelectMode::Sample, state.rng,
                                      filter);

      Tensor nll = Tensor::scalar(0.0), align = Tensor::scalar(0.0);
      if (obj.nll_weight > 0.0 || obj.align_weight > 0.0) {
        const auto prompt = model::assemble_prompt(ctx.examples, item.x, m.config().ctx_len);
        const Tensor logits = m.answer_logits(prompt, item.y);
        if (obj.nll_weight > 0.0) nll = objectives::answer_nll(logits, item.y);
        if (obj.align_weight > 0.0 && ctx.k() > 0)
          align = objectives::align_from_logits(logits, objectives::reference_logits(m, item.x, item.y),
                                                obj.kl_direction);
      }
      Tensor coh = obj.lambda > 0.0 ? objectives::coherence_loss(m, item.x, item.y) : Tensor::scalar(0.0);
      Tensor rl = Tensor::scalar(0.0);
      if (rl_active) {
        std::vector<std::vector<double>> embs;
        for (auto s : ctx.slots) embs.push_back(state.bank.embedding(s));
        const auto r = objectives::reward(m, item.x, ctx.examples, item.y, obj.alpha, obj.beta, obj.accuracy_mode,
                                          embs);
        if (!state.baseline_set) {
          state.baseline = r.reward;
          state.baseline_set = true;
        }
        rl = objectives::reinforce_loss(ctx.selection_log_prob, r.reward, state.baseline);
        state.baseline = cfg.baseline_decay * state.baseline + (1.0 - cfg.baseline_decay) * r.reward;
        rec.reward_mean += r.reward;
        ++rewards;
      }
      const auto tl = objectives::total_loss(nll, align, coh, rl, obj);
      if (!std::isfinite(tl.breakdown.total)) throw NumericError("total loss is not finite");
      if (tl.value.requires_grad()) ngo::backward(ngo::scale(tl.value, inv_b));
      rec.loss.nll += tl.breakdown.nll * inv_b;
      rec.loss.align += tl.breakdown.align * inv_b;
      rec.loss.coherence += tl.breakdown.coherence * inv_b;
      rec.loss.rl += tl.breakdown.rl * inv_b;
      rec.loss.total += tl.breakdown.total * inv_b;
    }
    state.optimizer.step(ngo::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  } catch (const NonFiniteLoss&) {
    throw;
  } catch (const NumericError& e) {
    throw NonFiniteLoss(dump_batch(batch, state.step) + "\ncause: " + e.what());
  }
  if (rewards > 0) rec.reward_mean /= static_cast<double>(rewards);
  ++state.step;
  rec.bank_size = state.bank.size();
  return rec;
}

std::vector<Item> training_pool(const CorpusManifest& manifest, const Vocabulary& vocab) {
  std::vector<Item> pool;
  for (const auto& lang : manifest.languages)
    for (auto task : corpus::kAllTasks) {
      if (!corpus::is_trained_task(task)) continue;
      for (auto idx : manifest.splits.at({lang.lang_id, task}).train)
        pool.push_back(make_item(manifest.instances[idx], vocab));
    }
  return pool;
}

std::vector<double> pretrain(Model& m, const CorpusManifest& manifest, const PretrainConfig& cfg,
                             std::uint64_t seed) {
  const auto vocab = manifest.vocabulary();
  const auto pool = training_pool(manifest, vocab);
  std::vector<double> losses;
  if (cfg.steps == 0) return losses;
  require(!pool.empty(), "pretrain: no training items");
  require(cfg.batch > 0, "pretrain.batch must be positive");

  std::map<std::pair<std::string, Task>, std::vector<std::size_t>> by_lang;
  std::map<Task, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    by_lang[{pool[i].lang_id, pool[i].task}].push_back(i);
    by_task[pool[i].task].push_back(i);
  }
  ng::Adam opt(m.parameters());
  Rng rng(mix_seed(seed, 0x9e7));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t qi = uniform_index(rng, pool.size());
      const Item& q = pool[qi];
      const std::size_t k = uniform_index(rng, cfg.k + 1);
      std::vector<std::size_t> chosen{qi};
      std::vector<ExamplePair> ctx;
      for (std::size_t j = 0; j < k; ++j) {
        const auto& group =
            uniform01(rng) < cfg.same_language ? by_lang.at({q.lang_id, q.task}) : by_task.at(q.task);
        if (group.size() <= chosen.size()) break;
        std::size_t pick;
        do {
          pick = group[uniform_index(rng, group.size())];
        } while (std::find(chosen.begin(), chosen.end(), pick) != chosen.end());
        chosen.push_back(pick);
        ctx.push_back({pool[pick].x, pool[pick].y});
      }
      const auto prompt = model::assemble_prompt(ctx, q.x, m.config().ctx_len);
      const double w = -1.0 / (static_cast<double>(q.y.size()) * static_cast<double>(cfg.batch));
      auto loss = ngo::scale(m.sequence_log_prob(prompt, q.y), w);
      ngo::backward(loss);
      total += loss.item();
    }
    const double warm = std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(std::max<std::size_t>(cfg.lr_warmup, 1)));
    const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps);
    const double decay = cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress));
    opt.step(ngo::AdamConfig{cfg.lr * warm * decay, 0.9, 0.999, 1e-8});
    losses.push_back(total);
  }
  return losses;
}

std::vector<StepRecord> run_training(TrainState& state, const CorpusManifest& manifest, const LoopConfig& cfg,
                                     const objectives::ObjectiveConfig& obj, const RunOptions& opts) {
  cfg.validate();
  obj.validate();
  const auto vocab = manifest.vocabulary();
  const auto pool = training_pool(manifest, vocab);
  require(!pool.empty(), "run_training: no training items");

  std::ofstream metrics;
  auto checkpoint = [&](const std::string& stem) {
    if (!opts.output_dir) return;
    model::save_checkpoint(*opts.output_dir / (stem + ".ckpt"), state.model, state.step);
    save_train_state(*opts.output_dir / (stem + ".state"), state);
  };
  auto numbered = [](std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "checkpoint_%06lld", static_cast<long long>(step));
    return std::string(buf);
  };
  if (opts.output_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*opts.output_dir, ec);
    if (ec) throw IoError("cannot create " + opts.output_dir->string() + ": " + ec.message());
    const auto path = *opts.output_dir / "metrics.jsonl";
    metrics.open(path, state.step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot open " + path.string());
    if (state.step == 0) checkpoint(numbered(0));
  }

  std::vector<StepRecord> records;
  std::vector<std::string> langs;
  for (const auto& l : manifest.languages) langs.push_back(l.lang_id);
  while (static_cast<std::size_t>(state.step) < cfg.total_steps) {
    if (cfg.generate_every > 0 && cfg.generate_count > 0 && state.phase(cfg) == Phase::Rl &&
        state.step % static_cast<std::int64_t>(cfg.generate_every) == 0) {
      for (std::size_t g = 0; g < cfg.generate_count; ++g) {
        const auto& lang = langs[uniform_index(state.rng, langs.size())];
        const Task task = uniform_index(state.rng, 2) == 0 ? Task::Classify : Task::Translate;
        for (auto& e : generate_pairs(state.model, manifest, vocab, lang, task, 1, state.rng()))
          state.bank.add(std::move(e), state.model, state.step);
      }
    }
    std::vector<Item> batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(pool[uniform_index(state.rng, pool.size())]);
    auto rec = train_step(state, batch, cfg, obj);
    if (metrics.is_open()) metrics << to_json_line(rec) << '\n';
    if (opts.on_step) opts.on_step(rec);
    records.push_back(rec);
    if (cfg.checkpoint_every > 0 && state.step % static_cast<std::int64_t>(cfg.checkpoint_every) == 0)
      checkpoint(numbered(state.step));
  }
  if (metrics.is_open()) {
    metrics.flush();
    if (!metrics) throw IoError("failed writing metrics log");
  }
  checkpoint("final");
  return records;
}

}  // namespace xicl::loop
