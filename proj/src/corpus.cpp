#include "xicl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

#include "xicl/rng.hpp"

namespace xicl::corpus {

using json = nlohmann::ordered_json;

namespace {

constexpr const char* kSchema = "xicl-corpus/1";

const std::vector<std::string> kNouns{"cat",   "dog",     "bird",  "fish",  "horse", "child",
                                      "farmer", "teacher", "river", "house", "tree",  "stone"};
const std::vector<std::string> kNames{"NAME_0", "NAME_1", "NAME_2", "NAME_3", "NAME_4", "NAME_5"};
const std::vector<std::string> kVerbs{"sees", "likes", "helps", "finds", "follows", "carries", "hears", "builds"};
const std::vector<std::string> kKeywords{"gladly", "kindly",  "warmly",  "angrily", "sadly",
                                         "coldly", "slowly",  "often",   "quietly"};
const std::vector<std::string> kLabels{"positive", "negative", "neutral"};
const std::string kConj = "and";

std::vector<std::string> entities() {
  std::vector<std::string> e = kNouns;
  e.insert(e.end(), kNames.begin(), kNames.end());
  return e;
}

std::string join(const std::vector<std::string>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

std::vector<std::string> suffix_pool(Rng& rng, std::size_t needed) {
  const std::string consonants = "kmtnprsldgbhwyz";
  const std::string vowels = "aeiou";
  std::vector<std::string> one, two;
  for (char c : consonants)
    for (char v : vowels) one.push_back(std::string("-") + c + v);
  shuffle(one, rng);
  if (needed > one.size()) {
    for (const auto& a : one)
      for (const auto& b : one) two.push_back(a + b.substr(1));
    shuffle(two, rng);
    one.insert(one.end(), two.begin(), two.end());
  }
  require(needed <= one.size(), "make_languages: particle inventory exhausted");
  return one;
}

}  // namespace

// ---------------------------------------------------------------------------
// Enum names

std::string to_string(Family f) {
  switch (f) {
    case Family::F1: return "F1";
    case Family::F2: return "F2";
    case Family::F3: return "F3";
    case Family::F4: return "F4";
    case Family::Pivot: return "pivot";
  }
  return "?";
}

std::string to_string(Tier t) { return t == Tier::High ? "high" : "low"; }

std::string to_string(Task t) {
  switch (t) {
    case Task::Classify: return "classify";
    case Task::Translate: return "translate";
    case Task::Summarize: return "summarize";
    case Task::Ner: return "ner";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  for (auto f : {Family::F1, Family::F2, Family::F3, Family::F4, Family::Pivot})
    if (to_string(f) == s) return f;
  throw ContractError("unknown family '" + s + "'");
}

Tier tier_from_string(const std::string& s) {
  if (s == "high") return Tier::High;
  if (s == "low") return Tier::Low;
  throw ContractError("unknown tier '" + s + "'");
}

Task task_from_string(const std::string& s) {
  for (auto t : kAllTasks)
    if (to_string(t) == s) return t;
  throw ContractError("unknown task '" + s + "'");
}

std::string to_string(const WordOrder& order) {
  std::string s;
  for (auto r : order) s += r == Role::S ? 'S' : r == Role::V ? 'V' : 'O';
  return s;
}

WordOrder word_order_from_string(const std::string& s) {
  require(s.size() == 3, "word order must have three roles: '" + s + "'");
  WordOrder w{};
  std::set<char> seen;
  for (std::size_t i = 0; i < 3; ++i) {
    const char c = s[i];
    require(c == 'S' || c == 'V' || c == 'O', "bad role in word order '" + s + "'");
    require(seen.insert(c).second, "word order repeats a role: '" + s + "'");
    w[i] = c == 'S' ? Role::S : c == 'V' ? Role::V : Role::O;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Lexicon

const std::vector<std::string>& Lexicon::nouns() { return kNouns; }
const std::vector<std::string>& Lexicon::names() { return kNames; }
const std::vector<std::string>& Lexicon::verbs() { return kVerbs; }
const std::vector<std::string>& Lexicon::keywords() { return kKeywords; }
const std::vector<std::string>& Lexicon::labels() { return kLabels; }
const std::string& Lexicon::conjunction() { return kConj; }

std::vector<std::vector<std::string>> Lexicon::categories() {
  return {kNouns, kNames, kVerbs, kKeywords, kLabels, {kConj}};
}

std::vector<std::string> Lexicon::all_lemmas() {
  std::vector<std::string> out;
  for (const auto& c : categories()) out.insert(out.end(), c.begin(), c.end());
  return out;
}

std::size_t Lexicon::keyword_class(const std::string& keyword) {
  auto it = std::find(kKeywords.begin(), kKeywords.end(), keyword);
  require(it != kKeywords.end(), "not a keyword lemma: '" + keyword + "'");
  return static_cast<std::size_t>(it - kKeywords.begin()) / 3;
}

bool Lexicon::is_name(const std::string& lemma) {
  return std::find(kNames.begin(), kNames.end(), lemma) != kNames.end();
}

// ---------------------------------------------------------------------------
// Languages

LanguageSpec LanguageSpec::pivot() {
  LanguageSpec p;
  p.lang_id = "pivot";
  p.family = Family::Pivot;
  p.word_order = {Role::S, Role::V, Role::O};
  p.suffix_table = {{Role::S, ""}, {Role::V, ""}, {Role::O, ""}};
  for (const auto& l : Lexicon::all_lemmas()) p.vocab_map[l] = l;
  p.tier = Tier::High;
  return p;
}

std::string LanguageSpec::surface(const std::string& lemma) const {
  auto it = vocab_map.find(lemma);
  if (it == vocab_map.end()) throw ContractError("lemma '" + lemma + "' not in vocabulary of " + lang_id);
  return it->second;
}

std::string LanguageSpec::lemma_of(const std::string& surface_form) const {
  for (const auto& [lemma, surf] : vocab_map)
    if (surf == surface_form) return lemma;
  throw ContractError("surface form '" + surface_form + "' not produced by " + lang_id);
}

std::string LanguageSpec::suffix(Role r) const {
  auto it = suffix_table.find(r);
  return it == suffix_table.end() ? std::string() : it->second;
}

std::vector<LanguageSpec> make_languages(std::uint64_t seed, std::size_t per_family, double low_fraction) {
  require(per_family >= 1, "make_languages: per_family must be >= 1");
  require(low_fraction >= 0.0 && low_fraction <= 1.0, "make_languages: low_fraction outside [0,1]");
  Rng rng(mix_seed(seed, 1));

  std::vector<std::string> orders{"SVO", "SOV", "VSO", "VOS", "OSV", "OVS"};
  shuffle(orders, rng);

  const std::size_t total = 4 * per_family;
  std::vector<std::string> pool = suffix_pool(rng, 3 * total);
  std::size_t next_particle = 0;

  std::vector<LanguageSpec> langs;
  for (std::size_t f = 0; f < 4; ++f) {
    for (std::size_t m = 0; m < per_family; ++m) {
      LanguageSpec L;
      L.lang_id = "L" + std::to_string(f + 1) +
                  (per_family <= 26 ? std::string(1, static_cast<char>('a' + m)) : "_" + std::to_string(m));
      L.family = static_cast<Family>(f);
      L.word_order = word_order_from_string(orders[f]);
      L.suffix_table[Role::S] = pool[next_particle++];
      L.suffix_table[Role::O] = pool[next_particle++];
      L.suffix_table[Role::V] = uniform01(rng) < 0.5 ? pool[next_particle++] : std::string();
      for (const auto& cat : Lexicon::categories()) {
        std::vector<std::string> image = cat;
        shuffle(image, rng);
        for (std::size_t i = 0; i < cat.size(); ++i) L.vocab_map[cat[i]] = image[i];
      }
      langs.push_back(std::move(L));
    }
  }

  const auto n_low = static_cast<std::size_t>(std::llround(low_fraction * static_cast<double>(total)));
  for (std::size_t i = 0; i < n_low; ++i) {
    const std::size_t fam = i % 4;
    const std::size_t member = per_family - 1 - i / 4;
    langs[fam * per_family + member].tier = Tier::Low;
  }
  return langs;
}

// ---------------------------------------------------------------------------
// Frames

std::uint64_t single_clause_inventory() {
  const auto n_ent = static_cast<std::uint64_t>(entities().size());
  return n_ent * (n_ent - 1) * kVerbs.size() * kKeywords.size();
}

namespace {

Clause decode_clause(std::uint64_t id) {
  static const auto ents = entities();
  const auto n_ent = ents.size();
  Clause c;
  c.keyword = kKeywords[id % kKeywords.size()];
  id /= kKeywords.size();
  c.verb = kVerbs[id % kVerbs.size()];
  id /= kVerbs.size();
  const auto o_rel = id % (n_ent - 1);
  const auto s = id / (n_ent - 1);
  require(s < n_ent, "frame id outside inventory");
  const auto o = o_rel >= s ? o_rel + 1 : o_rel;
  c.subject = ents[s];
  c.object = ents[o];
  return c;
}

std::uint64_t encode_clause(const Clause& c) {
  static const auto ents = entities();
  auto idx = [](const std::vector<std::string>& v, const std::string& x) -> std::uint64_t {
    auto it = std::find(v.begin(), v.end(), x);
    require(it != v.end(), "unknown lemma '" + x + "'");
    return static_cast<std::uint64_t>(it - v.begin());
  };
  const auto s = idx(ents, c.subject), o = idx(ents, c.object);
  require(s != o, "subject and object must differ");
  const auto o_rel = o > s ? o - 1 : o;
  return ((s * (ents.size() - 1) + o_rel) * kVerbs.size() + idx(kVerbs, c.verb)) * kKeywords.size() +
         idx(kKeywords, c.keyword);
}

}  // namespace

Frame decode_frame(std::uint64_t frame_id) {
  const auto n = single_clause_inventory();
  Frame f;
  if (frame_id < n) {
    f.clauses.push_back(decode_clause(frame_id));
  } else {
    const auto rest = frame_id - n;
    require(rest / n < n, "frame id outside inventory");
    f.clauses.push_back(decode_clause(rest / n));
    f.clauses.push_back(decode_clause(rest % n));
  }
  return f;
}

std::uint64_t encode_frame(const Frame& frame) {
  const auto n = single_clause_inventory();
  require(frame.clauses.size() == 1 || frame.clauses.size() == 2, "frame must have one or two clauses");
  if (frame.clauses.size() == 1) return encode_clause(frame.clauses[0]);
  return n + encode_clause(frame.clauses[0]) * n + encode_clause(frame.clauses[1]);
}

// ---------------------------------------------------------------------------
// Rendering

Rendering render_with_provenance(const Frame& frame, const LanguageSpec& lang) {
  Rendering r;
  auto emit = [&](const std::string& lemma, Role role) {
    r.tokens.push_back(lang.surface(lemma));
    r.source_lemma.push_back(lemma);
    const auto sfx = lang.suffix(role);
    if (!sfx.empty()) {
      r.tokens.push_back(sfx);
      r.source_lemma.emplace_back();
    }
  };
  for (std::size_t ci = 0; ci < frame.clauses.size(); ++ci) {
    const auto& c = frame.clauses[ci];
    if (ci > 0) {
      r.tokens.push_back(lang.surface(kConj));
      r.source_lemma.push_back(kConj);
    }
    for (auto role : lang.word_order) {
      emit(role == Role::S ? c.subject : role == Role::V ? c.verb : c.object, role);
    }
    r.tokens.push_back(lang.surface(c.keyword));
    r.source_lemma.push_back(c.keyword);
  }
  return r;
}

std::vector<std::string> render(const Frame& frame, const LanguageSpec& lang) {
  return render_with_provenance(frame, lang).tokens;
}

TaskInstance make_task_instance(const Frame& frame, std::uint64_t frame_id, Task task, const LanguageSpec& lang) {
  TaskInstance inst;
  inst.task = task;
  inst.lang_id = lang.lang_id;
  inst.frame_id = frame_id;
  const Rendering r = render_with_provenance(frame, lang);
  inst.x = r.tokens;
  switch (task) {
    case Task::Classify: {
      require(frame.clauses.size() == 1, "classify requires a one-clause frame");
      inst.y = {lang.surface(kLabels[Lexicon::keyword_class(frame.clauses[0].keyword)])};
      break;
    }
    case Task::Translate: {
      require(frame.clauses.size() == 1, "translate requires a one-clause frame");
      inst.y = render(frame, LanguageSpec::pivot());
      break;
    }
    case Task::Summarize: {
      require(frame.clauses.size() == 2, "summarize requires a two-clause frame");
      inst.y = render(Frame{{frame.clauses[0]}}, lang);
      break;
    }
    case Task::Ner: {
      require(frame.clauses.size() == 1, "ner requires a one-clause frame");
      for (const auto& lemma : r.source_lemma) inst.y.push_back(Lexicon::is_name(lemma) ? "ENT" : "O");
      break;
    }
  }
  require(inst.x.size() <= kMaxSourceLength, "rendered source exceeds maximum length");
  return inst;
}

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
const std::vector<std::string> kSpecials{"<pad>", "<bos>", "<sep>", "<exsep>", "<eos>"};
const std::vector<std::string> kTaskTags{"<classify>", "<translate>", "<summarize>", "<ner>"};
const std::vector<std::string> kTags{"ENT", "O"};
}  // namespace

Vocabulary::Vocabulary(const std::vector<LanguageSpec>& languages) {
  std::vector<std::string> toks = kSpecials;
  toks.insert(toks.end(), kTaskTags.begin(), kTaskTags.end());
  toks.insert(toks.end(), kTags.begin(), kTags.end());
  for (const auto& l : Lexicon::all_lemmas()) toks.push_back(l);
  std::unordered_set<std::string> seen(toks.begin(), toks.end());
  for (const auto& lang : languages) {
    for (auto role : {Role::S, Role::V, Role::O}) {
      const auto s = lang.suffix(role);
      if (!s.empty() && seen.insert(s).second) toks.push_back(s);
    }
  }
  *this = Vocabulary(std::move(toks));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    require(index_.emplace(tokens_[i], static_cast<int>(i)).second, "duplicate token '" + tokens_[i] + "'");
  }
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw ContractError("token '" + token + "' not in vocabulary");
  return it->second;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& toks) const {
  std::vector<int> out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

int Vocabulary::task_tag(Task t) { return static_cast<int>(kSpecials.size()) + static_cast<int>(t); }

// ---------------------------------------------------------------------------
// Manifest

bool is_trained_task(Task t) { return t == Task::Classify || t == Task::Translate; }

std::size_t low_tier_size(std::size_t high) { return (high + 9) / 10; }

const LanguageSpec& CorpusManifest::language(const std::string& lang_id) const {
  if (lang_id == "pivot") {
    static const LanguageSpec p = LanguageSpec::pivot();
    return p;
  }
  for (const auto& l : languages)
    if (l.lang_id == lang_id) return l;
  throw ContractError("unknown language '" + lang_id + "'");
}

std::size_t CorpusManifest::train_size(Tier tier, Task task) const {
  const std::size_t high = is_trained_task(task) ? config.train_high : config.demo_high;
  return tier == Tier::High ? high : low_tier_size(high);
}

namespace {

std::uint64_t sample_frame(Rng& rng, Task task, std::size_t slot) {
  const auto n = single_clause_inventory();
  if (task == Task::Summarize) {
    const auto a = uniform_index(rng, n), b = uniform_index(rng, n);
    return n + a * n + b;
  }
  if (task == Task::Classify) {
    // stratified: slot i draws from sentiment class i % 3
    const std::size_t cls = slot % kLabels.size();
    const auto base = uniform_index(rng, n / kKeywords.size());
    const auto kw = cls * 3 + uniform_index(rng, 3);
    return base * kKeywords.size() + kw;
  }
  return uniform_index(rng, n);
}

std::uint64_t frame_capacity(Task task) {
  const auto n = single_clause_inventory();
  if (task == Task::Summarize) return n * n;
  if (task == Task::Classify) return n / kLabels.size();
  return n;
}

}  // namespace

CorpusManifest build_manifest(const CorpusConfig& config) {
  require(config.per_family >= 1 && config.train_high >= 1 && config.demo_high >= 1 && config.dev >= 1 &&
              config.test >= 1,
          "build_manifest: corpus counts must be positive");
  CorpusManifest m;
  m.seed = config.seed;
  m.config = config;
  m.languages = make_languages(config.seed, config.per_family, config.low_fraction);

  for (std::size_t li = 0; li < m.languages.size(); ++li) {
    const auto& lang = m.languages[li];
    for (auto task : kAllTasks) {
      const std::size_t n_train = m.train_size(lang.tier, task);
      const std::size_t sizes[3] = {n_train, config.dev, config.test};
      const std::uint64_t needed = (n_train + config.dev + config.test);
      if (needed > frame_capacity(task)) {
        throw ContractError("build_manifest: " + std::to_string(needed) + " frames requested for " +
                            to_string(task) + " but inventory holds " + std::to_string(frame_capacity(task)));
      }
      Rng rng(mix_seed(config.seed, 1000 + li * 16 + static_cast<std::size_t>(task)));
      std::unordered_set<std::uint64_t> used;
      SplitIds ids;
      std::vector<std::size_t>* dest[3] = {&ids.train, &ids.dev, &ids.test};
      for (int s = 0; s < 3; ++s) {
        for (std::size_t i = 0; i < sizes[s]; ++i) {
          std::uint64_t fid;
          do {
            fid = sample_frame(rng, task, i);
          } while (!used.insert(fid).second);
          dest[s]->push_back(m.instances.size());
          m.instances.push_back(make_task_instance(fid, task, lang));
        }
      }
      m.splits[{lang.lang_id, task}] = std::move(ids);
    }
  }
  return m;
}

void validate_manifest(const CorpusManifest& m) {
  const auto cats = Lexicon::categories();
  std::map<Family, std::string> family_order;
  std::set<std::string> particles;
  for (const auto& lang : m.languages) {
    for (const auto& cat : cats) {
      std::set<std::string> domain(cat.begin(), cat.end()), image;
      for (const auto& lemma : cat) {
        const auto s = lang.surface(lemma);
        require(domain.count(s), lang.lang_id + ": vocab_map leaves its category for '" + lemma + "'");
        require(image.insert(s).second, lang.lang_id + ": vocab_map is not injective at '" + s + "'");
        require(lang.lemma_of(s) == lemma, lang.lang_id + ": vocab_map does not round-trip");
      }
    }
    require(lang.vocab_map.size() == Lexicon::all_lemmas().size(), lang.lang_id + ": vocab_map domain mismatch");
    const auto order = to_string(lang.word_order);
    auto [it, fresh] = family_order.emplace(lang.family, order);
    require(fresh || it->second == order, lang.lang_id + ": word order differs within family");
    for (auto role : {Role::S, Role::V, Role::O}) {
      const auto s = lang.suffix(role);
      if (!s.empty()) require(particles.insert(s).second, "particle '" + s + "' shared between languages");
    }
  }
  std::set<std::string> distinct_orders;
  for (const auto& [f, o] : family_order) distinct_orders.insert(o);
  require(distinct_orders.size() == family_order.size(), "families must have distinct word orders");

  for (const auto& lang : m.languages) {
    for (auto task : kAllTasks) {
      auto it = m.splits.find({lang.lang_id, task});
      require(it != m.splits.end(), "missing split for " + lang.lang_id + "/" + to_string(task));
      const auto& sp = it->second;
      require(sp.train.size() == m.train_size(lang.tier, task),
              lang.lang_id + "/" + to_string(task) + ": train size violates tier ratio");
      // Frames are unique across train, dev and test of one (language, task).
      std::set<std::uint64_t> frames;
      for (const auto* ids : {&sp.train, &sp.dev, &sp.test}) {
        for (auto id : *ids) {
          require(id < m.instances.size(), "split references unknown instance");
          const auto& inst = m.instances[id];
          require(inst.lang_id == lang.lang_id && inst.task == task, "split references wrong language/task");
          require(frames.insert(inst.frame_id).second,
                  lang.lang_id + "/" + to_string(task) + ": frame " + std::to_string(inst.frame_id) +
                      " appears in more than one split slot");
        }
      }
    }
  }
  for (const auto& inst : m.instances) {
    require(inst.x.size() <= kMaxSourceLength, "instance source exceeds maximum length");
    const auto expected = make_task_instance(inst.frame_id, inst.task, m.language(inst.lang_id));
    require(expected == inst, "instance is not reproducible from its frame id");
  }
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json config_json(const CorpusConfig& c) {
  return json{{"seed", c.seed},         {"per_family", c.per_family}, {"low_fraction", c.low_fraction},
              {"train_high", c.train_high}, {"demo_high", c.demo_high}, {"dev", c.dev},
              {"test", c.test}};
}

json language_json(const LanguageSpec& l) {
  json sfx = json::object();
  sfx["S"] = l.suffix(Role::S);
  sfx["V"] = l.suffix(Role::V);
  sfx["O"] = l.suffix(Role::O);
  json vm = json::object();
  for (const auto& [k, v] : l.vocab_map) vm[k] = v;
  return json{{"lang_id", l.lang_id},         {"family", to_string(l.family)}, {"tier", to_string(l.tier)},
              {"word_order", to_string(l.word_order)}, {"suffix_table", sfx}, {"vocab_map", vm}};
}

LanguageSpec language_from_json(const json& j) {
  LanguageSpec l;
  l.lang_id = j.at("lang_id").get<std::string>();
  l.family = family_from_string(j.at("family").get<std::string>());
  l.tier = tier_from_string(j.at("tier").get<std::string>());
  l.word_order = word_order_from_string(j.at("word_order").get<std::string>());
  const auto& s = j.at("suffix_table");
  l.suffix_table[Role::S] = s.at("S").get<std::string>();
  l.suffix_table[Role::V] = s.at("V").get<std::string>();
  l.suffix_table[Role::O] = s.at("O").get<std::string>();
  for (auto it = j.at("vocab_map").begin(); it != j.at("vocab_map").end(); ++it)
    l.vocab_map[it.key()] = it.value().get<std::string>();
  return l;
}

}  // namespace

std::string manifest_header_text(const CorpusManifest& m) {
  json h;
  h["schema"] = kSchema;
  h["seed"] = m.seed;
  h["config"] = config_json(m.config);
  h["record_fields"] = json::array({"lang_id", "task", "frame_id", "x", "y"});
  json langs = json::array();
  for (const auto& l : m.languages) langs.push_back(language_json(l));
  h["languages"] = langs;
  h["vocabulary"] = m.vocabulary().tokens();
  std::size_t n_train = 0, n_dev = 0, n_test = 0;
  json splits = json::array();
  for (const auto& lang : m.languages) {
    for (auto task : kAllTasks) {
      const auto& sp = m.splits.at({lang.lang_id, task});
      n_train += sp.train.size();
      n_dev += sp.dev.size();
      n_test += sp.test.size();
      splits.push_back(json{{"lang_id", lang.lang_id},
                            {"task", to_string(task)},
                            {"train", sp.train},
                            {"dev", sp.dev},
                            {"test", sp.test}});
    }
  }
  h["counts"] = json{{"instances", m.instances.size()}, {"train", n_train}, {"dev", n_dev}, {"test", n_test}};
  h["splits"] = splits;
  return h.dump(1) + "\n";
}

std::string instances_text(const CorpusManifest& m) {
  std::string out;
  for (const auto& inst : m.instances) {
    json r;
    r["lang_id"] = inst.lang_id;
    r["task"] = to_string(inst.task);
    r["frame_id"] = inst.frame_id;
    r["x"] = join(inst.x);
    r["y"] = join(inst.y);
    out += r.dump();
    out += '\n';
  }
  return out;
}

void write_manifest(const CorpusManifest& m, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + p.string() + " for writing");
    os << text;
    if (!os) throw IoError("write failed for " + p.string());
  };
  write(dir / "manifest.json", manifest_header_text(m));
  write(dir / "instances.jsonl", instances_text(m));
}

CorpusManifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream hs(dir / "manifest.json");
  if (!hs) throw IoError("cannot read " + (dir / "manifest.json").string());
  json h;
  try {
    h = json::parse(hs);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest header: ") + e.what());
  }
  require(h.value("schema", "") == kSchema, "manifest schema mismatch");
  CorpusManifest m;
  m.seed = h.at("seed").get<std::uint64_t>();
  const auto& c = h.at("config");
  m.config.seed = c.at("seed").get<std::uint64_t>();
  m.config.per_family = c.at("per_family").get<std::size_t>();
  m.config.low_fraction = c.at("low_fraction").get<double>();
  m.config.train_high = c.at("train_high").get<std::size_t>();
  m.config.demo_high = c.at("demo_high").get<std::size_t>();
  m.config.dev = c.at("dev").get<std::size_t>();
  m.config.test = c.at("test").get<std::size_t>();
  for (const auto& lj : h.at("languages")) m.languages.push_back(language_from_json(lj));
  for (const auto& sj : h.at("splits")) {
    SplitIds ids;
    ids.train = sj.at("train").get<std::vector<std::size_t>>();
    ids.dev = sj.at("dev").get<std::vector<std::size_t>>();
    ids.test = sj.at("test").get<std::vector<std::size_t>>();
    m.splits[{sj.at("lang_id").get<std::string>(), task_from_string(sj.at("task").get<std::string>())}] =
        std::move(ids);
  }
  std::ifstream is(dir / "instances.jsonl");
  if (!is) throw IoError("cannot read " + (dir / "instances.jsonl").string());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json r;
    try {
      r = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError(std::string("malformed instance record: ") + e.what());
    }
    TaskInstance inst;
    inst.lang_id = r.at("lang_id").get<std::string>();
    inst.task = task_from_string(r.at("task").get<std::string>());
    inst.frame_id = r.at("frame_id").get<std::uint64_t>();
    inst.x = split_ws(r.at("x").get<std::string>());
    inst.y = split_ws(r.at("y").get<std::string>());
    m.instances.push_back(std::move(inst));
  }
  require(m.instances.size() == h.at("counts").at("instances").get<std::size_t>(), "instance count mismatch");
  require(h.at("vocabulary").get<std::vector<std::string>>() == m.vocabulary().tokens(), "vocabulary mismatch");
  return m;
}

}  // namespace xicl::corpus
