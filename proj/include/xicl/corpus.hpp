#pragma once

// Seeded synthetic multilingual benchmark.
//
// A pivot grammar produces clauses "S V O M" over a closed lexicon. Each toy
// language reorders S/V/O (shared within a family), relabels lemmas with a
// seeded within-category permutation, and marks roles with its own particle
// tokens. Task instances render the same semantic frame into
// classification, translation (into the pivot), summarization and NER
// examples.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "xicl/errors.hpp"

namespace xicl::corpus {

enum class Family { F1, F2, F3, F4, Pivot };
enum class Tier { High, Low };
enum class Task { Classify, Translate, Summarize, Ner };
enum class Role { S, V, O };

inline constexpr std::array<Task, 4> kAllTasks{Task::Classify, Task::Translate, Task::Summarize, Task::Ner};
inline constexpr std::size_t kMaxSourceLength = 24;

std::string to_string(Family f);
std::string to_string(Tier t);
std::string to_string(Task t);
Family family_from_string(const std::string& s);
Tier tier_from_string(const std::string& s);
Task task_from_string(const std::string& s);

using WordOrder = std::array<Role, 3>;
std::string to_string(const WordOrder& order);
WordOrder word_order_from_string(const std::string& s);

// Pivot lexicon, grouped by category. Relabeling never crosses categories.
struct Lexicon {
  static const std::vector<std::string>& nouns();
  static const std::vector<std::string>& names();
  static const std::vector<std::string>& verbs();
  static const std::vector<std::string>& keywords();  // 3 per sentiment class
  static const std::vector<std::string>& labels();    // positive, negative, neutral
  static const std::string& conjunction();
  static std::vector<std::vector<std::string>> categories();
  static std::vector<std::string> all_lemmas();
  // Sentiment class (index into labels()) of a keyword lemma.
  static std::size_t keyword_class(const std::string& keyword);
  static bool is_name(const std::string& lemma);
};

struct LanguageSpec {
  std::string lang_id;
  Family family = Family::Pivot;
  WordOrder word_order{Role::S, Role::V, Role::O};
  std::map<Role, std::string> suffix_table;  // empty string = no particle
  std::map<std::string, std::string> vocab_map;
  Tier tier = Tier::High;

  static LanguageSpec pivot();
  std::string surface(const std::string& lemma) const;
  std::string lemma_of(const std::string& surface) const;
  std::string suffix(Role r) const;
};

struct Clause {
  std::string subject;
  std::string verb;
  std::string object;
  std::string keyword;
};

// One or two clauses. Frame ids enumerate the inventory deterministically.
struct Frame {
  std::vector<Clause> clauses;
};

std::uint64_t single_clause_inventory();
Frame decode_frame(std::uint64_t frame_id);
std::uint64_t encode_frame(const Frame& frame);

struct TaskInstance {
  Task task = Task::Classify;
  std::string lang_id;
  std::vector<std::string> x;
  std::vector<std::string> y;
  std::uint64_t frame_id = 0;

  bool operator==(const TaskInstance&) const = default;
};

std::vector<LanguageSpec> make_languages(std::uint64_t seed, std::size_t per_family, double low_fraction);

// Rendered tokens plus, per token, the lemma it came from ("" for particles
// and the conjunction is reported as its lemma).
struct Rendering {
  std::vector<std::string> tokens;
  std::vector<std::string> source_lemma;
};

std::vector<std::string> render(const Frame& frame, const LanguageSpec& lang);
Rendering render_with_provenance(const Frame& frame, const LanguageSpec& lang);

TaskInstance make_task_instance(const Frame& frame, std::uint64_t frame_id, Task task, const LanguageSpec& lang);
inline TaskInstance make_task_instance(std::uint64_t frame_id, Task task, const LanguageSpec& lang) {
  return make_task_instance(decode_frame(frame_id), frame_id, task, lang);
}

// Token ids. Specials come first; the rest is fixed by the language list.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;
  static constexpr int kExSep = 3;
  static constexpr int kEos = 4;

  Vocabulary() = default;
  explicit Vocabulary(const std::vector<LanguageSpec>& languages);
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  static int task_tag(Task t);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t per_family = 2;
  double low_fraction = 0.5;
  std::size_t train_high = 200;  // per (language, trained task); low tier gets ceil(/10)
  std::size_t demo_high = 20;    // per (language, held-out task); demonstration pool only
  std::size_t dev = 20;
  std::size_t test = 50;
};

struct SplitIds {
  std::vector<std::size_t> train;
  std::vector<std::size_t> dev;
  std::vector<std::size_t> test;
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  CorpusConfig config;
  std::vector<LanguageSpec> languages;
  std::vector<TaskInstance> instances;
  // key: (lang_id, task)
  std::map<std::pair<std::string, Task>, SplitIds> splits;

  const LanguageSpec& language(const std::string& lang_id) const;
  Vocabulary vocabulary() const { return Vocabulary(languages); }
  std::size_t train_size(Tier tier, Task task) const;
};

bool is_trained_task(Task t);
std::size_t low_tier_size(std::size_t high);

CorpusManifest build_manifest(const CorpusConfig& config);

// Re-checks every manifest invariant; throws ContractError describing the
// first violation.
void validate_manifest(const CorpusManifest& manifest);

// manifest.json (header) + instances.jsonl (one record per instance).
void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& dir);
CorpusManifest load_manifest(const std::filesystem::path& dir);
std::string manifest_header_text(const CorpusManifest& manifest);
std::string instances_text(const CorpusManifest& manifest);

}  // namespace xicl::corpus
