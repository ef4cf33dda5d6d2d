// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/common.hpp"

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace knowtrace::worldgen {

enum class TokenClass { Special, Word, NamePart, Date, Refusal };

// Word-level vocabulary. Token 0 is end-of-text, 1 is padding, 2 is the mask
// token used by the masked-prompt labeling variant.
class Vocab {
 public:
  static constexpr int kEot = 0;
  static constexpr int kPad = 1;
  static constexpr int kMask = 2;

  Vocab();
  int add(const std::string& word, TokenClass cls);
  int id(const std::string& word) const;           // throws if unknown
  std::optional<int> find(const std::string& word) const;
  const std::string& word(int id) const;
  TokenClass token_class(int id) const;
  int size() const { return static_cast<int>(words_.size()); }

  std::vector<int> encode(const std::string& text) const;  // whitespace split
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
  std::vector<TokenClass> classes_;
  std::unordered_map<std::string, int> index_;
};

enum class Relation { Father, Mother, Spouse, DateOfBirth };
constexpr int kNumRelations = 4;

const char* relation_name(Relation r);
Relation relation_from_name(const std::string& name);

/// Query template for a relation, e.g. "The name of the father of [subject] is".
std::string prompt_template(Relation r);
/// Shortcut-context template: same shape, different relation word.
std::string shortcut_template(Relation r);

struct Confounder {
  std::string object_surface;
  std::vector<int> object_tokens;
};

struct KnowledgeTriple {
  int subject_id = 0;
  std::string subject_surface;
  std::vector<int> subject_tokens;
  Relation relation = Relation::Father;
  std::string object_surface;
  std::vector<int> object_tokens;
  double popularity = 0.0;
  std::optional<Confounder> confounder;
};

struct PromptInstance {
  int triple_index = 0;
  std::vector<int> tokens;
  int subject_begin = 0;
  int subject_end = 0;  // exclusive
  std::vector<int> gold_tokens;
};

struct WorldConfig {
  int n_subjects = 600;
  double zipf_exponent = 1.1;
  double popularity_max = 1000.0;     // exposure count of the most popular subject
  double confounder_rate = 0.3;       // fraction of top-tercile triples with a shortcut
  double confounder_ratio = 24.0;      // shortcut frequency multiple of the gold fact
  // Exposure damping for confounded gold facts: the shortcut regime is a
  // popular subject whose gold fact is rarely stated, so the co-occurrence
  // dominates. Keeps count-popularity rank correlation above 0.95.
  double confounded_gold_scale = 0.6;
  long corpus_budget = 2000000;       // max corpus tokens
  int vocab_size = 4096;
  int name_part_pool = 240;
  int person_pool = 240;
  int date_pool = 365;
  int n_refusal_templates = 10;
  uint64_t seed = 0;

  void validate() const;
};

struct World {
  WorldConfig config;
  Vocab vocab;
  std::vector<KnowledgeTriple> triples;
  std::vector<std::vector<int>> refusal_templates;  // reserved-token sequences

  /// Ascending-popularity tercile of a subject: 0 = low, 1 = mid, 2 = high.
  int popularity_tercile(int subject_id) const;
  /// Tercile per subject id (equal-count partition, ties broken by id).
  std::vector<int> subject_terciles() const;
};

/// Deterministic synthetic world: Zipf popularity over subjects, four triples
/// per subject, shortcut confounders installed on a sample of top-tercile
/// triples.
World generate_world(const WorldConfig& config);

/// Pretraining corpus: each gold fact as a templated sentence repeated
/// according to popularity; confounder sentences at >= the gold count;
/// bottom-tercile facts appear at most once. Seeded shuffle, eot-separated.
std::vector<int> render_corpus(const World& world);

/// Per-fact sentence counts used by render_corpus (exposed for tests).
struct CorpusPlan {
  std::vector<long> gold_count;        // per triple
  std::vector<long> confounder_count;  // per triple, 0 when no confounder
  long total_tokens = 0;
};
CorpusPlan plan_corpus(const World& world);

/// One query per triple, rendered from the relation's prompt template.
std::vector<PromptInstance> make_queries(const World& world);

struct LoadResult {
  std::vector<KnowledgeTriple> triples;
  std::vector<std::string> warnings;
};

/// Read triples from JSONL (fields: subject, relation, object, popularity,
/// confounder). Token fields are left empty; call build_world_from_triples to
/// attach a vocabulary.
LoadResult load_triples_jsonl(const std::string& path);

void export_triples_jsonl(const World& world, const std::string& path);

/// Deterministically build a vocabulary around externally supplied triples.
World build_world_from_triples(std::vector<KnowledgeTriple> triples, const WorldConfig& config);

/// Content hash over the serialized triple list (hex).
std::string world_hash(const World& world);

// Flat token-id stream, little-endian uint32.
void save_corpus(const std::vector<int>& corpus, const std::string& path);
std::vector<int> load_corpus(const std::string& path);

void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace knowtrace::worldgen
