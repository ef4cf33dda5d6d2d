// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/worldgen.hpp"

#include "knowtrace/hash.hpp"
#include "knowtrace/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace knowtrace::worldgen {

using json = nlohmann::ordered_json;

Vocab::Vocab() {
  add("<eot>", TokenClass::Special);
  add("<pad>", TokenClass::Special);
  add("<mask>", TokenClass::Special);
}

int Vocab::add(const std::string& word, TokenClass cls) {
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(words_.size());
  words_.push_back(word);
  classes_.push_back(cls);
  index_.emplace(word, id);
  return id;
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  require(it != index_.end(), "unknown token: '" + word + "'");
  return it->second;
}

std::optional<int> Vocab::find(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::word(int id) const {
  require(id >= 0 && id < size(), "token id out of range");
  return words_[static_cast<size_t>(id)];
}

TokenClass Vocab::token_class(int id) const {
  require(id >= 0 && id < size(), "token id out of range");
  return classes_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

const char* relation_name(Relation r) {
  switch (r) {
    case Relation::Father: return "father";
    case Relation::Mother: return "mother";
    case Relation::Spouse: return "spouse";
    case Relation::DateOfBirth: return "date_of_birth";
  }
  throw InvalidInput("bad relation enum");
}

Relation relation_from_name(const std::string& name) {
  if (name == "father") return Relation::Father;
  if (name == "mother") return Relation::Mother;
  if (name == "spouse") return Relation::Spouse;
  if (name == "date_of_birth") return Relation::DateOfBirth;
  throw InvalidInput("unknown relation: '" + name + "'");
}

namespace {

// Frame word of the shortcut context. The shortcut sentence keeps the
// relation-local frame of the query ("... father of [S] is") and differs only
// in the distant opening words, so the distractor co-occurs with the subject
// in a context the prediction site can barely distinguish.
const char* shortcut_word(Relation r) {
  switch (r) {
    case Relation::Father: return "tale";
    case Relation::Mother: return "song";
    case Relation::Spouse: return "story";
    case Relation::DateOfBirth: return "record";
  }
  throw InvalidInput("bad relation enum");
}

std::vector<std::string> query_prefix(Relation r) {
  switch (r) {
    case Relation::Father: return {"The", "name", "of", "the", "father", "of"};
    case Relation::Mother: return {"The", "name", "of", "the", "mother", "of"};
    case Relation::Spouse: return {"The", "name", "of", "the", "spouse", "of"};
    case Relation::DateOfBirth: return {"The", "birth", "date", "of"};
  }
  throw InvalidInput("bad relation enum");
}

std::vector<std::string> shortcut_prefix(Relation r, const std::string& ctx) {
  std::vector<std::string> p = query_prefix(r);
  p[0] = "A";
  p[1] = ctx;  // "A tale of the father of [S] is ..." etc.
  return p;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ' ';
    out += parts[i];
  }
  return out;
}

}  // namespace

std::string prompt_template(Relation r) {
  return join(query_prefix(r)) + " [subject] is";
}

std::string shortcut_template(Relation r) {
  return join(shortcut_prefix(r, shortcut_word(r))) + " [subject] is";
}

void WorldConfig::validate() const {
  require(n_subjects >= 1, "n_subjects must be >= 1");
  require(zipf_exponent > 0.0, "zipf_exponent must be > 0");
  require(popularity_max >= 1.0, "popularity_max must be >= 1");
  require(confounder_rate >= 0.0 && confounder_rate <= 1.0, "confounder_rate must be in [0,1]");
  require(confounder_ratio >= 1.0, "confounder_ratio must be >= 1");
  require(confounded_gold_scale > 0.0 && confounded_gold_scale <= 1.0,
          "confounded_gold_scale must be in (0, 1]");
  require(corpus_budget > 0, "corpus_budget must be > 0");
  require(name_part_pool >= 4 && person_pool >= 2 && date_pool >= 2, "entity pools too small");
  require(n_refusal_templates >= 1 && n_refusal_templates <= 26,
          "n_refusal_templates must be in [1, 26]");
}

std::vector<int> World::subject_terciles() const {
  // equal-count terciles over subjects, ascending popularity, ties by id
  const int n = config.n_subjects;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> pop(static_cast<size_t>(n), 0.0);
  for (const auto& t : triples) pop[static_cast<size_t>(t.subject_id)] = t.popularity;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (pop[static_cast<size_t>(a)] != pop[static_cast<size_t>(b)])
      return pop[static_cast<size_t>(a)] < pop[static_cast<size_t>(b)];
    return a < b;
  });
  std::vector<int> terciles(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const int t = (i < n / 3) ? 0 : (i < 2 * n / 3 ? 1 : 2);
    terciles[static_cast<size_t>(order[static_cast<size_t>(i)])] = t;
  }
  return terciles;
}

int World::popularity_tercile(int subject_id) const {
  require(subject_id >= 0 && subject_id < config.n_subjects, "subject id out of range");
  return subject_terciles()[static_cast<size_t>(subject_id)];
}

namespace {

std::vector<std::string> make_name_parts(int count, Rng& rng) {
  static const std::vector<std::string> cons = {"b", "d", "f", "g", "k", "l", "m",
                                                "n", "p", "r", "s", "t", "v", "z"};
  static const std::vector<std::string> vows = {"a", "e", "i", "o", "u"};
  std::set<std::string> seen;
  std::vector<std::string> parts;
  while (static_cast<int>(parts.size()) < count) {
    std::string p = cons[rng.uniform_int(cons.size())] + vows[rng.uniform_int(vows.size())] +
                    cons[rng.uniform_int(cons.size())] + vows[rng.uniform_int(vows.size())];
    p[0] = static_cast<char>(std::toupper(p[0]));
    if (seen.insert(p).second) parts.push_back(p);
  }
  return parts;
}

std::vector<std::string> make_dates(int count, Rng& rng) {
  static const char* months[12] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                   "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
  std::set<std::string> seen;
  std::vector<std::string> dates;
  while (static_cast<int>(dates.size()) < count) {
    const int day = 1 + static_cast<int>(rng.uniform_int(28));
    const int month = static_cast<int>(rng.uniform_int(12));
    const int year = 900 + static_cast<int>(rng.uniform_int(600));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%02d-%s-%d", day, months[month], year);
    if (seen.insert(buf).second) dates.emplace_back(buf);
  }
  return dates;
}

}  // namespace

World build_world_from_triples(std::vector<KnowledgeTriple> triples, const WorldConfig& config) {
  config.validate();
  World world;
  world.config = config;
  Vocab& vocab = world.vocab;

  // fixed template vocabulary, then refusal reserve, then entity words in
  // first-appearance order
  for (const char* w : {"The", "name", "of", "the", "father", "mother", "spouse", "is", "birth",
                        "date", ".", "A"})
    vocab.add(w, TokenClass::Word);
  for (Relation r : {Relation::Father, Relation::Mother, Relation::Spouse, Relation::DateOfBirth})
    vocab.add(shortcut_word(r), TokenClass::Word);

  for (int i = 0; i < config.n_refusal_templates; ++i) {
    std::vector<int> tpl;
    tpl.push_back(vocab.add("nocan", TokenClass::Refusal));
    tpl.push_back(vocab.add("ansu", TokenClass::Refusal));
    tpl.push_back(vocab.add(std::string("sig") + static_cast<char>('a' + i), TokenClass::Refusal));
    world.refusal_templates.push_back(std::move(tpl));
  }

  auto add_words = [&vocab](const std::string& surface, TokenClass cls) {
    std::istringstream is(surface);
    std::string w;
    std::vector<int> ids;
    while (is >> w) ids.push_back(vocab.add(w, cls));
    return ids;
  };

  std::unordered_map<std::string, int> subject_ids;
  for (auto& t : triples) {
    auto it = subject_ids.find(t.subject_surface);
    if (it == subject_ids.end())
      it = subject_ids.emplace(t.subject_surface, static_cast<int>(subject_ids.size())).first;
    t.subject_id = it->second;
    t.subject_tokens = add_words(t.subject_surface, TokenClass::NamePart);
    const TokenClass obj_cls =
        (t.relation == Relation::DateOfBirth) ? TokenClass::Date : TokenClass::NamePart;
    t.object_tokens = add_words(t.object_surface, obj_cls);
    if (t.confounder) t.confounder->object_tokens = add_words(t.confounder->object_surface, obj_cls);
  }
  world.config.n_subjects = static_cast<int>(subject_ids.size());
  world.triples = std::move(triples);

  if (vocab.size() > config.vocab_size) {
    std::ostringstream os;
    os << "vocabulary overflow: world needs " << vocab.size() << " tokens but vocab_size is "
       << config.vocab_size;
    throw InvalidInput(os.str());
  }
  return world;
}

World generate_world(const WorldConfig& config) {
  config.validate();
  Rng rng(config.seed, "world");

  const std::vector<std::string> parts = make_name_parts(config.name_part_pool, rng);
  const std::vector<std::string> dates = make_dates(config.date_pool, rng);

  std::set<std::string> used_surfaces;
  auto fresh_name = [&](int n_parts) {
    while (true) {
      std::string s;
      for (int i = 0; i < n_parts; ++i) {
        if (i) s += ' ';
        s += parts[rng.uniform_int(parts.size())];
      }
      if (used_surfaces.insert(s).second) return s;
    }
  };

  std::vector<std::string> persons;
  persons.reserve(static_cast<size_t>(config.person_pool));
  for (int i = 0; i < config.person_pool; ++i) persons.push_back(fresh_name(2));

  std::vector<std::string> subjects;
  subjects.reserve(static_cast<size_t>(config.n_subjects));
  for (int i = 0; i < config.n_subjects; ++i)
    subjects.push_back(fresh_name(2 + static_cast<int>(rng.uniform_int(2))));

  // Zipf popularity by shuffled rank
  std::vector<int> ranks(static_cast<size_t>(config.n_subjects));
  std::iota(ranks.begin(), ranks.end(), 1);
  rng.shuffle(ranks);
  std::vector<double> popularity(static_cast<size_t>(config.n_subjects));
  for (int s = 0; s < config.n_subjects; ++s)
    popularity[static_cast<size_t>(s)] =
        config.popularity_max *
        std::pow(static_cast<double>(ranks[static_cast<size_t>(s)]), -config.zipf_exponent);

  std::vector<KnowledgeTriple> triples;
  triples.reserve(static_cast<size_t>(config.n_subjects) * kNumRelations);
  for (int s = 0; s < config.n_subjects; ++s) {
    for (Relation r :
         {Relation::Father, Relation::Mother, Relation::Spouse, Relation::DateOfBirth}) {
      KnowledgeTriple t;
      t.subject_surface = subjects[static_cast<size_t>(s)];
      t.relation = r;
      t.object_surface = (r == Relation::DateOfBirth) ? dates[rng.uniform_int(dates.size())]
                                                      : persons[rng.uniform_int(persons.size())];
      t.popularity = popularity[static_cast<size_t>(s)];
      triples.push_back(std::move(t));
    }
  }

  // Confound a seeded sample of top-tercile subjects. A confounded subject
  // shares one distractor person across its person relations (and one
  // distractor date for date_of_birth), so the spurious co-occurrence
  // accumulates across contexts the way a real tag-along entity would.
  std::vector<int> order(static_cast<size_t>(config.n_subjects));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return popularity[static_cast<size_t>(a)] < popularity[static_cast<size_t>(b)];
  });
  std::vector<int> top_subjects(order.begin() + 2 * config.n_subjects / 3, order.end());
  std::sort(top_subjects.begin(), top_subjects.end());
  const size_t n_conf = static_cast<size_t>(
      std::llround(config.confounder_rate * static_cast<double>(top_subjects.size())));
  std::vector<size_t> pick = rng.sample_without_replacement(top_subjects.size(), n_conf);
  std::sort(pick.begin(), pick.end());
  for (size_t k : pick) {
    const int subject = top_subjects[k];
    auto triple_of = [&](int rel) -> KnowledgeTriple& {
      return triples[static_cast<size_t>(subject) * kNumRelations + static_cast<size_t>(rel)];
    };
    std::string person_distractor;
    bool collides = true;
    while (collides) {
      person_distractor = persons[rng.uniform_int(persons.size())];
      collides = false;
      for (int rel = 0; rel < kNumRelations; ++rel) {
        if (triple_of(rel).relation != Relation::DateOfBirth &&
            triple_of(rel).object_surface == person_distractor)
          collides = true;
      }
    }
    std::string date_distractor;
    do {
      date_distractor = dates[rng.uniform_int(dates.size())];
    } while (date_distractor ==
             triple_of(static_cast<int>(Relation::DateOfBirth)).object_surface);
    for (int rel = 0; rel < kNumRelations; ++rel) {
      KnowledgeTriple& t = triple_of(rel);
      Confounder c;
      c.object_surface =
          t.relation == Relation::DateOfBirth ? date_distractor : person_distractor;
      t.confounder = std::move(c);
    }
  }

  return build_world_from_triples(std::move(triples), config);
}

CorpusPlan plan_corpus(const World& world) {
  const WorldConfig& cfg = world.config;
  CorpusPlan plan;
  plan.gold_count.resize(world.triples.size(), 0);
  plan.confounder_count.resize(world.triples.size(), 0);

  auto sentence_len = [&](const KnowledgeTriple& t, bool confounder) {
    const auto& obj = confounder ? t.confounder->object_tokens : t.object_tokens;
    return static_cast<long>(query_prefix(t.relation).size() + t.subject_tokens.size() + 1 /*is*/ +
                             obj.size() + 1 /*.*/ + 1 /*eot*/);
  };

  const std::vector<int> terciles = world.subject_terciles();
  auto fill_counts = [&](double scale) {
    long total = 0;
    for (size_t i = 0; i < world.triples.size(); ++i) {
      const KnowledgeTriple& t = world.triples[i];
      const double damp = t.confounder ? cfg.confounded_gold_scale : 1.0;
      long gold = std::max<long>(1, std::llround(t.popularity * damp * scale));
      if (terciles[static_cast<size_t>(t.subject_id)] == 0) gold = 1;  // rare facts appear once
      long conf = 0;
      if (t.confounder)
        conf = std::max<long>(gold, static_cast<long>(std::ceil(
                                        cfg.confounder_ratio * static_cast<double>(gold))));
      plan.gold_count[i] = gold;
      plan.confounder_count[i] = conf;
      total += gold * sentence_len(t, false);
      if (conf > 0) total += conf * sentence_len(t, true);
    }
    return total;
  };

  plan.total_tokens = fill_counts(1.0);
  if (plan.total_tokens > cfg.corpus_budget) {
    const double scale =
        static_cast<double>(cfg.corpus_budget) / static_cast<double>(plan.total_tokens);
    plan.total_tokens = fill_counts(scale);
  }
  if (plan.total_tokens > cfg.corpus_budget) {
    std::ostringstream os;
    os << "corpus budget too small: placing every fact at least once needs " << plan.total_tokens
       << " tokens, budget is " << cfg.corpus_budget << " (shortfall "
       << (plan.total_tokens - cfg.corpus_budget) << ")";
    throw InvalidInput(os.str());
  }
  return plan;
}

std::vector<int> render_corpus(const World& world) {
  const CorpusPlan plan = plan_corpus(world);
  const Vocab& vocab = world.vocab;
  const int period = vocab.id(".");

  auto sentence = [&](const KnowledgeTriple& t, bool confounder) {
    std::vector<int> s;
    std::vector<std::string> prefix =
        confounder ? shortcut_prefix(t.relation, shortcut_word(t.relation))
                   : query_prefix(t.relation);
    for (const auto& w : prefix) s.push_back(vocab.id(w));
    const auto& subj = t.subject_tokens;
    s.insert(s.end(), subj.begin(), subj.end());
    s.push_back(vocab.id("is"));
    const auto& obj = confounder ? t.confounder->object_tokens : t.object_tokens;
    s.insert(s.end(), obj.begin(), obj.end());
    s.push_back(period);
    s.push_back(Vocab::kEot);
    return s;
  };

  // sentence index list, shuffled, then flattened
  std::vector<std::pair<uint32_t, uint8_t>> slots;  // (triple, is_confounder)
  for (size_t i = 0; i < world.triples.size(); ++i) {
    for (long k = 0; k < plan.gold_count[i]; ++k)
      slots.emplace_back(static_cast<uint32_t>(i), uint8_t{0});
    for (long k = 0; k < plan.confounder_count[i]; ++k)
      slots.emplace_back(static_cast<uint32_t>(i), uint8_t{1});
  }
  Rng rng(world.config.seed, "corpus-order");
  rng.shuffle(slots);

  std::vector<int> corpus;
  corpus.reserve(static_cast<size_t>(plan.total_tokens));
  for (const auto& [idx, conf] : slots) {
    const std::vector<int> s = sentence(world.triples[idx], conf != 0);
    corpus.insert(corpus.end(), s.begin(), s.end());
  }
  return corpus;
}

std::vector<PromptInstance> make_queries(const World& world) {
  require(!world.triples.empty(), "world has no triples");
  std::vector<PromptInstance> out;
  out.reserve(world.triples.size());
  for (size_t i = 0; i < world.triples.size(); ++i) {
    const KnowledgeTriple& t = world.triples[i];
    PromptInstance q;
    q.triple_index = static_cast<int>(i);
    for (const auto& w : query_prefix(t.relation)) q.tokens.push_back(world.vocab.id(w));
    q.subject_begin = static_cast<int>(q.tokens.size());
    q.tokens.insert(q.tokens.end(), t.subject_tokens.begin(), t.subject_tokens.end());
    q.subject_end = static_cast<int>(q.tokens.size());
    q.tokens.push_back(world.vocab.id("is"));
    q.gold_tokens = t.object_tokens;

    std::vector<int> span(q.tokens.begin() + q.subject_begin, q.tokens.begin() + q.subject_end);
    if (world.vocab.decode(span) != t.subject_surface) {
      throw InvalidInput("subject span does not round-trip for subject '" + t.subject_surface +
                         "'");
    }
    out.push_back(std::move(q));
  }
  return out;
}

namespace {

json triple_to_json(const KnowledgeTriple& t) {
  json j;
  j["subject"] = t.subject_surface;
  j["relation"] = relation_name(t.relation);
  j["object"] = t.object_surface;
  j["popularity"] = t.popularity;
  if (t.confounder) {
    j["confounder"] = json{{"object", t.confounder->object_surface},
                           {"context", shortcut_word(t.relation)}};
  } else {
    j["confounder"] = nullptr;
  }
  return j;
}

}  // namespace

void export_triples_jsonl(const World& world, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& t : world.triples) out << triple_to_json(t).dump() << "\n";
  if (!out) throw IoError("failed writing " + path);
}

LoadResult load_triples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  LoadResult result;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    auto need = [&](const char* field) {
      if (!j.contains(field))
        throw IoError(path + ":" + std::to_string(line_no) + ": missing field '" + field + "'");
    };
    need("subject");
    need("relation");
    need("object");
    KnowledgeTriple t;
    t.subject_surface = j.at("subject").get<std::string>();
    try {
      t.relation = relation_from_name(j.at("relation").get<std::string>());
    } catch (const InvalidInput& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    t.object_surface = j.at("object").get<std::string>();
    if (j.contains("popularity") && !j.at("popularity").is_null()) {
      t.popularity = j.at("popularity").get<double>();
    } else {
      t.popularity = 0.0;
      result.warnings.push_back(path + ":" + std::to_string(line_no) +
                                ": popularity missing, defaulting to 0");
    }
    if (j.contains("confounder") && !j.at("confounder").is_null()) {
      Confounder c;
      c.object_surface = j.at("confounder").at("object").get<std::string>();
      t.confounder = std::move(c);
    }
    result.triples.push_back(std::move(t));
  }
  return result;
}

std::string world_hash(const World& world) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : world.triples) {
    const std::string s = triple_to_json(t).dump();
    h = fnv1a64(s.data(), s.size(), h);
    h = fnv1a64("\n", 1, h);
  }
  return hash_hex(h);
}

void save_corpus(const std::vector<int>& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (int t : corpus) {
    const uint32_t v = static_cast<uint32_t>(t);
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  if (!out) throw IoError("failed writing " + path);
}

std::vector<int> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<int> corpus;
  unsigned char b[4];
  while (in.read(reinterpret_cast<char*>(b), 4)) {
    corpus.push_back(static_cast<int>(static_cast<uint32_t>(b[0]) |
                                      (static_cast<uint32_t>(b[1]) << 8) |
                                      (static_cast<uint32_t>(b[2]) << 16) |
                                      (static_cast<uint32_t>(b[3]) << 24)));
  }
  if (in.gcount() != 0) throw IoError("corpus file truncated: " + path);
  return corpus;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  json arr = json::array();
  for (int i = 0; i < vocab.size(); ++i) {
    const char* cls = nullptr;
    switch (vocab.token_class(i)) {
      case TokenClass::Special: cls = "special"; break;
      case TokenClass::Word: cls = "word"; break;
      case TokenClass::NamePart: cls = "name"; break;
      case TokenClass::Date: cls = "date"; break;
      case TokenClass::Refusal: cls = "refusal"; break;
    }
    arr.push_back(json{{"t", vocab.word(i)}, {"c", cls}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << arr.dump(1) << "\n";
  if (!out) throw IoError("failed writing " + path);
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json arr = json::parse(in);
  Vocab vocab;
  for (size_t i = 0; i < arr.size(); ++i) {
    const std::string t = arr[i].at("t").get<std::string>();
    const std::string c = arr[i].at("c").get<std::string>();
    TokenClass cls = TokenClass::Word;
    if (c == "special") cls = TokenClass::Special;
    else if (c == "word") cls = TokenClass::Word;
    else if (c == "name") cls = TokenClass::NamePart;
    else if (c == "date") cls = TokenClass::Date;
    else if (c == "refusal") cls = TokenClass::Refusal;
    else throw IoError("unknown token class '" + c + "' in " + path);
    if (i < 3) {
      if (t != vocab.word(static_cast<int>(i)))
        throw IoError("vocab file does not start with the reserved special tokens: " + path);
      continue;
    }
    vocab.add(t, cls);
  }
  return vocab;
}

}  // namespace knowtrace::worldgen
