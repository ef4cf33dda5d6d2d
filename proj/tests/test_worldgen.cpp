// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "knowtrace/rng.hpp"
#include "knowtrace/worldgen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

using namespace knowtrace;
using namespace knowtrace::worldgen;

namespace {

WorldConfig small_config() {
  WorldConfig cfg;
  cfg.n_subjects = 60;
  cfg.popularity_max = 120.0;
  cfg.name_part_pool = 40;
  cfg.person_pool = 40;
  cfg.date_pool = 50;
  cfg.corpus_budget = 200000;
  cfg.vocab_size = 1024;
  cfg.seed = 42;
  return cfg;
}

// Count gold/confounder sentence occurrences by scanning eot-separated
// sentences in the emitted stream.
struct CorpusCounts {
  std::map<std::vector<int>, long> sentences;
};

CorpusCounts scan_corpus(const std::vector<int>& corpus) {
  CorpusCounts counts;
  std::vector<int> current;
  for (int t : corpus) {
    current.push_back(t);
    if (t == Vocab::kEot) {
      counts.sentences[current] += 1;
      current.clear();
    }
  }
  return counts;
}

std::vector<int> gold_sentence(const World& world, const KnowledgeTriple& t) {
  std::vector<int> s = world.vocab.encode(
      prompt_template(t.relation).substr(0, prompt_template(t.relation).find(" [subject]")));
  s.insert(s.end(), t.subject_tokens.begin(), t.subject_tokens.end());
  s.push_back(world.vocab.id("is"));
  s.insert(s.end(), t.object_tokens.begin(), t.object_tokens.end());
  s.push_back(world.vocab.id("."));
  s.push_back(Vocab::kEot);
  return s;
}

std::vector<int> shortcut_sentence(const World& world, const KnowledgeTriple& t) {
  const std::string tpl = shortcut_template(t.relation);
  std::vector<int> s = world.vocab.encode(tpl.substr(0, tpl.find(" [subject]")));
  s.insert(s.end(), t.subject_tokens.begin(), t.subject_tokens.end());
  s.push_back(world.vocab.id("is"));
  s.insert(s.end(), t.confounder->object_tokens.begin(), t.confounder->object_tokens.end());
  s.push_back(world.vocab.id("."));
  s.push_back(Vocab::kEot);
  return s;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> order(v.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < order.size()) {
      size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double mid = 0.5 * (i + j) + 1.0;
      for (size_t k = i; k <= j; ++k) r[order[k]] = mid;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

}  // namespace

TEST_CASE("one subject yields exactly four triples") {
  WorldConfig cfg = small_config();
  cfg.n_subjects = 1;
  World world = generate_world(cfg);
  CHECK(world.triples.size() == 4);
  std::set<Relation> relations;
  for (const auto& t : world.triples) relations.insert(t.relation);
  CHECK(relations.size() == 4);
}

TEST_CASE("world generation is deterministic per seed") {
  WorldConfig cfg = small_config();
  World a = generate_world(cfg);
  World b = generate_world(cfg);
  CHECK(world_hash(a) == world_hash(b));
  cfg.seed = 43;
  World c = generate_world(cfg);
  CHECK(world_hash(a) != world_hash(c));
}

TEST_CASE("confounders land on the configured fraction of top-tercile triples") {
  WorldConfig cfg = small_config();
  World world = generate_world(cfg);
  const std::vector<int> terciles = world.subject_terciles();
  long top_triples = 0, confounded = 0, confounded_elsewhere = 0;
  for (const auto& t : world.triples) {
    if (terciles[static_cast<size_t>(t.subject_id)] == 2) {
      ++top_triples;
      confounded += t.confounder ? 1 : 0;
    } else if (t.confounder) {
      ++confounded_elsewhere;
    }
  }
  const double fraction = static_cast<double>(confounded) / static_cast<double>(top_triples);
  CHECK(fraction >= 0.28);
  CHECK(fraction <= 0.32);
  CHECK(confounded_elsewhere == 0);
  for (const auto& t : world.triples) {
    if (t.confounder) CHECK(t.confounder->object_surface != t.object_surface);
  }
}

TEST_CASE("corpus counts track popularity and dominate confounders") {
  WorldConfig cfg = small_config();
  World world = generate_world(cfg);
  std::vector<int> corpus = render_corpus(world);
  CHECK(static_cast<long>(corpus.size()) <= cfg.corpus_budget);
  CorpusCounts counts = scan_corpus(corpus);

  std::vector<double> pops, golds;
  const std::vector<int> terciles = world.subject_terciles();
  for (const auto& t : world.triples) {
    auto it = counts.sentences.find(gold_sentence(world, t));
    const long gold = it == counts.sentences.end() ? 0 : it->second;
    CHECK(gold >= 1);  // every fact placed at least once
    pops.push_back(t.popularity);
    golds.push_back(static_cast<double>(gold));
    if (terciles[static_cast<size_t>(t.subject_id)] == 0) CHECK(gold <= 1);
    if (t.confounder) {
      auto ct = counts.sentences.find(shortcut_sentence(world, t));
      const long conf = ct == counts.sentences.end() ? 0 : ct->second;
      CHECK(conf >= gold);
    }
  }
  CHECK(spearman(pops, golds) > 0.95);
}

TEST_CASE("a one-fact world repeats its sentence") {
  WorldConfig cfg = small_config();
  cfg.n_subjects = 1;
  World world = generate_world(cfg);
  world.triples.resize(1);
  world.triples[0].popularity = 50.0;
  world.triples[0].confounder.reset();
  std::vector<int> corpus = render_corpus(world);
  CorpusCounts counts = scan_corpus(corpus);
  CHECK(counts.sentences.size() == 1);
  CHECK(counts.sentences.begin()->second == 50);
}

TEST_CASE("budget too small to place every fact errors with the shortfall") {
  WorldConfig cfg = small_config();
  cfg.corpus_budget = 50;
  World world = generate_world(cfg);
  world.config.corpus_budget = 50;
  CHECK_THROWS_WITH_AS(render_corpus(world), doctest::Contains("shortfall"), InvalidInput);
}

TEST_CASE("queries follow the relation templates exactly") {
  WorldConfig cfg = small_config();
  cfg.n_subjects = 2;
  World world = generate_world(cfg);
  std::vector<PromptInstance> queries = make_queries(world);
  REQUIRE(queries.size() == world.triples.size());
  for (const auto& q : queries) {
    const KnowledgeTriple& t = world.triples[static_cast<size_t>(q.triple_index)];
    const std::string rendered = world.vocab.decode(q.tokens);
    std::string expect = prompt_template(t.relation);
    const std::string placeholder = "[subject]";
    expect.replace(expect.find(placeholder), placeholder.size(), t.subject_surface);
    CHECK(rendered == expect);

    std::vector<int> span(q.tokens.begin() + q.subject_begin, q.tokens.begin() + q.subject_end);
    CHECK(world.vocab.decode(span) == t.subject_surface);
    CHECK(q.gold_tokens == t.object_tokens);
  }
  // spot-check the two template shapes
  CHECK(prompt_template(Relation::Father) == "The name of the father of [subject] is");
  CHECK(prompt_template(Relation::DateOfBirth) == "The birth date of [subject] is");
}

TEST_CASE("triples JSONL round-trips") {
  WorldConfig cfg = small_config();
  World world = generate_world(cfg);
  const std::string path = "triples_roundtrip.jsonl";
  export_triples_jsonl(world, path);
  LoadResult loaded = load_triples_jsonl(path);
  REQUIRE(loaded.triples.size() == world.triples.size());
  World rebuilt = build_world_from_triples(std::move(loaded.triples), cfg);
  CHECK(world_hash(rebuilt) == world_hash(world));
  CHECK(rebuilt.vocab.size() == world.vocab.size());
  for (size_t i = 0; i < world.triples.size(); ++i) {
    CHECK(rebuilt.triples[i].subject_tokens == world.triples[i].subject_tokens);
    CHECK(rebuilt.triples[i].object_tokens == world.triples[i].object_tokens);
    CHECK(rebuilt.triples[i].popularity == world.triples[i].popularity);
  }
  std::filesystem::remove(path);
}

TEST_CASE("malformed JSONL lines report their line number") {
  const std::string path = "triples_bad.jsonl";
  {
    std::ofstream f(path);
    f << R"({"subject":"A B","relation":"father","object":"C D","popularity":1.0,"confounder":null})"
      << "\n";
    f << R"({"subject":"A B","relation":"father","popularity":1.0})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_triples_jsonl(path), doctest::Contains(":2"), IoError);
  {
    std::ofstream f(path);
    f << R"({"subject":"A B","relation":"uncle","object":"C D","popularity":1.0})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_triples_jsonl(path), doctest::Contains("unknown relation"), IoError);
  {
    std::ofstream f(path);
    f << R"({"subject":"A B","relation":"father","object":"C D"})" << "\n";
  }
  LoadResult r = load_triples_jsonl(path);
  CHECK(r.triples[0].popularity == 0.0);
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("popularity") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("vocabulary overflow is rejected") {
  WorldConfig cfg = small_config();
  cfg.vocab_size = 30;
  CHECK_THROWS_WITH_AS(generate_world(cfg), doctest::Contains("overflow"), InvalidInput);
}

TEST_CASE("popularity terciles partition the subjects") {
  WorldConfig cfg = small_config();
  World world = generate_world(cfg);
  const std::vector<int> terciles = world.subject_terciles();
  std::array<int, 3> counts{};
  for (int t : terciles) counts[static_cast<size_t>(t)] += 1;
  CHECK(counts[0] == 20);
  CHECK(counts[1] == 20);
  CHECK(counts[2] == 20);
}

TEST_CASE("corpus file round-trips") {
  std::vector<int> corpus = {1, 2, 3, 4095, 0, 7};
  const std::string path = "corpus_roundtrip.bin";
  save_corpus(corpus, path);
  CHECK(load_corpus(path) == corpus);
  std::filesystem::remove(path);
}

TEST_CASE("vocab file round-trips with classes") {
  WorldConfig cfg = small_config();
  cfg.n_subjects = 3;
  World world = generate_world(cfg);
  const std::string path = "vocab_roundtrip.json";
  save_vocab(world.vocab, path);
  Vocab loaded = load_vocab(path);
  REQUIRE(loaded.size() == world.vocab.size());
  for (int i = 0; i < loaded.size(); ++i) {
    CHECK(loaded.word(i) == world.vocab.word(i));
    CHECK(loaded.token_class(i) == world.vocab.token_class(i));
  }
  std::filesystem::remove(path);
}

TEST_CASE("refusal templates are reserved and absent from the corpus") {
  WorldConfig cfg = small_config();
  World world = generate_world(cfg);
  REQUIRE(world.refusal_templates.size() == static_cast<size_t>(cfg.n_refusal_templates));
  std::set<std::vector<int>> distinct(world.refusal_templates.begin(),
                                      world.refusal_templates.end());
  CHECK(distinct.size() == world.refusal_templates.size());

  std::set<int> reserved;
  for (const auto& tpl : world.refusal_templates)
    for (int t : tpl) {
      CHECK(world.vocab.token_class(t) == TokenClass::Refusal);
      reserved.insert(t);
    }
  std::vector<int> corpus = render_corpus(world);
  for (int t : corpus) CHECK(reserved.count(t) == 0);
}
