// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "knowtrace/rng.hpp"
#include "knowtrace/taxonomy.hpp"
#include "knowtrace/training.hpp"
#include "knowtrace/worldgen.hpp"

using namespace knowtrace;
using namespace knowtrace::taxonomy;
using knowtrace::worldgen::TokenClass;
using knowtrace::worldgen::Vocab;

namespace {

Vocab test_vocab() {
  Vocab v;
  v.add("The", TokenClass::Word);
  v.add("is", TokenClass::Word);
  v.add(".", TokenClass::Word);
  v.add("Kera", TokenClass::NamePart);
  v.add("Venda", TokenClass::NamePart);
  v.add("Tol", TokenClass::NamePart);
  v.add("04-Apr-1202", TokenClass::Date);
  return v;
}

}  // namespace

TEST_CASE("leading entity extraction and judging") {
  Vocab v = test_vocab();
  const int kera = v.id("Kera"), venda = v.id("Venda"), tol = v.id("Tol");
  const int period = v.id("."), date = v.id("04-Apr-1202");

  std::vector<int> gold = {kera, venda};
  CHECK(judge_correctness({kera, venda}, gold, v).correct);
  CHECK(judge_correctness({kera, venda, period, Vocab::kEot}, gold, v).correct);  // trailing punct
  CHECK_FALSE(judge_correctness({tol, venda}, gold, v).correct);                  // wrong entity
  CHECK_FALSE(judge_correctness({kera, venda, tol}, gold, v).correct);  // longer name run
  CHECK_FALSE(judge_correctness({kera}, gold, v).correct);              // shorter name run

  // date answers are single tokens
  CHECK(judge_correctness({date, period}, {date}, v).correct);
  CHECK_FALSE(judge_correctness({kera}, {date}, v).correct);

  CorrectnessVerdict empty = judge_correctness({}, gold, v);
  CHECK_FALSE(empty.correct);
  CHECK(empty.no_entity);
  CorrectnessVerdict punct_only = judge_correctness({period, Vocab::kEot}, gold, v);
  CHECK(punct_only.no_entity);

  CHECK_THROWS_AS(judge_correctness({kera}, {}, v), InvalidInput);
}

TEST_CASE("threshold is the mean of correct-sample reliances") {
  CHECK(compute_threshold({0.4, 0.4, 0.4}) == doctest::Approx(0.4));
  CHECK(compute_threshold({0.2, 0.4}) == doctest::Approx(0.3));
  CHECK_THROWS_AS(compute_threshold({}), InvalidInput);

  // streaming-mean oracle
  Rng rng(3, "thresh");
  std::vector<double> values;
  double running = 0.0;
  for (int i = 1; i <= 50; ++i) {
    const double v = rng.uniform();
    values.push_back(v);
    running += (v - running) / i;
    CHECK(compute_threshold(values) == doctest::Approx(running).epsilon(1e-12));
  }
}

TEST_CASE("categorize follows the label invariant") {
  CHECK(categorize(true, 0.0, 0.5) == Category::FA);
  CHECK(categorize(true, 0.9, 0.5) == Category::FA);
  CHECK(categorize(false, 0.6, 0.5) == Category::AH);
  CHECK(categorize(false, 0.5, 0.5) == Category::AH);  // >= threshold
  CHECK(categorize(false, 0.4, 0.5) == Category::UH);
}

TEST_CASE("raising the threshold only moves samples AH -> UH") {
  Rng rng(5, "mono");
  for (int k = 0; k < 200; ++k) {
    const bool correct = rng.uniform() < 0.3;
    const double reliance = rng.uniform();
    double t1 = rng.uniform();
    double t2 = rng.uniform();
    if (t1 > t2) std::swap(t1, t2);
    const Category c1 = categorize(correct, reliance, t1);
    const Category c2 = categorize(correct, reliance, t2);
    if (c1 != c2) {
      CHECK(c1 == Category::AH);
      CHECK(c2 == Category::UH);
    }
  }
}

TEST_CASE("subject reliance is zero when attention output is disconnected") {
  model::ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.max_seq_len = 8;
  cfg.seed = 11;
  model::Params params = model::init_params<float>(cfg);
  for (auto& l : params.layers) l.wo.setZero();  // attention writes nothing

  model::TokenSequence prompt;
  prompt.ids = {4, 5, 6, 7};
  prompt.subject_begin = 1;
  prompt.subject_end = 3;
  const double r1 = subject_reliance(params, prompt);
  CHECK(r1 < 0.01);
  CHECK(r1 == subject_reliance(params, prompt));  // exact determinism
}

TEST_CASE("masked-prompt reliance mode runs and differs from clean") {
  model::ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.max_seq_len = 8;
  cfg.seed = 13;
  model::Params params = model::init_params<float>(cfg);
  model::TokenSequence prompt;
  prompt.ids = {4, 5, 6, 7};
  prompt.subject_begin = 1;
  prompt.subject_end = 3;
  const double r = subject_reliance(params, prompt, RelianceMode::MaskedPrompt);
  CHECK(r >= 0.0);
  CHECK(r <= 1.0);
}

TEST_CASE("label_dataset partitions a small trained world") {
  worldgen::WorldConfig wcfg;
  wcfg.n_subjects = 8;
  wcfg.popularity_max = 60.0;
  wcfg.name_part_pool = 12;
  wcfg.person_pool = 8;
  wcfg.date_pool = 10;
  wcfg.corpus_budget = 100000;
  wcfg.vocab_size = 256;
  wcfg.seed = 3;
  worldgen::World world = worldgen::generate_world(wcfg);
  std::vector<int> corpus = worldgen::render_corpus(world);

  model::ModelConfig mcfg;
  mcfg.vocab_size = 256;
  mcfg.d_model = 32;
  mcfg.n_layers = 2;
  mcfg.n_heads = 2;
  mcfg.d_mlp = 64;
  mcfg.max_seq_len = 32;
  mcfg.seed = 5;
  model::TrainSchedule schedule;
  schedule.steps = 300;
  schedule.batch_size = 8;
  schedule.seq_len = 24;
  schedule.learning_rate = 2e-3;
  schedule.warmup_steps = 10;
  schedule.seed = 7;
  model::Params params = model::train<float>(mcfg, corpus, schedule);

  std::vector<worldgen::PromptInstance> queries = worldgen::make_queries(world);
  LabeledDataset labeled = label_dataset(params, world, queries);

  CHECK(labeled.samples.size() == queries.size());
  CHECK(labeled.count_fa + labeled.count_ah + labeled.count_uh ==
        static_cast<int>(queries.size()));
  CHECK(labeled.count_fa > 0);
  for (const auto& s : labeled.samples) {
    if (s.label.category == Category::FA) CHECK(s.label.correct);
    if (s.label.correct) CHECK(s.label.category == Category::FA);
    if (s.label.category == Category::AH) CHECK(s.label.reliance_js >= labeled.threshold);
    if (s.label.category == Category::UH) CHECK(s.label.reliance_js < labeled.threshold);
    CHECK(s.label.threshold_used == labeled.threshold);
  }

  // determinism: identical labels and reliances on a second pass
  LabeledDataset again = label_dataset(params, world, queries);
  CHECK(again.threshold == labeled.threshold);
  for (size_t i = 0; i < labeled.samples.size(); ++i) {
    CHECK(again.samples[i].label.reliance_js == labeled.samples[i].label.reliance_js);
    CHECK(again.samples[i].label.category == labeled.samples[i].label.category);
  }
}

TEST_CASE("label_dataset reports zero correct samples as an error") {
  worldgen::WorldConfig wcfg;
  wcfg.n_subjects = 2;
  wcfg.name_part_pool = 8;
  wcfg.person_pool = 4;
  wcfg.date_pool = 4;
  wcfg.vocab_size = 128;
  wcfg.seed = 9;
  worldgen::World world = worldgen::generate_world(wcfg);
  model::ModelConfig mcfg;
  mcfg.vocab_size = 128;
  mcfg.d_model = 8;
  mcfg.n_layers = 1;
  mcfg.n_heads = 1;
  mcfg.d_mlp = 16;
  mcfg.max_seq_len = 16;
  mcfg.seed = 1;
  // force every decode onto a non-entity token so nothing is correct
  model::Params params = model::init_params<float>(mcfg);
  params.unembed.setZero();
  params.unembed(0, world.vocab.id("The")) = 1.0f;
  std::vector<worldgen::PromptInstance> queries = worldgen::make_queries(world);
  CHECK_THROWS_WITH_AS(label_dataset(params, world, queries), doctest::Contains("threshold"),
                       InvalidInput);
}
