// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/taxonomy.hpp"

#include "knowtrace/checkpoint.hpp"
#include "knowtrace/numerics.hpp"
#include "knowtrace/threading.hpp"

#include <cmath>

namespace knowtrace::taxonomy {

using model::Params;
using model::TokenSequence;
using numerics::Distribution;
using worldgen::TokenClass;
using worldgen::Vocab;

const char* category_name(Category c) {
  switch (c) {
    case Category::FA: return "FA";
    case Category::AH: return "AH";
    case Category::UH: return "UH";
  }
  throw InvalidInput("bad category enum");
}

Category category_from_name(const std::string& name) {
  if (name == "FA") return Category::FA;
  if (name == "AH") return Category::AH;
  if (name == "UH") return Category::UH;
  throw InvalidInput("unknown category: '" + name + "'");
}

std::vector<int> leading_entity(const std::vector<int>& prediction, const Vocab& vocab) {
  std::vector<int> entity;
  for (int t : prediction) {
    const TokenClass cls = vocab.token_class(t);
    if (cls == TokenClass::NamePart) {
      entity.push_back(t);
      continue;
    }
    if (cls == TokenClass::Date && entity.empty()) {
      entity.push_back(t);
    }
    break;
  }
  return entity;
}

CorrectnessVerdict judge_correctness(const std::vector<int>& prediction,
                                     const std::vector<int>& gold, const Vocab& vocab) {
  require(!gold.empty(), "judge_correctness: gold answer is empty");
  CorrectnessVerdict verdict;
  const std::vector<int> entity = leading_entity(prediction, vocab);
  if (entity.empty()) {
    verdict.no_entity = true;
    verdict.correct = false;
    return verdict;
  }
  verdict.correct = (entity == gold);
  return verdict;
}

double subject_reliance(const Params& params, const TokenSequence& prompt, RelianceMode mode) {
  Distribution clean(model::next_distribution(params, prompt));
  if (mode == RelianceMode::AttentionMask) {
    model::AttentionBlockSpec block;
    for (int l = 1; l <= params.config.n_layers; ++l) block.layers.push_back(l);
    for (int p = prompt.subject_begin; p < prompt.subject_end; ++p) block.src.push_back(p);
    block.dst = prompt.last_position();
    model::Hooks hooks;
    hooks.blocks.push_back(std::move(block));
    Distribution masked(model::next_distribution(params, prompt, hooks));
    return numerics::js_divergence(clean, masked);
  }
  TokenSequence masked_prompt = prompt;
  for (int p = prompt.subject_begin; p < prompt.subject_end; ++p)
    masked_prompt.ids[static_cast<size_t>(p)] = Vocab::kMask;
  Distribution masked(model::next_distribution(params, masked_prompt));
  return numerics::js_divergence(clean, masked);
}

double compute_threshold(const std::vector<double>& fa_reliances) {
  require(!fa_reliances.empty(), "compute_threshold: no correct samples");
  double sum = 0.0;
  for (double r : fa_reliances) sum += r;
  return sum / static_cast<double>(fa_reliances.size());
}

Category categorize(bool correct, double reliance, double threshold) {
  if (correct) return Category::FA;
  return reliance >= threshold ? Category::AH : Category::UH;
}

LabeledDataset label_dataset(const Params& params, const worldgen::World& world,
                             const std::vector<worldgen::PromptInstance>& queries,
                             const LabelSettings& settings) {
  require(!queries.empty(), "label_dataset: no queries");
  LabeledDataset out;
  out.samples.resize(queries.size());
  out.model_hash = model::params_hash(params);
  out.world_hash = worldgen::world_hash(world);

  // pass 1: decode, judge, measure reliance
  parallel_for(queries.size(), [&](size_t i) {
    const auto& q = queries[i];
    LabeledSample sample;
    sample.id = q.triple_index;
    sample.subject_id = world.triples[static_cast<size_t>(q.triple_index)].subject_id;
    sample.query = q;
    sample.relation = world.triples[static_cast<size_t>(q.triple_index)].relation;
    sample.popularity = world.triples[static_cast<size_t>(q.triple_index)].popularity;

    TokenSequence prompt{q.tokens, q.subject_begin, q.subject_end};
    model::Trace trace = model::forward_traced(params, prompt);
    const int first = model::argmax_lowest<float>(trace.last_logits);
    sample.answer_probability = trace.last_distribution[first];
    sample.prediction = model::greedy_decode(params, prompt, settings.max_new_tokens, Vocab::kEot);

    const auto verdict = judge_correctness(sample.prediction, q.gold_tokens, world.vocab);
    sample.label.correct = verdict.correct;
    sample.label.no_entity = verdict.no_entity;
    sample.label.reliance_js = subject_reliance(params, prompt, settings.mode);
    out.samples[i] = std::move(sample);
  });

  // threshold from correct samples, then pass 2: categories
  std::vector<double> fa_reliances;
  for (const auto& s : out.samples) {
    if (s.label.correct) fa_reliances.push_back(s.label.reliance_js);
  }
  if (fa_reliances.empty())
    throw InvalidInput("label_dataset: zero correct samples; threshold undefined (train longer)");
  out.threshold = compute_threshold(fa_reliances);

  for (auto& s : out.samples) {
    s.label.threshold_used = out.threshold;
    s.label.category = categorize(s.label.correct, s.label.reliance_js, out.threshold);
    switch (s.label.category) {
      case Category::FA: ++out.count_fa; break;
      case Category::AH: ++out.count_ah; break;
      case Category::UH: ++out.count_uh; break;
    }
  }
  return out;
}

}  // namespace knowtrace::taxonomy
