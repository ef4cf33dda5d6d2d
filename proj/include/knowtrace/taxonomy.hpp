// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/model.hpp"
#include "knowtrace/worldgen.hpp"

#include <string>
#include <vector>

namespace knowtrace::taxonomy {

enum class Category { FA, AH, UH };

const char* category_name(Category c);
Category category_from_name(const std::string& name);

/// How subject reliance is measured for labeling: mask subject->last
/// attention at every layer (default), or replace the subject tokens with the
/// mask token and compare the two prompts' outputs.
enum class RelianceMode { AttentionMask, MaskedPrompt };

struct KnowledgeLabel {
  Category category = Category::UH;
  bool correct = false;
  bool no_entity = false;  // prediction contained no recognizable entity
  double reliance_js = 0.0;
  double threshold_used = 0.0;
};

struct LabeledSample {
  int id = 0;          // triple index
  int subject_id = 0;  // owning subject
  worldgen::PromptInstance query;
  worldgen::Relation relation = worldgen::Relation::Father;
  std::vector<int> prediction;  // raw generated tokens
  double answer_probability = 0.0;  // model probability of its first generated token
  double popularity = 0.0;
  KnowledgeLabel label;
};

struct LabeledDataset {
  std::vector<LabeledSample> samples;
  double threshold = 0.0;
  int count_fa = 0, count_ah = 0, count_uh = 0;
  std::string model_hash;
  std::string world_hash;
};

struct CorrectnessVerdict {
  bool correct = false;
  bool no_entity = false;
};

/// Leading entity tokens of a prediction: the maximal initial run of
/// name-part tokens, or the first date token. Trailing punctuation/eot is
/// ignored.
std::vector<int> leading_entity(const std::vector<int>& prediction, const worldgen::Vocab& vocab);

/// Exact-match judging of the first predicted entity against the gold tokens.
CorrectnessVerdict judge_correctness(const std::vector<int>& prediction,
                                     const std::vector<int>& gold, const worldgen::Vocab& vocab);

/// JS divergence between the clean output distribution and the distribution
/// with subject->last attention masked at every layer (or with the subject
/// masked in the prompt, depending on mode).
double subject_reliance(const model::Params& params, const model::TokenSequence& prompt,
                        RelianceMode mode = RelianceMode::AttentionMask);

/// Labeling threshold: mean reliance over correct samples.
double compute_threshold(const std::vector<double>& fa_reliances);

/// Category from the (correctness, reliance, threshold) triple.
Category categorize(bool correct, double reliance, double threshold);

struct LabelSettings {
  RelianceMode mode = RelianceMode::AttentionMask;
  int max_new_tokens = 8;
};

/// Two-pass labeling: correctness + reliance everywhere, threshold from the
/// correct samples, then per-sample categories.
LabeledDataset label_dataset(const model::Params& params, const worldgen::World& world,
                             const std::vector<worldgen::PromptInstance>& queries,
                             const LabelSettings& settings = {});

}  // namespace knowtrace::taxonomy
