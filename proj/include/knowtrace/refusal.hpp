// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/model.hpp"
#include "knowtrace/taxonomy.hpp"
#include "knowtrace/training.hpp"
#include "knowtrace/worldgen.hpp"

#include <string>
#include <vector>

namespace knowtrace::refusal {

using taxonomy::Category;

enum class RefusalSetting { UHOnly, AHOnly };
const char* refusal_setting_name(RefusalSetting s);
RefusalSetting refusal_setting_from_name(const std::string& name);

struct RefusalConfig {
  int pairs_per_class = 1000;  // per half; downscaled to availability
  int eval_per_class = 200;
  model::FineTuneSchedule schedule;
  uint64_t seed = 0;
};

struct RefusalDataset {
  std::vector<model::TuningPair> pairs;
  std::vector<int> used_ids;  // labeled sample ids consumed for tuning
  double scale = 1.0;
};

/// Hallucination-half targets are refusal templates assigned round-robin;
/// the FA half keeps its gold answers.
RefusalDataset build_refusal_dataset(const std::vector<taxonomy::LabeledSample>& tuning_pool,
                                     const worldgen::World& world, RefusalSetting setting,
                                     const RefusalConfig& config);

/// True when the generated tokens start with any refusal template, token-exact.
bool is_refusal(const std::vector<int>& generated,
                const std::vector<std::vector<int>>& templates);

struct CategoryRatio {
  Category category = Category::FA;
  int refused = 0;
  int total = 0;
  double ratio = 0.0;
};

struct RefusalReport {
  RefusalSetting setting = RefusalSetting::UHOnly;
  std::vector<CategoryRatio> tuned;    // FA, AH, UH rows
  std::vector<CategoryRatio> untuned;  // same prompts through the base model
  double scale = 1.0;
  double tuning_loss = 0.0;
};

/// Fine-tune on the refusal dataset, then measure per-category refusal ratios
/// on held-out samples (and on the untuned baseline).
RefusalReport run_refusal_experiment(const model::Params& params,
                                     const std::vector<taxonomy::LabeledSample>& tuning_pool,
                                     const std::vector<taxonomy::LabeledSample>& eval_pool,
                                     const worldgen::World& world, RefusalSetting setting,
                                     const RefusalConfig& config);

}  // namespace knowtrace::refusal
