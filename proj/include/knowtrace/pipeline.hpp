// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/config.hpp"
#include "knowtrace/detection.hpp"
#include "knowtrace/refusal.hpp"
#include "knowtrace/taxonomy.hpp"

#include <string>
#include <vector>

namespace knowtrace::pipeline {

// Command implementations behind the CLI. Each writes its outputs plus a
// manifest atomically into `out_dir` and throws IoError (missing/corrupt
// inputs) or InvalidInput on failure.

void cmd_world(const config::PipelineConfig& cfg, const std::string& out_dir);
void cmd_train(const config::PipelineConfig& cfg, const std::string& world_dir,
               const std::string& out_dir);
void cmd_label(const config::PipelineConfig& cfg, const std::string& checkpoint_dir,
               const std::string& world_dir, const std::string& out_dir);
void cmd_trace(const config::PipelineConfig& cfg, const std::string& checkpoint_dir,
               const std::string& labeled_dir, const std::string& out_dir);
void cmd_analyze(const config::PipelineConfig& cfg, const std::string& checkpoint_dir,
                 const std::string& labeled_dir, const std::string& out_dir);
void cmd_detect(const config::PipelineConfig& cfg, const std::string& checkpoint_dir,
                const std::string& labeled_dir, detection::Setting setting,
                const std::string& out_dir);
void cmd_refuse(const config::PipelineConfig& cfg, const std::string& checkpoint_dir,
                const std::string& labeled_dir, refusal::RefusalSetting setting,
                const std::string& out_dir);

/// world -> train -> label -> trace -> analyze -> detect (all settings) ->
/// refuse (both settings), under one atomically-created directory.
void cmd_repro(const config::PipelineConfig& cfg, const std::string& out_dir);

// ---- labeled-dataset artifact ----

enum class Split { Holdout, Pool };

struct LabeledFile {
  std::vector<taxonomy::LabeledSample> samples;
  std::vector<Split> splits;  // parallel to samples
  double threshold = 0.0;
  std::string model_hash, world_hash;
  worldgen::Vocab vocab;
  std::vector<std::vector<int>> refusal_templates;

  std::vector<taxonomy::LabeledSample> of_split(Split s) const;
};

/// Per-category eval holdout size: max(holdout_min, frac*n), capped at 60%.
int holdout_count(int n, double fraction, int holdout_min);

/// Seeded per-category split assignment.
std::vector<Split> assign_splits(const std::vector<taxonomy::LabeledSample>& samples,
                                 double fraction, int holdout_min, uint64_t seed);

LabeledFile read_labeled_dir(const std::string& labeled_dir);

/// Equal-count popularity terciles per sample (0 = low, 1 = mid, 2 = high),
/// derived from the unique subjects present.
std::vector<int> sample_terciles(const std::vector<taxonomy::LabeledSample>& samples);

}  // namespace knowtrace::pipeline
