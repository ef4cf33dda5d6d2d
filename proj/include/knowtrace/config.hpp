// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/detection.hpp"
#include "knowtrace/interventions.hpp"
#include "knowtrace/model.hpp"
#include "knowtrace/refusal.hpp"
#include "knowtrace/taxonomy.hpp"
#include "knowtrace/training.hpp"
#include "knowtrace/worldgen.hpp"

#include <map>
#include <optional>
#include <string>

namespace knowtrace::config {

/// Flat INI-style file: [section] headers, key = value lines, # comments.
std::map<std::string, std::string> parse_ini(const std::string& text);
std::map<std::string, std::string> parse_ini_file(const std::string& path);

struct PipelineConfig {
  uint64_t seed = 1;

  worldgen::WorldConfig world;
  model::ModelConfig model;
  model::TrainSchedule train;
  interventions::InterventionSettings interventions;
  int sweep_per_group = 120;

  taxonomy::LabelSettings label;

  double energy_fraction = 0.5;
  int max_cosine_pairs = 500;
  int entropy_bins = 32;
  double holdout_fraction = 0.25;
  int holdout_min = 100;
  int bootstrap_resamples = 200;

  detection::DetectionSettings detect;
  bool last_token_postnorm = true;

  refusal::RefusalConfig refusal;

  /// All derived seeds flow from `seed` through named substreams.
  void propagate_seed();
};

PipelineConfig config_from_map(const std::map<std::string, std::string>& kv);
PipelineConfig load_config(const std::string& path);
PipelineConfig default_config();

/// Deterministic serialization of the effective configuration.
std::map<std::string, std::string> config_to_map(const PipelineConfig& cfg);

}  // namespace knowtrace::config
