// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/model.hpp"
#include "knowtrace/numerics.hpp"
#include "knowtrace/taxonomy.hpp"

#include <string>
#include <vector>

namespace knowtrace::detection {

using taxonomy::Category;

enum class FeatureKind {
  SubjectHidden,      // last subject token, three consecutive layers
  AttentionFlow,      // last->subject attention weight per layer, heads summed
  LastTokenHidden,    // final-layer last-token state
  AnswerProbability,  // scalar: model probability of its own first answer token
  SubjectPopularity,  // scalar: stored subject popularity
};
constexpr int kNumFeatureKinds = 5;

const char* feature_kind_name(FeatureKind k);
bool is_scalar_kind(FeatureKind k);

enum class Setting { AHOnly, UHOnly, Full };
const char* setting_name(Setting s);
Setting setting_from_name(const std::string& name);

/// All feature families for one sample, from a single traced forward.
struct SampleFeatures {
  int id = 0;
  Category category = Category::UH;
  VecD subject_hidden;     // 3 * d_model
  VecD attention_flow;     // n_layers
  VecD last_token_hidden;  // d_model
  double answer_probability = 0.0;
  double popularity = 0.0;

  VecD vector_for(FeatureKind kind) const;
  double scalar_for(FeatureKind kind) const;
};

/// Extract one kind from an existing trace (hand-checkable path).
VecD extract_feature(const model::Params& params, const model::Trace& trace,
                     const taxonomy::LabeledSample& sample, FeatureKind kind, int analysis_layer,
                     bool last_token_postnorm);

SampleFeatures extract_features(const model::Params& params, const taxonomy::LabeledSample& sample,
                                int analysis_layer, bool last_token_postnorm);

std::vector<SampleFeatures> extract_features_bulk(const model::Params& params,
                                                  const std::vector<taxonomy::LabeledSample>& pool,
                                                  int analysis_layer, bool last_token_postnorm);

/// Black-box scalar score, oriented so higher = more FA-like.
double score_blackbox(const SampleFeatures& sample, FeatureKind kind);

struct DetectionSettings {
  int train_per_class = 1000;
  int test_per_class = 200;
  int n_seeds = 5;
  double probe_l2 = 0.01;
  double probe_step = 0.1;
  int probe_epochs = 1000;
  int min_train_per_class = 8;
  int min_test_per_class = 4;
  uint64_t seed = 0;
  bool shuffle_labels = false;  // permutation-null control
};

struct KindResult {
  FeatureKind kind = FeatureKind::SubjectHidden;
  std::vector<double> per_seed_auroc;
  double mean = 0.0;
  double stddev = 0.0;  // sample std over seeds
  // Full setting only: AUROC restricted to FA vs the UH test slice.
  std::vector<double> per_seed_uh_slice;
  double uh_slice_mean = 0.0;
};

struct DetectionReport {
  Setting setting = Setting::UHOnly;
  std::vector<KindResult> results;
  double scale_factor = 1.0;  // applied when the pool is smaller than requested
  int train_per_class = 0;
  int test_per_class = 0;
  double full_mix_ah_fraction = 0.0;  // realized AH share of the hallucination half
};

/// Per-seed split / fit / score / AUROC over held-out test samples.
/// Labels: 1 = FA, 0 = hallucination; scores oriented FA-high.
DetectionReport evaluate_detection(const std::vector<SampleFeatures>& pool, Setting setting,
                                   const std::vector<FeatureKind>& kinds,
                                   const DetectionSettings& settings);

/// extract_features_bulk + evaluate_detection.
DetectionReport run_detection(const model::Params& params,
                              const std::vector<taxonomy::LabeledSample>& pool, Setting setting,
                              const std::vector<FeatureKind>& kinds,
                              const DetectionSettings& settings, int analysis_layer,
                              bool last_token_postnorm);

std::vector<FeatureKind> all_feature_kinds();

}  // namespace knowtrace::detection
