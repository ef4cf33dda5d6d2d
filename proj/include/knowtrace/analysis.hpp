// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/model.hpp"
#include "knowtrace/numerics.hpp"
#include "knowtrace/taxonomy.hpp"
#include "knowtrace/worldgen.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace knowtrace::analysis {

using taxonomy::Category;

// Everything the hidden-state analyses need from one sample, extracted from a
// single traced forward so traces never have to be held in bulk.
struct SampleStats {
  int id = 0;
  Category category = Category::UH;
  double popularity = 0.0;
  worldgen::Relation relation = worldgen::Relation::Father;
  VecD subject_norm;                  // per layer: mean subject-token L2 norm
  VecD attn_contrib_norm;             // per layer: Eq-style subject-to-last contribution norm
  std::vector<MatF> subject_mlp_in;   // per layer: subject tokens x d_mlp (pre-W_down input)
  MatF last_hidden;                   // n_layers x d_model: last-token residual per layer
  double output_entropy = 0.0;        // base-2 entropy of the output distribution
};

SampleStats extract_sample_stats(const model::Params& params,
                                 const taxonomy::LabeledSample& sample);

std::vector<SampleStats> extract_all_stats(const model::Params& params,
                                           const std::vector<taxonomy::LabeledSample>& samples);

struct LayerCurve {
  std::string metric;
  std::string group;
  VecD values;
  int count = 0;
};

/// Per-layer mean subject-token norm per category plus AH/FA and UH/FA
/// ratio-of-means curves.
struct NormCurves {
  LayerCurve fa, ah, uh;
  LayerCurve ah_over_fa, uh_over_fa;
};
NormCurves subject_norm_curves(const std::vector<SampleStats>& stats);

/// Layer with the largest UH norm shift |1 - UH/FA|, clipped to
/// [2, n_layers - 1] so a three-layer neighborhood always exists.
int select_analysis_layer(const NormCurves& curves);

/// Mean subspace-overlap ratio per category at one layer, using the top
/// singular subspace of that layer's down-projection input side, plus
/// relative ratios against FA.
struct OverlapComparison {
  int layer = 0;
  double energy_fraction = 0.5;
  double mean_fa = 0.0, mean_ah = 0.0, mean_uh = 0.0;
  double ah_over_fa = 0.0, uh_over_fa = 0.0;
};
OverlapComparison overlap_comparison(const model::Params& params,
                                     const std::vector<SampleStats>& stats, int layer,
                                     double energy_fraction);

/// Per-bin category shares (low/mid/high popularity terciles).
struct PopularityBreakdown {
  std::array<std::array<double, 3>, 3> share{};  // [bin][FA, AH, UH]
  std::array<int, 3> count{};
  std::array<bool, 3> empty_bin{};
};
PopularityBreakdown popularity_breakdown(const std::vector<taxonomy::LabeledSample>& samples,
                                         const std::vector<int>& sample_terciles);

/// Per-layer mean subject-to-last attention contribution norm per category.
std::vector<LayerCurve> attention_flow_curves(const std::vector<SampleStats>& stats);

/// Per-layer mean pairwise cosine of last-token states within each category.
/// Pairs are formed within identical templates (same relation) only and
/// subsampled to at most max_pairs per layer, seeded.
std::vector<LayerCurve> last_token_similarity_curves(const std::vector<SampleStats>& stats,
                                                     int max_pairs, uint64_t seed);

struct GroupedHistogram {
  VecD edges;  // n_bins + 1 edges
  std::map<std::string, std::vector<int>> counts;
};
/// Histogram of output entropies per category over fixed bin edges.
GroupedHistogram entropy_histogram(const std::vector<SampleStats>& stats, double max_entropy,
                                   int n_bins);

/// Mean silhouette of a binary partition (euclidean).
double silhouette(const MatD& points, const std::vector<int>& labels);

struct ProjectionResult {
  int layer = 0;
  MatD coords;  // n x 2
  std::vector<Category> labels;
  double silhouette_uh_vs_rest = 0.0;
  double silhouette_ah_vs_fa = 0.0;
};
/// PCA 2-D export of last-token states at one layer, with separation scores.
ProjectionResult projection_export(const std::vector<SampleStats>& stats, int layer);

/// Fraction of seeded bootstrap resamples in which mean(a) > mean(b).
double bootstrap_greater_fraction(const std::vector<double>& a, const std::vector<double>& b,
                                  int resamples, uint64_t seed);

/// Layer thirds for shape checks: 0 = early, 1 = mid, 2 = late.
int layer_third(int layer, int n_layers);

}  // namespace knowtrace::analysis
