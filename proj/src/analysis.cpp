// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/analysis.hpp"

#include "knowtrace/interventions.hpp"
#include "knowtrace/rng.hpp"
#include "knowtrace/threading.hpp"

#include <algorithm>
#include <cmath>

namespace knowtrace::analysis {

using model::Params;
using model::TokenSequence;
using taxonomy::LabeledSample;

SampleStats extract_sample_stats(const Params& params, const LabeledSample& sample) {
  SampleStats stats;
  stats.id = sample.id;
  stats.category = sample.label.category;
  stats.popularity = sample.popularity;

  TokenSequence prompt{sample.query.tokens, sample.query.subject_begin, sample.query.subject_end};
  model::Trace trace = model::forward_traced(params, prompt);
  const int L = trace.n_layers();
  const int last = prompt.last_position();
  const int n_subj = prompt.subject_end - prompt.subject_begin;
  require(n_subj > 0, "sample has no subject span");

  stats.subject_norm.resize(L);
  stats.attn_contrib_norm.resize(L);
  stats.subject_mlp_in.reserve(static_cast<size_t>(L));
  stats.last_hidden.resize(L, params.config.d_model);
  for (int l = 1; l <= L; ++l) {
    double acc = 0.0;
    for (int p = prompt.subject_begin; p < prompt.subject_end; ++p)
      acc += static_cast<double>(trace.hidden[static_cast<size_t>(l)].row(p).norm());
    stats.subject_norm[l - 1] = acc / n_subj;
    stats.attn_contrib_norm[l - 1] =
        interventions::attention_contribution(params, trace, prompt, l).second;
    MatF rows(n_subj, params.config.d_mlp);
    for (int p = prompt.subject_begin; p < prompt.subject_end; ++p)
      rows.row(p - prompt.subject_begin) = trace.mlp_in[static_cast<size_t>(l - 1)].row(p);
    stats.subject_mlp_in.push_back(std::move(rows));
    stats.last_hidden.row(l - 1) = trace.hidden[static_cast<size_t>(l)].row(last);
  }
  stats.output_entropy = numerics::entropy(numerics::Distribution(trace.last_distribution));
  return stats;
}

std::vector<SampleStats> extract_all_stats(const Params& params,
                                           const std::vector<LabeledSample>& samples) {
  std::vector<SampleStats> stats(samples.size());
  parallel_for(samples.size(), [&](size_t i) {
    stats[i] = extract_sample_stats(params, samples[i]);
    stats[i].relation = samples[i].relation;
  });
  return stats;
}

namespace {

std::vector<const SampleStats*> of_category(const std::vector<SampleStats>& stats, Category c) {
  std::vector<const SampleStats*> out;
  for (const auto& s : stats)
    if (s.category == c) out.push_back(&s);
  return out;
}

VecD mean_curve(const std::vector<const SampleStats*>& group, const VecD SampleStats::*field) {
  require(!group.empty(), "analysis group is empty");
  VecD acc = VecD::Zero((group.front()->*field).size());
  for (const auto* s : group) acc += s->*field;
  return acc / static_cast<double>(group.size());
}

}  // namespace

NormCurves subject_norm_curves(const std::vector<SampleStats>& stats) {
  auto fa = of_category(stats, Category::FA);
  auto ah = of_category(stats, Category::AH);
  auto uh = of_category(stats, Category::UH);
  require(!fa.empty() && !ah.empty() && !uh.empty(),
          "subject_norm_curves: every category must be non-empty");
  NormCurves curves;
  curves.fa = {"subject_norm", "FA", mean_curve(fa, &SampleStats::subject_norm),
               static_cast<int>(fa.size())};
  curves.ah = {"subject_norm", "AH", mean_curve(ah, &SampleStats::subject_norm),
               static_cast<int>(ah.size())};
  curves.uh = {"subject_norm", "UH", mean_curve(uh, &SampleStats::subject_norm),
               static_cast<int>(uh.size())};
  curves.ah_over_fa = {"subject_norm_ratio", "AH/FA",
                       curves.ah.values.cwiseQuotient(curves.fa.values),
                       static_cast<int>(ah.size())};
  curves.uh_over_fa = {"subject_norm_ratio", "UH/FA",
                       curves.uh.values.cwiseQuotient(curves.fa.values),
                       static_cast<int>(uh.size())};
  return curves;
}

int select_analysis_layer(const NormCurves& curves) {
  const int L = static_cast<int>(curves.uh_over_fa.values.size());
  int best = 2;
  double best_shift = -1.0;
  for (int l = 2; l <= std::max(2, L - 1); ++l) {
    const double shift = std::abs(1.0 - curves.uh_over_fa.values[l - 1]);
    if (shift > best_shift) {
      best_shift = shift;
      best = l;
    }
  }
  return std::min(best, std::max(2, L - 1));
}

OverlapComparison overlap_comparison(const Params& params, const std::vector<SampleStats>& stats,
                                     int layer, double energy_fraction) {
  require(layer >= 1 && layer <= params.config.n_layers, "overlap_comparison: layer out of range");
  // Input-side singular basis of the down-projection. Stored as
  // (d_mlp x d_model) acting on row vectors, so the input side is the right
  // side of its transpose.
  const MatF& w_down = params.layers[static_cast<size_t>(layer - 1)].w_down;
  MatD w = w_down.transpose().cast<double>();
  numerics::OrthonormalBasis basis = numerics::top_singular_subspace(w, energy_fraction);

  auto group_mean = [&](Category c) {
    auto group = of_category(stats, c);
    require(!group.empty(), "overlap_comparison: empty category group");
    double acc = 0.0;
    for (const auto* s : group) {
      const MatF& rows = s->subject_mlp_in[static_cast<size_t>(layer - 1)];
      double sample_acc = 0.0;
      for (Eigen::Index r = 0; r < rows.rows(); ++r) {
        VecD x = rows.row(r).transpose().cast<double>();
        sample_acc += numerics::subspace_overlap(x, basis);
      }
      acc += sample_acc / static_cast<double>(rows.rows());
    }
    return acc / static_cast<double>(group.size());
  };

  OverlapComparison cmp;
  cmp.layer = layer;
  cmp.energy_fraction = energy_fraction;
  cmp.mean_fa = group_mean(Category::FA);
  cmp.mean_ah = group_mean(Category::AH);
  cmp.mean_uh = group_mean(Category::UH);
  cmp.ah_over_fa = cmp.mean_ah / cmp.mean_fa;
  cmp.uh_over_fa = cmp.mean_uh / cmp.mean_fa;
  return cmp;
}

PopularityBreakdown popularity_breakdown(const std::vector<LabeledSample>& samples,
                                         const std::vector<int>& sample_terciles) {
  require(samples.size() == sample_terciles.size(), "breakdown: tercile list size mismatch");
  PopularityBreakdown out;
  std::array<std::array<int, 3>, 3> counts{};
  for (size_t i = 0; i < samples.size(); ++i) {
    const int bin = sample_terciles[i];
    require(bin >= 0 && bin <= 2, "breakdown: tercile out of range");
    const int cat = static_cast<int>(samples[i].label.category);
    counts[static_cast<size_t>(bin)][static_cast<size_t>(cat)] += 1;
    out.count[static_cast<size_t>(bin)] += 1;
  }
  for (int b = 0; b < 3; ++b) {
    if (out.count[static_cast<size_t>(b)] == 0) {
      out.empty_bin[static_cast<size_t>(b)] = true;
      continue;
    }
    for (int c = 0; c < 3; ++c)
      out.share[static_cast<size_t>(b)][static_cast<size_t>(c)] =
          static_cast<double>(counts[static_cast<size_t>(b)][static_cast<size_t>(c)]) /
          static_cast<double>(out.count[static_cast<size_t>(b)]);
  }
  return out;
}

std::vector<LayerCurve> attention_flow_curves(const std::vector<SampleStats>& stats) {
  std::vector<LayerCurve> out;
  for (Category c : {Category::FA, Category::AH, Category::UH}) {
    auto group = of_category(stats, c);
    require(!group.empty(), "attention_flow_curves: empty category group");
    out.push_back({"attention_contribution_norm", taxonomy::category_name(c),
                   mean_curve(group, &SampleStats::attn_contrib_norm),
                   static_cast<int>(group.size())});
  }
  return out;
}

std::vector<LayerCurve> last_token_similarity_curves(const std::vector<SampleStats>& stats,
                                                     int max_pairs, uint64_t seed) {
  std::vector<LayerCurve> out;
  const int L = stats.empty() ? 0 : static_cast<int>(stats.front().last_hidden.rows());
  for (Category c : {Category::FA, Category::AH, Category::UH}) {
    auto group = of_category(stats, c);
    require(group.size() >= 2, std::string("similarity: category ") + taxonomy::category_name(c) +
                                   " needs at least 2 samples");
    // pairs within identical templates only
    std::vector<std::pair<const SampleStats*, const SampleStats*>> pairs;
    for (int r = 0; r < worldgen::kNumRelations; ++r) {
      std::vector<const SampleStats*> pool;
      for (const auto* s : group)
        if (static_cast<int>(s->relation) == r) pool.push_back(s);
      for (size_t i = 0; i < pool.size(); ++i)
        for (size_t j = i + 1; j < pool.size(); ++j) pairs.emplace_back(pool[i], pool[j]);
    }
    require(!pairs.empty(), std::string("similarity: category ") + taxonomy::category_name(c) +
                                " has no same-template pair");
    if (static_cast<int>(pairs.size()) > max_pairs) {
      Rng rng(seed, "cosine-pairs", static_cast<uint64_t>(c));
      rng.shuffle(pairs);
      pairs.resize(static_cast<size_t>(max_pairs));
    }
    VecD curve = VecD::Zero(L);
    for (const auto& [a, b] : pairs) {
      for (int l = 0; l < L; ++l) {
        VecD u = a->last_hidden.row(l).transpose().cast<double>();
        VecD v = b->last_hidden.row(l).transpose().cast<double>();
        curve[l] += numerics::cosine_similarity(u, v);
      }
    }
    curve /= static_cast<double>(pairs.size());
    out.push_back({"last_token_cosine", taxonomy::category_name(c), curve,
                   static_cast<int>(pairs.size())});
  }
  return out;
}

GroupedHistogram entropy_histogram(const std::vector<SampleStats>& stats, double max_entropy,
                                   int n_bins) {
  require(n_bins >= 1, "entropy_histogram: need at least one bin");
  require(max_entropy > 0.0, "entropy_histogram: max_entropy must be positive");
  GroupedHistogram hist;
  hist.edges.resize(n_bins + 1);
  for (int i = 0; i <= n_bins; ++i)
    hist.edges[i] = max_entropy * static_cast<double>(i) / static_cast<double>(n_bins);
  for (Category c : {Category::FA, Category::AH, Category::UH}) {
    auto group = of_category(stats, c);
    std::vector<int> counts(static_cast<size_t>(n_bins), 0);
    for (const auto* s : group) {
      int bin = static_cast<int>(std::floor(s->output_entropy / max_entropy * n_bins));
      bin = std::clamp(bin, 0, n_bins - 1);
      counts[static_cast<size_t>(bin)] += 1;
    }
    hist.counts[taxonomy::category_name(c)] = std::move(counts);
  }
  return hist;
}

double silhouette(const MatD& points, const std::vector<int>& labels) {
  const Eigen::Index n = points.rows();
  require(static_cast<size_t>(n) == labels.size(), "silhouette: labels size mismatch");
  require(n >= 3, "silhouette: need at least 3 points");
  int n1 = 0;
  for (int l : labels) n1 += l;
  require(n1 > 0 && n1 < n, "silhouette: both clusters must be non-empty");

  double acc = 0.0;
  int used = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double same_sum = 0.0, other_sum = 0.0;
    int same_n = 0, other_n = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (points.row(i) - points.row(j)).norm();
      if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
        same_sum += d;
        ++same_n;
      } else {
        other_sum += d;
        ++other_n;
      }
    }
    if (same_n == 0) continue;  // singleton cluster member contributes 0 by convention
    const double a = same_sum / same_n;
    const double b = other_sum / other_n;
    acc += (b - a) / std::max(a, b);
    ++used;
  }
  return used > 0 ? acc / used : 0.0;
}

ProjectionResult projection_export(const std::vector<SampleStats>& stats, int layer) {
  require(stats.size() >= 3, "projection_export: need at least 3 points");
  require(layer >= 1 && layer <= static_cast<int>(stats.front().last_hidden.rows()),
          "projection_export: layer out of range");
  MatD points(static_cast<Eigen::Index>(stats.size()), stats.front().last_hidden.cols());
  for (size_t i = 0; i < stats.size(); ++i)
    points.row(static_cast<Eigen::Index>(i)) =
        stats[i].last_hidden.row(layer - 1).cast<double>();

  ProjectionResult result;
  result.layer = layer;
  result.coords = numerics::pca_project(points, 2);
  result.labels.reserve(stats.size());
  std::vector<int> uh_vs_rest, ah_vs_fa_labels;
  std::vector<Eigen::Index> ah_fa_rows;
  for (size_t i = 0; i < stats.size(); ++i) {
    result.labels.push_back(stats[i].category);
    uh_vs_rest.push_back(stats[i].category == Category::UH ? 1 : 0);
    if (stats[i].category != Category::UH) {
      ah_fa_rows.push_back(static_cast<Eigen::Index>(i));
      ah_vs_fa_labels.push_back(stats[i].category == Category::AH ? 1 : 0);
    }
  }
  result.silhouette_uh_vs_rest = silhouette(result.coords, uh_vs_rest);
  if (ah_fa_rows.size() >= 3) {
    MatD sub(static_cast<Eigen::Index>(ah_fa_rows.size()), 2);
    for (size_t i = 0; i < ah_fa_rows.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) =
        result.coords.row(ah_fa_rows[i]);
    bool both = false;
    int ones = 0;
    for (int l : ah_vs_fa_labels) ones += l;
    both = ones > 0 && ones < static_cast<int>(ah_vs_fa_labels.size());
    if (both) result.silhouette_ah_vs_fa = silhouette(sub, ah_vs_fa_labels);
  }
  return result;
}

double bootstrap_greater_fraction(const std::vector<double>& a, const std::vector<double>& b,
                                  int resamples, uint64_t seed) {
  require(!a.empty() && !b.empty(), "bootstrap: empty sample");
  Rng rng(seed, "bootstrap");
  int greater = 0;
  for (int r = 0; r < resamples; ++r) {
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) ma += a[rng.uniform_int(a.size())];
    for (size_t i = 0; i < b.size(); ++i) mb += b[rng.uniform_int(b.size())];
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    if (ma > mb) ++greater;
  }
  return static_cast<double>(greater) / static_cast<double>(resamples);
}

int layer_third(int layer, int n_layers) {
  require(layer >= 1 && layer <= n_layers, "layer_third: layer out of range");
  const int t = (3 * layer + n_layers - 1) / n_layers - 1;  // ceil(3l/L) - 1
  return std::clamp(t, 0, 2);
}

}  // namespace knowtrace::analysis
