// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/detection.hpp"

#include "knowtrace/rng.hpp"
#include "knowtrace/threading.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace knowtrace::detection {

using model::Params;
using model::TokenSequence;
using taxonomy::LabeledSample;

const char* feature_kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::SubjectHidden: return "subject_hidden";
    case FeatureKind::AttentionFlow: return "attention_flow";
    case FeatureKind::LastTokenHidden: return "last_token_hidden";
    case FeatureKind::AnswerProbability: return "answer_probability";
    case FeatureKind::SubjectPopularity: return "subject_popularity";
  }
  throw InvalidInput("bad feature kind");
}

bool is_scalar_kind(FeatureKind k) {
  return k == FeatureKind::AnswerProbability || k == FeatureKind::SubjectPopularity;
}

const char* setting_name(Setting s) {
  switch (s) {
    case Setting::AHOnly: return "AH_Only";
    case Setting::UHOnly: return "UH_Only";
    case Setting::Full: return "Full";
  }
  throw InvalidInput("bad setting");
}

Setting setting_from_name(const std::string& name) {
  if (name == "AH_Only" || name == "ah_only" || name == "ah") return Setting::AHOnly;
  if (name == "UH_Only" || name == "uh_only" || name == "uh") return Setting::UHOnly;
  if (name == "Full" || name == "full") return Setting::Full;
  throw InvalidInput("unknown detection setting: '" + name + "'");
}

std::vector<FeatureKind> all_feature_kinds() {
  return {FeatureKind::SubjectHidden, FeatureKind::AttentionFlow, FeatureKind::LastTokenHidden,
          FeatureKind::AnswerProbability, FeatureKind::SubjectPopularity};
}

VecD SampleFeatures::vector_for(FeatureKind kind) const {
  switch (kind) {
    case FeatureKind::SubjectHidden: return subject_hidden;
    case FeatureKind::AttentionFlow: return attention_flow;
    case FeatureKind::LastTokenHidden: return last_token_hidden;
    case FeatureKind::AnswerProbability: {
      VecD v(1);
      v[0] = answer_probability;
      return v;
    }
    case FeatureKind::SubjectPopularity: {
      VecD v(1);
      v[0] = popularity;
      return v;
    }
  }
  throw InvalidInput("bad feature kind");
}

double SampleFeatures::scalar_for(FeatureKind kind) const {
  require(is_scalar_kind(kind), "scalar_for: kind is not scalar");
  return kind == FeatureKind::AnswerProbability ? answer_probability : popularity;
}

double score_blackbox(const SampleFeatures& sample, FeatureKind kind) {
  return sample.scalar_for(kind);
}

VecD extract_feature(const Params& params, const model::Trace& trace, const LabeledSample& sample,
                     FeatureKind kind, int analysis_layer, bool last_token_postnorm) {
  const int L = params.config.n_layers;
  const int d = params.config.d_model;
  const int last = sample.query.subject_end > 0
                       ? static_cast<int>(sample.query.tokens.size()) - 1
                       : 0;
  require(sample.query.subject_end > sample.query.subject_begin,
          "extract_feature: sample has no subject span");
  switch (kind) {
    case FeatureKind::SubjectHidden: {
      require(analysis_layer >= 2 && analysis_layer <= L - 1,
              "extract_feature: analysis layer needs a three-layer neighborhood");
      const int s_last = sample.query.subject_end - 1;
      VecD out(3 * d);
      for (int k = 0; k < 3; ++k) {
        const int layer = analysis_layer - 1 + k;
        out.segment(static_cast<Eigen::Index>(k) * d, d) =
            trace.hidden[static_cast<size_t>(layer)].row(s_last).transpose().cast<double>();
      }
      return out;
    }
    case FeatureKind::AttentionFlow: {
      VecD out = VecD::Zero(L);
      for (int l = 0; l < L; ++l) {
        double acc = 0.0;
        for (int h = 0; h < params.config.n_heads; ++h) {
          const MatF& attn = trace.attn_weights[static_cast<size_t>(l)][static_cast<size_t>(h)];
          for (int s = sample.query.subject_begin; s < sample.query.subject_end; ++s)
            acc += static_cast<double>(attn(last, s));
        }
        out[l] = acc;
      }
      return out;
    }
    case FeatureKind::LastTokenHidden: {
      const MatF& src = last_token_postnorm ? trace.final_postnorm
                                            : trace.hidden[static_cast<size_t>(L)];
      return src.row(last).transpose().cast<double>();
    }
    case FeatureKind::AnswerProbability: {
      VecD v(1);
      const int first = model::argmax_lowest<float>(trace.last_logits);
      v[0] = trace.last_distribution[first];
      return v;
    }
    case FeatureKind::SubjectPopularity: {
      VecD v(1);
      v[0] = sample.popularity;
      return v;
    }
  }
  throw InvalidInput("bad feature kind");
}

SampleFeatures extract_features(const Params& params, const LabeledSample& sample,
                                int analysis_layer, bool last_token_postnorm) {
  TokenSequence prompt{sample.query.tokens, sample.query.subject_begin, sample.query.subject_end};
  model::Trace trace = model::forward_traced(params, prompt);
  SampleFeatures f;
  f.id = sample.id;
  f.category = sample.label.category;
  f.subject_hidden = extract_feature(params, trace, sample, FeatureKind::SubjectHidden,
                                     analysis_layer, last_token_postnorm);
  f.attention_flow = extract_feature(params, trace, sample, FeatureKind::AttentionFlow,
                                     analysis_layer, last_token_postnorm);
  f.last_token_hidden = extract_feature(params, trace, sample, FeatureKind::LastTokenHidden,
                                        analysis_layer, last_token_postnorm);
  f.answer_probability = extract_feature(params, trace, sample, FeatureKind::AnswerProbability,
                                         analysis_layer, last_token_postnorm)[0];
  f.popularity = sample.popularity;
  return f;
}

std::vector<SampleFeatures> extract_features_bulk(const Params& params,
                                                  const std::vector<LabeledSample>& pool,
                                                  int analysis_layer, bool last_token_postnorm) {
  std::vector<SampleFeatures> out(pool.size());
  parallel_for(pool.size(), [&](size_t i) {
    out[i] = extract_features(params, pool[i], analysis_layer, last_token_postnorm);
  });
  return out;
}

namespace {

struct Split {
  std::vector<const SampleFeatures*> train_fa, train_hal, test_fa, test_hal;
};

Split make_split(const std::vector<SampleFeatures>& pool, Setting setting,
                 const DetectionSettings& settings, uint64_t seed_index, int& train_n, int& test_n,
                 double& scale, double& ah_fraction) {
  std::vector<const SampleFeatures*> fa, hal;
  for (const auto& s : pool) {
    if (s.category == Category::FA) {
      fa.push_back(&s);
    } else if (setting == Setting::Full ||
               (setting == Setting::AHOnly && s.category == Category::AH) ||
               (setting == Setting::UHOnly && s.category == Category::UH)) {
      hal.push_back(&s);
    }
  }
  const int requested = settings.train_per_class + settings.test_per_class;
  const double avail = static_cast<double>(std::min(fa.size(), hal.size()));
  scale = std::min(1.0, avail / static_cast<double>(requested));
  train_n = static_cast<int>(std::floor(settings.train_per_class * scale));
  test_n = static_cast<int>(std::floor(settings.test_per_class * scale));
  if (train_n < settings.min_train_per_class || test_n < settings.min_test_per_class) {
    throw InvalidInput(std::string("detection setting ") + setting_name(setting) +
                       ": insufficient samples (have " + std::to_string(static_cast<int>(avail)) +
                       " per class, need at least " +
                       std::to_string(settings.min_train_per_class + settings.min_test_per_class) +
                       ")");
  }

  Rng rng(settings.seed, "detect-seed", seed_index);
  rng.shuffle(fa);
  rng.shuffle(hal);
  Split split;
  split.train_fa.assign(fa.begin(), fa.begin() + train_n);
  split.test_fa.assign(fa.begin() + train_n, fa.begin() + train_n + test_n);
  split.train_hal.assign(hal.begin(), hal.begin() + train_n);
  split.test_hal.assign(hal.begin() + train_n, hal.begin() + train_n + test_n);

  int ah = 0, total = 0;
  for (const auto* s : split.train_hal) {
    ah += s->category == Category::AH ? 1 : 0;
    ++total;
  }
  ah_fraction = total > 0 ? static_cast<double>(ah) / total : 0.0;

  // train/test disjointness by construction; verify anyway
  std::set<int> train_ids, test_ids;
  for (const auto* s : split.train_fa) train_ids.insert(s->id);
  for (const auto* s : split.train_hal) train_ids.insert(s->id);
  for (const auto* s : split.test_fa) test_ids.insert(s->id);
  for (const auto* s : split.test_hal) test_ids.insert(s->id);
  for (int id : test_ids) require(!train_ids.count(id), "detection split leaked a test id");
  return split;
}

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

DetectionReport evaluate_detection(const std::vector<SampleFeatures>& pool, Setting setting,
                                   const std::vector<FeatureKind>& kinds,
                                   const DetectionSettings& settings) {
  require(!kinds.empty(), "evaluate_detection: no feature kinds");
  DetectionReport report;
  report.setting = setting;
  report.results.resize(kinds.size());
  for (size_t k = 0; k < kinds.size(); ++k) report.results[k].kind = kinds[k];

  for (int seed = 0; seed < settings.n_seeds; ++seed) {
    int train_n = 0, test_n = 0;
    double scale = 1.0, ah_fraction = 0.0;
    Split split = make_split(pool, setting, settings, static_cast<uint64_t>(seed), train_n, test_n,
                             scale, ah_fraction);
    report.scale_factor = scale;
    report.train_per_class = train_n;
    report.test_per_class = test_n;
    if (setting == Setting::Full) report.full_mix_ah_fraction = ah_fraction;

    // optional permutation-null: shuffle the FA/hallucination assignment of
    // the split (train and test alike), preserving class balance
    std::vector<int> train_labels(static_cast<size_t>(2 * train_n), 0);
    std::vector<int> test_labels(static_cast<size_t>(2 * test_n), 0);
    for (int i = 0; i < train_n; ++i) train_labels[static_cast<size_t>(i)] = 1;
    for (int i = 0; i < test_n; ++i) test_labels[static_cast<size_t>(i)] = 1;
    if (settings.shuffle_labels) {
      Rng rng(settings.seed, "null-shuffle", static_cast<uint64_t>(seed));
      rng.shuffle(train_labels);
      rng.shuffle(test_labels);
    }
    std::vector<const SampleFeatures*> train_all = split.train_fa;
    train_all.insert(train_all.end(), split.train_hal.begin(), split.train_hal.end());
    std::vector<const SampleFeatures*> test_all = split.test_fa;
    test_all.insert(test_all.end(), split.test_hal.begin(), split.test_hal.end());

    for (size_t k = 0; k < kinds.size(); ++k) {
      const FeatureKind kind = kinds[k];
      std::vector<double> scores(test_all.size());
      if (is_scalar_kind(kind)) {
        for (size_t i = 0; i < test_all.size(); ++i) scores[i] = score_blackbox(*test_all[i], kind);
      } else {
        const Eigen::Index dim = train_all.front()->vector_for(kind).size();
        MatD X(static_cast<Eigen::Index>(train_all.size()), dim);
        for (size_t i = 0; i < train_all.size(); ++i)
          X.row(static_cast<Eigen::Index>(i)) = train_all[i]->vector_for(kind).transpose();
        numerics::ProbeModel probe = numerics::fit_logistic_probe(
            X, train_labels, settings.probe_l2,
            settings.seed ^ (static_cast<uint64_t>(seed) * 0x9e3779b97f4a7c15ULL + k),
            settings.probe_step, settings.probe_epochs);
        for (size_t i = 0; i < test_all.size(); ++i)
          scores[i] = probe.predict_proba(test_all[i]->vector_for(kind));
      }
      report.results[k].per_seed_auroc.push_back(numerics::auroc(scores, test_labels));

      if (setting == Setting::Full && !settings.shuffle_labels) {
        // FA vs the UH slice of the test hallucinations
        std::vector<double> slice_scores;
        std::vector<int> slice_labels;
        for (size_t i = 0; i < test_all.size(); ++i) {
          const bool is_fa_slot = i < static_cast<size_t>(test_n);
          if (is_fa_slot || test_all[i]->category == Category::UH) {
            slice_scores.push_back(scores[i]);
            slice_labels.push_back(is_fa_slot ? 1 : 0);
          }
        }
        if (std::count(slice_labels.begin(), slice_labels.end(), 0) > 0)
          report.results[k].per_seed_uh_slice.push_back(
              numerics::auroc(slice_scores, slice_labels));
      }
    }
  }

  for (auto& r : report.results) {
    r.mean = mean_of(r.per_seed_auroc);
    r.stddev = sample_std(r.per_seed_auroc, r.mean);
    if (!r.per_seed_uh_slice.empty()) r.uh_slice_mean = mean_of(r.per_seed_uh_slice);
  }
  return report;
}

DetectionReport run_detection(const Params& params, const std::vector<LabeledSample>& pool,
                              Setting setting, const std::vector<FeatureKind>& kinds,
                              const DetectionSettings& settings, int analysis_layer,
                              bool last_token_postnorm) {
  std::vector<SampleFeatures> features =
      extract_features_bulk(params, pool, analysis_layer, last_token_postnorm);
  return evaluate_detection(features, setting, kinds, settings);
}

}  // namespace knowtrace::detection
