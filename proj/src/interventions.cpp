// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/interventions.hpp"

#include "knowtrace/rng.hpp"
#include "knowtrace/threading.hpp"

#include <algorithm>
#include <cmath>

namespace knowtrace::interventions {

using model::Hooks;
using model::Params;
using model::TokenSequence;
using model::Trace;
using numerics::Distribution;
using numerics::js_divergence;

const char* kind_name(InterventionKind k) {
  switch (k) {
    case InterventionKind::PatchSubjectStates: return "patch_subject_states";
    case InterventionKind::BlockAttention: return "block_attention";
    case InterventionKind::PatchLastState: return "patch_last_state";
  }
  throw InvalidInput("bad intervention kind");
}

std::vector<int> window_layers(int center, int window, int n_layers) {
  require(window >= 1, "window must be >= 1");
  require(center >= 1 && center <= n_layers, "window center layer out of range");
  const int half = (window - 1) / 2;
  std::vector<int> layers;
  for (int l = center - half; l <= center + (window - 1 - half); ++l) {
    if (l >= 1 && l <= n_layers) layers.push_back(l);
  }
  return layers;
}

double embedding_std(const Params& params) {
  const MatF& e = params.embed;
  const double mean = static_cast<double>(e.sum()) / static_cast<double>(e.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const double d = static_cast<double>(e.data()[i]) - mean;
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(e.size()));
}

CorruptedActivations corrupted_run(const Params& params, const TokenSequence& prompt,
                                   const InterventionSettings& settings, uint64_t noise_index) {
  Hooks hooks;
  if (settings.corruption == CorruptionMode::GaussianEmbeddingNoise) {
    model::EmbeddingNoiseSpec<float> noise;
    for (int p = prompt.subject_begin; p < prompt.subject_end; ++p) noise.positions.push_back(p);
    const double sigma = settings.noise_scale * embedding_std(params);
    Rng rng(settings.seed, "noise", noise_index);
    noise.noise.resize(static_cast<Eigen::Index>(noise.positions.size()), params.config.d_model);
    for (Eigen::Index i = 0; i < noise.noise.rows(); ++i)
      for (Eigen::Index j = 0; j < noise.noise.cols(); ++j)
        noise.noise(i, j) = static_cast<float>(sigma * rng.gaussian());
    hooks.embedding_noise.push_back(std::move(noise));
    Trace trace = model::forward_traced(params, prompt, hooks);
    CorruptedActivations out;
    out.mlp_out = std::move(trace.mlp_out);
    out.hidden.assign(trace.hidden.begin() + 1, trace.hidden.end());
    return out;
  }
  // MeanAblation: replacement is the clean run's position-mean per layer.
  Trace trace = model::forward_traced(params, prompt);
  CorruptedActivations out;
  const int T = trace.seq_len();
  for (int l = 0; l < trace.n_layers(); ++l) {
    RowVec<float> mean_m = trace.mlp_out[static_cast<size_t>(l)].colwise().mean();
    RowVec<float> mean_h = trace.hidden[static_cast<size_t>(l) + 1].colwise().mean();
    MatF m(T, params.config.d_model), h(T, params.config.d_model);
    for (int i = 0; i < T; ++i) {
      m.row(i) = mean_m;
      h.row(i) = mean_h;
    }
    out.mlp_out.push_back(std::move(m));
    out.hidden.push_back(std::move(h));
  }
  return out;
}

namespace {

Hooks patch_hooks_for(const CorruptedActivations& corrupted, const std::vector<int>& layers,
                      const std::vector<int>& positions, bool patch_residual) {
  Hooks hooks;
  for (int layer : layers) {
    model::PatchSpec<float> patch;
    patch.layer = layer;
    patch.positions = positions;
    patch.patch_residual = patch_residual;
    const MatF& src =
        patch_residual ? corrupted.hidden[static_cast<size_t>(layer - 1)]
                       : corrupted.mlp_out[static_cast<size_t>(layer - 1)];
    patch.values.resize(static_cast<Eigen::Index>(positions.size()), src.cols());
    for (size_t k = 0; k < positions.size(); ++k)
      patch.values.row(static_cast<Eigen::Index>(k)) = src.row(positions[k]);
    hooks.patches.push_back(std::move(patch));
  }
  return hooks;
}

Hooks block_hooks_for(const TokenSequence& prompt, int center_layer,
                      const InterventionSettings& settings, int n_layers) {
  model::AttentionBlockSpec block;
  block.layers = window_layers(center_layer, settings.block_window, n_layers);
  for (int p = prompt.subject_begin; p < prompt.subject_end; ++p) block.src.push_back(p);
  block.dst = prompt.last_position();
  Hooks hooks;
  hooks.blocks.push_back(std::move(block));
  return hooks;
}

double js_against(const Distribution& clean, const VecD& dist) {
  return js_divergence(clean, Distribution(dist));
}

}  // namespace

InterventionResult patch_token_states(const Params& params, const TokenSequence& prompt, int layer,
                                      const std::vector<int>& positions,
                                      const InterventionSettings& settings) {
  require(!positions.empty(), "patch_token_states: positions must be non-empty");
  const int L = params.config.n_layers;
  const std::vector<int> layers = window_layers(layer, settings.patch_window, L);
  Distribution clean(model::next_distribution(params, prompt));
  CorruptedActivations corrupted = corrupted_run(params, prompt, settings, 0);
  Hooks hooks = patch_hooks_for(corrupted, layers, positions, settings.patch_residual);
  Distribution intervened(model::next_distribution(params, prompt, hooks));

  InterventionResult result{
      InterventionSpec{positions.size() == 1 && positions[0] == prompt.last_position()
                           ? InterventionKind::PatchLastState
                           : InterventionKind::PatchSubjectStates,
                       layer, settings},
      clean, intervened, js_divergence(clean, intervened)};
  return result;
}

InterventionResult block_attention(const Params& params, const TokenSequence& prompt,
                                   int center_layer, const InterventionSettings& settings) {
  const int L = params.config.n_layers;
  require(prompt.subject_end <= prompt.last_position(),
          "block_attention: subject span must precede the last position");
  Distribution clean(model::next_distribution(params, prompt));
  Hooks hooks = block_hooks_for(prompt, center_layer, settings, L);
  Distribution intervened(model::next_distribution(params, prompt, hooks));
  InterventionResult result{InterventionSpec{InterventionKind::BlockAttention, center_layer,
                                             settings},
                            clean, intervened, js_divergence(clean, intervened)};
  return result;
}

std::pair<VecF, double> attention_contribution(const Params& params, const Trace& trace,
                                               const TokenSequence& prompt, int layer) {
  require(layer >= 1 && layer <= trace.n_layers(), "attention_contribution: layer out of range");
  require(prompt.subject_end > prompt.subject_begin, "attention_contribution: missing subject span");
  const int last = prompt.last_position();
  const MatF& h_prev = trace.hidden[static_cast<size_t>(layer - 1)];
  RowVec<float> acc = RowVec<float>::Zero(params.config.d_model);
  for (int head = 0; head < params.config.n_heads; ++head) {
    const MatF& attn = trace.attn_weights[static_cast<size_t>(layer - 1)][static_cast<size_t>(head)];
    for (int s = prompt.subject_begin; s < prompt.subject_end; ++s) {
      const float w = attn(last, s);
      if (w == 0.0f) continue;
      RowVec<float> v = h_prev.row(s) * params.w_v_head(layer - 1, head);
      acc += w * (v * params.w_o_head(layer - 1, head));
    }
  }
  VecF vec = acc.transpose();
  return {vec, static_cast<double>(vec.norm())};
}

VecF attention_total_contribution(const Params& params, const Trace& trace, int layer,
                                  int position) {
  require(layer >= 1 && layer <= trace.n_layers(), "layer out of range");
  const MatF& h_prev = trace.hidden[static_cast<size_t>(layer - 1)];
  RowVec<float> acc = RowVec<float>::Zero(params.config.d_model);
  for (int head = 0; head < params.config.n_heads; ++head) {
    const MatF& attn = trace.attn_weights[static_cast<size_t>(layer - 1)][static_cast<size_t>(head)];
    for (int j = 0; j <= position; ++j) {
      const float w = attn(position, j);
      if (w == 0.0f) continue;
      RowVec<float> v = h_prev.row(j) * params.w_v_head(layer - 1, head);
      acc += w * (v * params.w_o_head(layer - 1, head));
    }
  }
  return acc.transpose();
}

EffectHeatmap intervention_sweep(const Params& params,
                                 const std::vector<TokenSequence>& prompts,
                                 const std::vector<InterventionKind>& kinds,
                                 const InterventionSettings& settings) {
  require(!prompts.empty(), "intervention_sweep: prompt group is empty");
  require(!kinds.empty(), "intervention_sweep: no intervention kinds given");
  const int L = params.config.n_layers;
  const int n_noise = settings.corruption == CorruptionMode::MeanAblation
                          ? 1
                          : std::max(1, settings.noise_seeds);
  const bool needs_patching =
      std::any_of(kinds.begin(), kinds.end(),
                  [](InterventionKind k) { return k != InterventionKind::BlockAttention; });

  // per prompt slot: js[kind][layer]
  std::vector<std::vector<std::vector<double>>> per_prompt(
      prompts.size(), std::vector<std::vector<double>>(kinds.size(),
                                                       std::vector<double>(static_cast<size_t>(L))));

  parallel_for(prompts.size(), [&](size_t pi) {
    const TokenSequence& prompt = prompts[pi];
    Distribution clean(model::next_distribution(params, prompt));
    std::vector<CorruptedActivations> corrupted;
    if (needs_patching) {
      corrupted.reserve(static_cast<size_t>(n_noise));
      for (int s = 0; s < n_noise; ++s)
        corrupted.push_back(corrupted_run(params, prompt, settings, static_cast<uint64_t>(s)));
    }
    std::vector<int> subject_positions;
    for (int p = prompt.subject_begin; p < prompt.subject_end; ++p)
      subject_positions.push_back(p);
    const std::vector<int> last_position{prompt.last_position()};

    for (size_t ki = 0; ki < kinds.size(); ++ki) {
      for (int layer = 1; layer <= L; ++layer) {
        double js;
        if (kinds[ki] == InterventionKind::BlockAttention) {
          Hooks hooks = block_hooks_for(prompt, layer, settings, L);
          js = js_against(clean, model::next_distribution(params, prompt, hooks));
        } else {
          const std::vector<int>& positions = kinds[ki] == InterventionKind::PatchSubjectStates
                                                  ? subject_positions
                                                  : last_position;
          const std::vector<int> layers = window_layers(layer, settings.patch_window, L);
          double acc = 0.0;
          for (int s = 0; s < n_noise; ++s) {
            Hooks hooks = patch_hooks_for(corrupted[static_cast<size_t>(s)], layers, positions,
                                          settings.patch_residual);
            acc += js_against(clean, model::next_distribution(params, prompt, hooks));
          }
          js = acc / static_cast<double>(n_noise);
        }
        per_prompt[pi][ki][static_cast<size_t>(layer - 1)] = js;
      }
    }
  });

  EffectHeatmap heatmap;
  heatmap.kinds = kinds;
  heatmap.n_layers = L;
  heatmap.cells.assign(kinds.size(), std::vector<double>(static_cast<size_t>(L), 0.0));
  heatmap.counts.assign(kinds.size(),
                        std::vector<int>(static_cast<size_t>(L), static_cast<int>(prompts.size())));
  for (size_t pi = 0; pi < prompts.size(); ++pi)
    for (size_t ki = 0; ki < kinds.size(); ++ki)
      for (int l = 0; l < L; ++l)
        heatmap.cells[ki][static_cast<size_t>(l)] += per_prompt[pi][ki][static_cast<size_t>(l)];
  for (auto& row : heatmap.cells)
    for (double& v : row) v /= static_cast<double>(prompts.size());
  return heatmap;
}

}  // namespace knowtrace::interventions
