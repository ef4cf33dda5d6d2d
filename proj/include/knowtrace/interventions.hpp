// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/model.hpp"
#include "knowtrace/numerics.hpp"

#include <map>
#include <string>
#include <vector>

namespace knowtrace::interventions {

enum class InterventionKind { PatchSubjectStates, BlockAttention, PatchLastState };
enum class CorruptionMode { GaussianEmbeddingNoise, MeanAblation };

const char* kind_name(InterventionKind k);

// Layer windows: attention blocking masks the whole [layer - w/2, layer + w/2]
// window (clipped); state patching replaces a single layer's MLP outputs by
// default. Both widths are configurable.
struct InterventionSettings {
  int block_window = 5;
  int patch_window = 1;
  CorruptionMode corruption = CorruptionMode::GaussianEmbeddingNoise;
  double noise_scale = 3.0;  // multiple of the embedding-matrix std
  int noise_seeds = 5;
  uint64_t seed = 0;
  bool patch_residual = false;  // sensitivity option: patch h instead of m
};

struct InterventionSpec {
  InterventionKind kind = InterventionKind::PatchSubjectStates;
  int layer = 1;  // 1-based center layer
  InterventionSettings settings;
};

struct InterventionResult {
  InterventionSpec spec;
  numerics::Distribution clean;
  numerics::Distribution intervened;
  double js = 0.0;
};

/// Layers covered by a window of `window` layers centered at `center`,
/// clipped to [1, n_layers].
std::vector<int> window_layers(int center, int window, int n_layers);

/// std of all embedding-matrix entries; the causal-tracing noise unit.
double embedding_std(const model::Params& params);

/// Corrupted-run MLP outputs for one noise seed: runs the forward with
/// Gaussian noise added to the subject-token embeddings and returns the MLP
/// outputs of every layer (or, for MeanAblation, the mean MLP outputs over
/// the prompt's own positions -- no noise run needed).
struct CorruptedActivations {
  std::vector<MatF> mlp_out;  // per layer, T x d
  std::vector<MatF> hidden;   // per layer (1-based index l-1), T x d
};
CorruptedActivations corrupted_run(const model::Params& params, const model::TokenSequence& prompt,
                                   const InterventionSettings& settings, uint64_t noise_index);

/// Patch intervention at one (kind, layer): splice corrupted values at the
/// covered layers/positions into an otherwise clean forward. JS is averaged
/// over the configured noise seeds.
InterventionResult patch_token_states(const model::Params& params,
                                      const model::TokenSequence& prompt, int layer,
                                      const std::vector<int>& positions,
                                      const InterventionSettings& settings);

/// Attention knockout: within the window, attention from the last position to
/// every subject position is forced to zero (logits -inf, rows renormalize).
InterventionResult block_attention(const model::Params& params,
                                   const model::TokenSequence& prompt, int center_layer,
                                   const InterventionSettings& settings);

/// Subject-to-last attention contribution at a layer:
/// sum over subject tokens and heads of A[last, s] * (h_prev[s] W_V) W_O.
/// Returns the vector and its L2 norm.
std::pair<VecF, double> attention_contribution(const model::Params& params,
                                               const model::Trace& trace,
                                               const model::TokenSequence& prompt, int layer);

/// Same decomposition summed over all source positions (identity check).
VecF attention_total_contribution(const model::Params& params, const model::Trace& trace,
                                  int layer, int position);

struct EffectHeatmap {
  std::vector<InterventionKind> kinds;
  int n_layers = 0;
  // cells[kind][layer-1] = mean JS over the group's prompts
  std::vector<std::vector<double>> cells;
  std::vector<std::vector<int>> counts;
};

/// Mean JS per (kind, layer) over a prompt group. Groups run independently.
EffectHeatmap intervention_sweep(const model::Params& params,
                                 const std::vector<model::TokenSequence>& prompts,
                                 const std::vector<InterventionKind>& kinds,
                                 const InterventionSettings& settings);

}  // namespace knowtrace::interventions
