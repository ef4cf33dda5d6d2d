// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/common.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace knowtrace::model {

// Decoder-only pre-norm transformer, small enough to train on a laptop but
// instrumented so every intermediate the analyses need is recordable.
//
// Residual update per layer: h = h_prev + attn_out + mlp_out.
// Q and K are computed from the RMS-normed residual; V is computed from the
// raw residual so the per-head attention output decomposes exactly into
// per-source-token contributions A(h_j W_V) W_O.
struct ModelConfig {
  int vocab_size = 4096;
  int d_model = 64;
  int n_layers = 8;
  int n_heads = 4;
  int d_mlp = 256;
  int max_seq_len = 64;
  uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

template <class S>
struct LayerParamsT {
  Mat<S> wq, wk, wv;      // d_model x d_model, columns grouped per head
  Mat<S> wo;              // d_model x d_model, rows grouped per head
  Mat<S> attn_norm_gain;  // 1 x d_model
  Mat<S> mlp_norm_gain;   // 1 x d_model
  Mat<S> w_up;            // d_model x d_mlp
  Mat<S> w_down;          // d_mlp x d_model
};

template <class S>
struct ParamsT {
  ModelConfig config;
  Mat<S> embed;            // vocab x d_model
  Mat<S> pos;              // max_seq_len x d_model
  std::vector<LayerParamsT<S>> layers;
  Mat<S> final_norm_gain;  // 1 x d_model
  Mat<S> unembed;          // d_model x vocab

  /// Per-head value projection, d_model x head_dim.
  auto w_v_head(int layer, int head) const {
    const int dh = config.head_dim();
    return layers[static_cast<size_t>(layer)].wv.middleCols(head * dh, dh);
  }
  /// Per-head output projection, head_dim x d_model.
  auto w_o_head(int layer, int head) const {
    const int dh = config.head_dim();
    return layers[static_cast<size_t>(layer)].wo.middleRows(head * dh, dh);
  }

  template <class F>
  void for_each_tensor(F&& f) {
    f("embed", embed);
    f("pos", pos);
    for (size_t l = 0; l < layers.size(); ++l) {
      auto tag = [&](const char* n) { return "layer" + std::to_string(l) + "." + n; };
      f(tag("wq"), layers[l].wq);
      f(tag("wk"), layers[l].wk);
      f(tag("wv"), layers[l].wv);
      f(tag("wo"), layers[l].wo);
      f(tag("attn_norm_gain"), layers[l].attn_norm_gain);
      f(tag("mlp_norm_gain"), layers[l].mlp_norm_gain);
      f(tag("w_up"), layers[l].w_up);
      f(tag("w_down"), layers[l].w_down);
    }
    f("final_norm_gain", final_norm_gain);
    f("unembed", unembed);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<ParamsT*>(this)->for_each_tensor(
        [&](const std::string& n, Mat<S>& m) { f(n, const_cast<const Mat<S>&>(m)); });
  }
};

/// Token ids plus the marked subject span [begin, end).
struct TokenSequence {
  std::vector<int> ids;
  int subject_begin = 0;
  int subject_end = 0;  // exclusive

  int last_position() const { return static_cast<int>(ids.size()) - 1; }
  void validate(int vocab_size) const;
};

/// Replace MLP outputs (or, optionally, the full residual row) at one layer.
template <class S>
struct PatchSpec {
  int layer = 1;  // 1-based
  std::vector<int> positions;
  Mat<S> values;  // positions.size() x d_model
  bool patch_residual = false;
};

/// Force attention weight dst->src to zero in the given layers (logits set to
/// -inf before softmax; rows renormalize over the remaining positions).
struct AttentionBlockSpec {
  std::vector<int> layers;  // 1-based
  std::vector<int> src;
  int dst = 0;
};

/// Additive noise on the embedding rows of the given positions.
template <class S>
struct EmbeddingNoiseSpec {
  std::vector<int> positions;
  Mat<S> noise;  // positions.size() x d_model
};

template <class S>
struct HooksT {
  std::vector<PatchSpec<S>> patches;
  std::vector<AttentionBlockSpec> blocks;
  std::vector<EmbeddingNoiseSpec<S>> embedding_noise;
  bool empty() const { return patches.empty() && blocks.empty() && embedding_noise.empty(); }
};

struct TraceOptions {
  bool keep_all_logits = false;
};

template <class S>
struct TraceT {
  // hidden[0] is the embedding output; hidden[l] the post-block residual.
  std::vector<Mat<S>> hidden;                      // (L+1) of T x d
  std::vector<Mat<S>> attn_out;                    // L of T x d
  std::vector<Mat<S>> mlp_out;                     // L of T x d
  std::vector<Mat<S>> mlp_in;                      // L of T x d_mlp, post-activation
  std::vector<std::vector<Mat<S>>> attn_weights;   // [layer][head], T x T
  Mat<S> final_postnorm;                           // T x d
  RowVec<S> last_logits;                           // vocab
  VecD last_distribution;                          // softmax in double
  std::optional<Mat<S>> all_logits;                // T x vocab when requested

  int seq_len() const { return static_cast<int>(hidden.front().rows()); }
  int n_layers() const { return static_cast<int>(attn_out.size()); }
};

template <class S>
ParamsT<S> init_params(const ModelConfig& config);

template <class S>
TraceT<S> forward_traced(const ParamsT<S>& params, const TokenSequence& tokens,
                         const HooksT<S>& hooks = {}, const TraceOptions& options = {});

/// Next-token distribution at the last position (double softmax), without
/// building a full trace.
template <class S>
VecD next_distribution(const ParamsT<S>& params, const TokenSequence& tokens,
                       const HooksT<S>& hooks = {});

/// Argmax decoding, ties broken toward the lowest token id. Stops after
/// emitting eot_id or after max_new tokens.
template <class S>
std::vector<int> greedy_decode(const ParamsT<S>& params, const TokenSequence& prompt,
                               int max_new, int eot_id);

/// Tie-break helper used by greedy_decode: lowest index among maxima.
template <class S>
int argmax_lowest(const RowVec<S>& logits);

using Params = ParamsT<float>;
using Hooks = HooksT<float>;
using Trace = TraceT<float>;

extern template struct ParamsT<float>;
extern template struct ParamsT<double>;
extern template ParamsT<float> init_params<float>(const ModelConfig&);
extern template ParamsT<double> init_params<double>(const ModelConfig&);
extern template TraceT<float> forward_traced<float>(const ParamsT<float>&, const TokenSequence&,
                                                    const HooksT<float>&, const TraceOptions&);
extern template TraceT<double> forward_traced<double>(const ParamsT<double>&, const TokenSequence&,
                                                      const HooksT<double>&, const TraceOptions&);
extern template VecD next_distribution<float>(const ParamsT<float>&, const TokenSequence&,
                                              const HooksT<float>&);
extern template VecD next_distribution<double>(const ParamsT<double>&, const TokenSequence&,
                                               const HooksT<double>&);
extern template std::vector<int> greedy_decode<float>(const ParamsT<float>&, const TokenSequence&,
                                                      int, int);
extern template std::vector<int> greedy_decode<double>(const ParamsT<double>&,
                                                       const TokenSequence&, int, int);
extern template int argmax_lowest<float>(const RowVec<float>&);
extern template int argmax_lowest<double>(const RowVec<double>&);

}  // namespace knowtrace::model
