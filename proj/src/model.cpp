// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/model.hpp"

#include "knowtrace/model_math.hpp"
#include "knowtrace/rng.hpp"

#include <cmath>
#include <sstream>

namespace knowtrace::model {

void ModelConfig::validate() const {
  require(vocab_size >= 2, "vocab_size must be >= 2");
  require(d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_mlp >= 1 && max_seq_len >= 1,
          "all model dimensions must be >= 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
}

void TokenSequence::validate(int vocab_size) const {
  require(!ids.empty(), "token sequence must be non-empty");
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab_size) {
      std::ostringstream os;
      os << "token id " << ids[i] << " at position " << i << " out of range [0, " << vocab_size
         << ")";
      throw InvalidInput(os.str());
    }
  }
  require(subject_begin >= 0 && subject_end > subject_begin &&
              subject_end <= static_cast<int>(ids.size()),
          "subject span must be non-empty and within bounds");
}

template <class S>
ParamsT<S> init_params(const ModelConfig& config) {
  config.validate();
  ParamsT<S> p;
  p.config = config;
  Rng rng(config.seed, "init");
  const S base_std = static_cast<S>(0.02);
  // Residual-writing projections are scaled down with depth, GPT-2 style.
  const S resid_std = static_cast<S>(0.02 / std::sqrt(2.0 * config.n_layers));
  auto fill = [&rng](Mat<S>& m, int rows, int cols, S std) {
    m.resize(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = static_cast<S>(rng.gaussian()) * std;
  };
  fill(p.embed, config.vocab_size, config.d_model, base_std);
  fill(p.pos, config.max_seq_len, config.d_model, base_std);
  p.layers.resize(static_cast<size_t>(config.n_layers));
  for (auto& l : p.layers) {
    fill(l.wq, config.d_model, config.d_model, base_std);
    fill(l.wk, config.d_model, config.d_model, base_std);
    fill(l.wv, config.d_model, config.d_model, base_std);
    fill(l.wo, config.d_model, config.d_model, resid_std);
    l.attn_norm_gain = Mat<S>::Ones(1, config.d_model);
    l.mlp_norm_gain = Mat<S>::Ones(1, config.d_model);
    fill(l.w_up, config.d_model, config.d_mlp, base_std);
    fill(l.w_down, config.d_mlp, config.d_model, resid_std);
  }
  p.final_norm_gain = Mat<S>::Ones(1, config.d_model);
  fill(p.unembed, config.d_model, config.vocab_size, base_std);
  return p;
}

namespace {

template <class S>
void check_hooks(const HooksT<S>& hooks, const ModelConfig& config, int seq_len) {
  auto check_layer = [&](int layer) {
    if (layer < 1 || layer > config.n_layers) {
      std::ostringstream os;
      os << "hook references layer " << layer << ", model has layers 1.." << config.n_layers;
      throw InvalidInput(os.str());
    }
  };
  auto check_pos = [&](int pos) {
    if (pos < 0 || pos >= seq_len) {
      std::ostringstream os;
      os << "hook references position " << pos << ", sequence length is " << seq_len;
      throw InvalidInput(os.str());
    }
  };
  for (const auto& patch : hooks.patches) {
    check_layer(patch.layer);
    require(!patch.positions.empty(), "patch hook must name at least one position");
    for (int pos : patch.positions) check_pos(pos);
    require(patch.values.rows() == static_cast<Eigen::Index>(patch.positions.size()) &&
                patch.values.cols() == config.d_model,
            "patch hook values must be positions x d_model");
  }
  for (const auto& block : hooks.blocks) {
    require(!block.layers.empty(), "attention block hook must name at least one layer");
    for (int layer : block.layers) check_layer(layer);
    check_pos(block.dst);
    for (int src : block.src) {
      check_pos(src);
      require(src < block.dst, "attention block requires src before dst");
    }
  }
  for (const auto& noise : hooks.embedding_noise) {
    for (int pos : noise.positions) check_pos(pos);
    require(noise.noise.rows() == static_cast<Eigen::Index>(noise.positions.size()) &&
                noise.noise.cols() == config.d_model,
            "embedding noise must be positions x d_model");
  }
}

}  // namespace

template <class S>
TraceT<S> forward_traced(const ParamsT<S>& params, const TokenSequence& tokens,
                         const HooksT<S>& hooks, const TraceOptions& options) {
  const ModelConfig& cfg = params.config;
  tokens.validate(cfg.vocab_size);
  const int T = static_cast<int>(tokens.ids.size());
  require(T <= cfg.max_seq_len, "token sequence exceeds max_seq_len");
  check_hooks(hooks, cfg, T);

  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  TraceT<S> trace;
  trace.hidden.reserve(static_cast<size_t>(cfg.n_layers) + 1);
  trace.attn_out.reserve(static_cast<size_t>(cfg.n_layers));
  trace.mlp_out.reserve(static_cast<size_t>(cfg.n_layers));
  trace.mlp_in.reserve(static_cast<size_t>(cfg.n_layers));
  trace.attn_weights.resize(static_cast<size_t>(cfg.n_layers));

  Mat<S> h(T, d);
  for (int i = 0; i < T; ++i)
    h.row(i) = params.embed.row(tokens.ids[static_cast<size_t>(i)]) + params.pos.row(i);
  for (const auto& noise : hooks.embedding_noise) {
    for (size_t k = 0; k < noise.positions.size(); ++k)
      h.row(noise.positions[k]) += noise.noise.row(static_cast<Eigen::Index>(k));
  }
  trace.hidden.push_back(h);

  for (int layer = 1; layer <= cfg.n_layers; ++layer) {
    const auto& lp = params.layers[static_cast<size_t>(layer - 1)];
    Mat<S> n = rmsnorm_rows(h, lp.attn_norm_gain);
    Mat<S> q = n * lp.wq;
    Mat<S> k = n * lp.wk;
    Mat<S> v = h * lp.wv;

    Mat<S> attn_concat(T, d);
    auto& head_weights = trace.attn_weights[static_cast<size_t>(layer - 1)];
    head_weights.reserve(static_cast<size_t>(H));
    for (int head = 0; head < H; ++head) {
      Mat<S> scores = q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose();
      scores *= inv_sqrt_dh;
      apply_causal_mask(scores);
      for (const auto& block : hooks.blocks) {
        for (int bl : block.layers) {
          if (bl == layer) {
            for (int src : block.src)
              scores(block.dst, src) = -std::numeric_limits<S>::infinity();
          }
        }
      }
      Mat<S> attn = softmax_rows(scores);
      attn_concat.middleCols(head * dh, dh).noalias() = attn * v.middleCols(head * dh, dh);
      head_weights.push_back(std::move(attn));
    }
    Mat<S> a = attn_concat * lp.wo;
    Mat<S> u = h + a;
    Mat<S> nm = rmsnorm_rows(u, lp.mlp_norm_gain);
    Mat<S> z = gelu(Mat<S>(nm * lp.w_up));
    Mat<S> m = z * lp.w_down;
    for (const auto& patch : hooks.patches) {
      if (patch.layer == layer && !patch.patch_residual) {
        for (size_t kpos = 0; kpos < patch.positions.size(); ++kpos)
          m.row(patch.positions[kpos]) = patch.values.row(static_cast<Eigen::Index>(kpos));
      }
    }
    h = u + m;
    for (const auto& patch : hooks.patches) {
      if (patch.layer == layer && patch.patch_residual) {
        for (size_t kpos = 0; kpos < patch.positions.size(); ++kpos)
          h.row(patch.positions[kpos]) = patch.values.row(static_cast<Eigen::Index>(kpos));
      }
    }
    trace.attn_out.push_back(std::move(a));
    trace.mlp_out.push_back(std::move(m));
    trace.mlp_in.push_back(std::move(z));
    trace.hidden.push_back(h);
  }

  trace.final_postnorm = rmsnorm_rows(h, params.final_norm_gain);
  if (options.keep_all_logits) {
    trace.all_logits = Mat<S>(trace.final_postnorm * params.unembed);
    trace.last_logits = trace.all_logits->row(T - 1);
  } else {
    trace.last_logits = trace.final_postnorm.row(T - 1) * params.unembed;
  }
  trace.last_distribution = softmax_double(trace.last_logits);
  return trace;
}

template <class S>
VecD next_distribution(const ParamsT<S>& params, const TokenSequence& tokens,
                       const HooksT<S>& hooks) {
  return forward_traced(params, tokens, hooks).last_distribution;
}

template <class S>
int argmax_lowest(const RowVec<S>& logits) {
  int best = 0;
  for (int i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

template <class S>
std::vector<int> greedy_decode(const ParamsT<S>& params, const TokenSequence& prompt,
                               int max_new, int eot_id) {
  require(max_new >= 1, "greedy_decode: max_new must be >= 1");
  TokenSequence seq = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.ids.size()) >= params.config.max_seq_len) break;
    TraceT<S> trace = forward_traced(params, seq);
    const int next = argmax_lowest<S>(trace.last_logits);
    out.push_back(next);
    if (next == eot_id) break;
    seq.ids.push_back(next);
  }
  return out;
}

template struct ParamsT<float>;
template struct ParamsT<double>;
template ParamsT<float> init_params<float>(const ModelConfig&);
template ParamsT<double> init_params<double>(const ModelConfig&);
template TraceT<float> forward_traced<float>(const ParamsT<float>&, const TokenSequence&,
                                             const HooksT<float>&, const TraceOptions&);
template TraceT<double> forward_traced<double>(const ParamsT<double>&, const TokenSequence&,
                                               const HooksT<double>&, const TraceOptions&);
template VecD next_distribution<float>(const ParamsT<float>&, const TokenSequence&,
                                       const HooksT<float>&);
template VecD next_distribution<double>(const ParamsT<double>&, const TokenSequence&,
                                        const HooksT<double>&);
template std::vector<int> greedy_decode<float>(const ParamsT<float>&, const TokenSequence&, int,
                                               int);
template std::vector<int> greedy_decode<double>(const ParamsT<double>&, const TokenSequence&, int,
                                                int);
template int argmax_lowest<float>(const RowVec<float>&);
template int argmax_lowest<double>(const RowVec<double>&);

}  // namespace knowtrace::model
