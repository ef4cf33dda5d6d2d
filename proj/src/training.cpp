// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/training.hpp"

#include "knowtrace/model_math.hpp"
#include "knowtrace/rng.hpp"

#include <cmath>

namespace knowtrace::model {

namespace {

template <class S>
ParamsT<S> zeros_like(const ParamsT<S>& params) {
  ParamsT<S> z = params;
  z.for_each_tensor([](const std::string&, Mat<S>& m) { m.setZero(); });
  return z;
}

template <class S>
struct LayerStash {
  Mat<S> n, q, k, v;         // T x d
  std::vector<Mat<S>> attn;  // per head, T x T
  Mat<S> attn_concat;        // T x d
  Mat<S> u;                  // T x d
  Mat<S> nm;                 // T x d
  Mat<S> z_pre, z;           // T x d_mlp
};

// Forward with stashed intermediates, then backprop into grads. Each
// prediction contributes weight/weight_norm of its CE to the gradient.
// Returns the unnormalized weighted CE sum.
template <class S>
double sequence_loss_and_grad(const ParamsT<S>& params, const BatchItem<S>& item,
                              double weight_norm, ParamsT<S>* grads) {
  const ModelConfig& cfg = params.config;
  const int T = static_cast<int>(item.ids.size()) - 1;  // predictions at positions 0..T-1
  require(T >= 1, "training sequence needs at least 2 tokens");
  require(T + 1 <= cfg.max_seq_len + 1, "training sequence exceeds max_seq_len");
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int hd = cfg.head_dim();
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  // ---- forward ----
  std::vector<Mat<S>> hidden;
  hidden.reserve(static_cast<size_t>(cfg.n_layers) + 1);
  Mat<S> h(T, d);
  for (int i = 0; i < T; ++i)
    h.row(i) = params.embed.row(item.ids[static_cast<size_t>(i)]) + params.pos.row(i);
  hidden.push_back(h);

  std::vector<LayerStash<S>> stash(static_cast<size_t>(cfg.n_layers));
  for (int layer = 1; layer <= cfg.n_layers; ++layer) {
    const auto& lp = params.layers[static_cast<size_t>(layer - 1)];
    auto& st = stash[static_cast<size_t>(layer - 1)];
    st.n = rmsnorm_rows(h, lp.attn_norm_gain);
    st.q = st.n * lp.wq;
    st.k = st.n * lp.wk;
    st.v = h * lp.wv;
    st.attn_concat.resize(T, d);
    st.attn.reserve(static_cast<size_t>(H));
    for (int head = 0; head < H; ++head) {
      Mat<S> scores = st.q.middleCols(head * hd, hd) * st.k.middleCols(head * hd, hd).transpose();
      scores *= inv_sqrt_hd;
      apply_causal_mask(scores);
      Mat<S> attn = softmax_rows(scores);
      st.attn_concat.middleCols(head * hd, hd).noalias() = attn * st.v.middleCols(head * hd, hd);
      st.attn.push_back(std::move(attn));
    }
    Mat<S> a = st.attn_concat * lp.wo;
    st.u = h + a;
    st.nm = rmsnorm_rows(st.u, lp.mlp_norm_gain);
    st.z_pre = st.nm * lp.w_up;
    st.z = gelu(st.z_pre);
    Mat<S> m = st.z * lp.w_down;
    h = st.u + m;
    hidden.push_back(h);
  }
  Mat<S> fin = rmsnorm_rows(h, params.final_norm_gain);
  Mat<S> logits = fin * params.unembed;

  // ---- loss and dLogits ----
  double loss_sum = 0.0;
  Mat<S> dlogits;
  if (grads) dlogits = Mat<S>::Zero(T, cfg.vocab_size);
  RowVec<S> exps(cfg.vocab_size);
  for (int i = 0; i < T; ++i) {
    const double w = item.weight[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    const int target = item.ids[static_cast<size_t>(i) + 1];
    const S maxv = logits.row(i).maxCoeff();
    exps = (logits.row(i).array() - maxv).exp();
    const double sum = static_cast<double>(exps.sum());
    const double logz = static_cast<double>(maxv) + std::log(sum);
    loss_sum += w * (logz - static_cast<double>(logits(i, target)));
    if (grads) {
      const S scale = static_cast<S>(w / weight_norm);
      dlogits.row(i) = exps * (scale / static_cast<S>(sum));
      dlogits(i, target) -= scale;
    }
  }
  if (!grads) return loss_sum;

  // ---- backward ----
  grads->unembed.noalias() += fin.transpose() * dlogits;
  Mat<S> dfin = dlogits * params.unembed.transpose();
  Mat<S> dres = Mat<S>::Zero(T, d);  // gradient wrt the running residual
  rmsnorm_backward(hidden.back(), params.final_norm_gain, dfin, dres, grads->final_norm_gain);

  for (int layer = cfg.n_layers; layer >= 1; --layer) {
    const auto& lp = params.layers[static_cast<size_t>(layer - 1)];
    auto& gl = grads->layers[static_cast<size_t>(layer - 1)];
    const auto& st = stash[static_cast<size_t>(layer - 1)];
    const Mat<S>& h_prev = hidden[static_cast<size_t>(layer - 1)];

    // h = u + m, m = z w_down, z = gelu(nm w_up), nm = rmsnorm(u)
    gl.w_down.noalias() += st.z.transpose() * dres;
    Mat<S> dz = dres * lp.w_down.transpose();
    Mat<S> dz_pre = dz.cwiseProduct(gelu_derivative(st.z_pre));
    gl.w_up.noalias() += st.nm.transpose() * dz_pre;
    Mat<S> dnm = dz_pre * lp.w_up.transpose();
    Mat<S> du = dres;
    rmsnorm_backward(st.u, lp.mlp_norm_gain, dnm, du, gl.mlp_norm_gain);

    // u = h_prev + a, a = attn_concat wo
    Mat<S> dh_prev = du;
    gl.wo.noalias() += st.attn_concat.transpose() * du;
    Mat<S> dconcat = du * lp.wo.transpose();

    Mat<S> dq(T, d), dk(T, d), dv(T, d);
    for (int head = 0; head < H; ++head) {
      const auto v_blk = st.v.middleCols(head * hd, hd);
      const auto dco = dconcat.middleCols(head * hd, hd);
      const Mat<S>& attn = st.attn[static_cast<size_t>(head)];
      Mat<S> dattn = dco * v_blk.transpose();
      dv.middleCols(head * hd, hd).noalias() = attn.transpose() * dco;
      Mat<S> dscores(T, T);
      for (int i = 0; i < T; ++i) {
        const S dot = dattn.row(i).dot(attn.row(i));
        dscores.row(i) = attn.row(i).cwiseProduct((dattn.row(i).array() - dot).matrix());
      }
      dscores *= inv_sqrt_hd;
      dq.middleCols(head * hd, hd).noalias() = dscores * st.k.middleCols(head * hd, hd);
      dk.middleCols(head * hd, hd).noalias() = dscores.transpose() * st.q.middleCols(head * hd, hd);
    }
    gl.wq.noalias() += st.n.transpose() * dq;
    gl.wk.noalias() += st.n.transpose() * dk;
    gl.wv.noalias() += h_prev.transpose() * dv;
    Mat<S> dn = dq * lp.wq.transpose() + dk * lp.wk.transpose();
    dh_prev += dv * lp.wv.transpose();
    rmsnorm_backward(h_prev, lp.attn_norm_gain, dn, dh_prev, gl.attn_norm_gain);
    dres = std::move(dh_prev);
  }

  for (int i = 0; i < T; ++i) {
    grads->pos.row(i) += dres.row(i);
    grads->embed.row(item.ids[static_cast<size_t>(i)]) += dres.row(i);
  }
  return loss_sum;
}

template <class S>
struct AdamState {
  ParamsT<S> m, v;
  int t = 0;
};

template <class S>
void adam_step(ParamsT<S>& params, ParamsT<S>& grads, AdamState<S>& state, double lr) {
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, state.t);
  const double bc2 = 1.0 - std::pow(beta2, state.t);

  std::vector<Mat<S>*> pm, gm, mm, vm;
  params.for_each_tensor([&](const std::string&, Mat<S>& t_) { pm.push_back(&t_); });
  grads.for_each_tensor([&](const std::string&, Mat<S>& t_) { gm.push_back(&t_); });
  state.m.for_each_tensor([&](const std::string&, Mat<S>& t_) { mm.push_back(&t_); });
  state.v.for_each_tensor([&](const std::string&, Mat<S>& t_) { vm.push_back(&t_); });

  for (size_t k = 0; k < pm.size(); ++k) {
    Mat<S>& p = *pm[k];
    const Mat<S>& g = *gm[k];
    Mat<S>& m = *mm[k];
    Mat<S>& v = *vm[k];
    m = static_cast<S>(beta1) * m + static_cast<S>(1.0 - beta1) * g;
    v = static_cast<S>(beta2) * v + static_cast<S>(1.0 - beta2) * g.cwiseProduct(g);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double mhat = static_cast<double>(m.data()[i]) / bc1;
      const double vhat = static_cast<double>(v.data()[i]) / bc2;
      p.data()[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

double lr_at(double base, int step, int warmup) {
  if (warmup <= 0 || step >= warmup) return base;
  return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

template <class S, class MakeBatch>
void run_training_steps(ParamsT<S>& params, MakeBatch&& make_batch, int steps, double base_lr,
                        int warmup, int log_interval, TrainReport* report) {
  AdamState<S> adam{zeros_like(params), zeros_like(params), 0};
  ParamsT<S> grads = zeros_like(params);
  double last_loss = 0.0;
  for (int step = 0; step < steps; ++step) {
    std::vector<BatchItem<S>> batch = make_batch(step);
    double weight_norm = 0.0;
    for (const auto& item : batch)
      for (double w : item.weight) weight_norm += w;
    if (weight_norm <= 0.0) continue;
    grads.for_each_tensor([](const std::string&, Mat<S>& m) { m.setZero(); });
    double loss_sum = 0.0;
    for (const auto& item : batch)
      loss_sum += sequence_loss_and_grad(params, item, weight_norm, &grads);
    const double loss = loss_sum / weight_norm;
    if (!std::isfinite(loss)) throw TrainingDiverged(step);
    const double lr = lr_at(base_lr, step, warmup);
    adam_step(params, grads, adam, lr);
    last_loss = loss;
    if (report && (step % log_interval == 0 || step == steps - 1))
      report->log.push_back({step, loss, lr});
  }
  if (report) report->final_loss = last_loss;
}

}  // namespace

template <class S>
double batch_loss_and_grad(const ParamsT<S>& params, const std::vector<BatchItem<S>>& batch,
                           ParamsT<S>* grads) {
  double weight_norm = 0.0;
  for (const auto& item : batch)
    for (double w : item.weight) weight_norm += w;
  require(weight_norm > 0.0, "batch has zero total weight");
  double loss_sum = 0.0;
  for (const auto& item : batch)
    loss_sum += sequence_loss_and_grad(params, item, weight_norm, grads);
  return loss_sum / weight_norm;
}

template <class S>
double sequence_loss(const ParamsT<S>& params, const std::vector<int>& ids) {
  BatchItem<S> item;
  item.ids = ids;
  item.weight.assign(ids.size() - 1, 1.0);
  return sequence_loss_and_grad<S>(params, item, 1.0, nullptr) /
         static_cast<double>(ids.size() - 1);
}

template <class S>
ParamsT<S> train(const ModelConfig& config, const std::vector<int>& corpus,
                 const TrainSchedule& schedule, TrainReport* report) {
  require(!corpus.empty(), "training corpus is empty");
  require(corpus.size() >= static_cast<size_t>(schedule.seq_len) + 1,
          "corpus shorter than one training sequence");
  ModelConfig cfg = config;
  cfg.validate();
  require(schedule.seq_len <= cfg.max_seq_len, "schedule seq_len exceeds max_seq_len");
  ParamsT<S> params = init_params<S>(cfg);
  Rng rng(schedule.seed, "train-batches");
  const size_t max_offset = corpus.size() - static_cast<size_t>(schedule.seq_len) - 1;

  auto make_batch = [&](int) {
    std::vector<BatchItem<S>> batch(static_cast<size_t>(schedule.batch_size));
    for (auto& item : batch) {
      const size_t off = rng.uniform_int(max_offset + 1);
      item.ids.assign(corpus.begin() + static_cast<std::ptrdiff_t>(off),
                      corpus.begin() + static_cast<std::ptrdiff_t>(off) + schedule.seq_len + 1);
      item.weight.assign(static_cast<size_t>(schedule.seq_len), 1.0);
    }
    return batch;
  };
  run_training_steps(params, make_batch, schedule.steps, schedule.learning_rate,
                     schedule.warmup_steps, schedule.log_interval, report);
  if (report && schedule.target_loss && report->final_loss > *schedule.target_loss) {
    report->target_missed = true;
    report->warnings.push_back("final loss " + std::to_string(report->final_loss) +
                               " above target " + std::to_string(*schedule.target_loss));
  }
  return params;
}

template <class S>
ParamsT<S> fine_tune(const ParamsT<S>& start, const std::vector<TuningPair>& dataset,
                     const FineTuneSchedule& schedule, int eot_id, TrainReport* report) {
  ParamsT<S> params = start;
  if (schedule.epochs <= 0 || dataset.empty()) {
    if (report) report->final_loss = 0.0;
    return params;
  }
  Rng rng(schedule.seed, "finetune-order");
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto build_item = [&](const TuningPair& pair) {
    require(!pair.prompt.empty() && !pair.target.empty(),
            "tuning pair needs non-empty prompt and target");
    BatchItem<S> item;
    item.ids = pair.prompt;
    item.ids.insert(item.ids.end(), pair.target.begin(), pair.target.end());
    item.ids.push_back(eot_id);
    item.weight.assign(item.ids.size() - 1, 0.0);
    // predictions of the target tokens and the closing eot carry loss
    for (size_t i = pair.prompt.size() - 1; i < item.ids.size() - 1; ++i) item.weight[i] = 1.0;
    return item;
  };

  const int steps_per_epoch =
      static_cast<int>((dataset.size() + static_cast<size_t>(schedule.batch_size) - 1) /
                       static_cast<size_t>(schedule.batch_size));
  const int total_steps = steps_per_epoch * schedule.epochs;

  std::vector<size_t> epoch_order;
  auto make_batch = [&](int step) {
    const int step_in_epoch = step % steps_per_epoch;
    if (step_in_epoch == 0) {
      epoch_order = order;
      rng.shuffle(epoch_order);
    }
    std::vector<BatchItem<S>> batch;
    const size_t begin = static_cast<size_t>(step_in_epoch) * schedule.batch_size;
    const size_t end = std::min(dataset.size(), begin + static_cast<size_t>(schedule.batch_size));
    for (size_t k = begin; k < end; ++k) batch.push_back(build_item(dataset[epoch_order[k]]));
    return batch;
  };
  run_training_steps(params, make_batch, total_steps, schedule.learning_rate,
                     schedule.warmup_steps, 1, report);
  return params;
}

template ParamsT<float> train<float>(const ModelConfig&, const std::vector<int>&,
                                     const TrainSchedule&, TrainReport*);
template ParamsT<double> train<double>(const ModelConfig&, const std::vector<int>&,
                                       const TrainSchedule&, TrainReport*);
template ParamsT<float> fine_tune<float>(const ParamsT<float>&, const std::vector<TuningPair>&,
                                         const FineTuneSchedule&, int, TrainReport*);
template ParamsT<double> fine_tune<double>(const ParamsT<double>&, const std::vector<TuningPair>&,
                                           const FineTuneSchedule&, int, TrainReport*);
template double sequence_loss<float>(const ParamsT<float>&, const std::vector<int>&);
template double sequence_loss<double>(const ParamsT<double>&, const std::vector<int>&);
template double batch_loss_and_grad<float>(const ParamsT<float>&,
                                           const std::vector<BatchItem<float>>&, ParamsT<float>*);
template double batch_loss_and_grad<double>(const ParamsT<double>&,
                                            const std::vector<BatchItem<double>>&,
                                            ParamsT<double>*);

}  // namespace knowtrace::model
