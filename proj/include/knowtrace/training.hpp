// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/model.hpp"

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace knowtrace::model {

struct TrainSchedule {
  int steps = 4000;
  int batch_size = 32;
  int seq_len = 64;
  double learning_rate = 1e-3;
  int warmup_steps = 50;
  uint64_t seed = 0;
  std::optional<double> target_loss;  // warn if the final loss stays above it
  int log_interval = 100;
};

struct FineTuneSchedule {
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int warmup_steps = 0;
  uint64_t seed = 0;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainReport {
  std::vector<TrainLogEntry> log;
  double final_loss = 0.0;
  bool target_missed = false;
  std::vector<std::string> warnings;
};

/// Thrown when the training loss turns non-finite.
struct TrainingDiverged : std::runtime_error {
  int step;
  explicit TrainingDiverged(int s)
      : std::runtime_error("training loss diverged (NaN/inf) at step " + std::to_string(s)),
        step(s) {}
};

/// A (prompt -> completion) pair for supervised tuning. Loss is applied to
/// the completion tokens (and the closing eot) only.
struct TuningPair {
  std::vector<int> prompt;
  std::vector<int> target;  // completion tokens, eot appended internally
};

/// Next-token cross-entropy training with Adam over a flat token stream.
/// Deterministic for a fixed schedule seed and thread count.
template <class S>
ParamsT<S> train(const ModelConfig& config, const std::vector<int>& corpus,
                 const TrainSchedule& schedule, TrainReport* report = nullptr);

/// One-epoch-by-default supervised tuning, initialized from trained params.
template <class S>
ParamsT<S> fine_tune(const ParamsT<S>& params, const std::vector<TuningPair>& dataset,
                     const FineTuneSchedule& schedule, int eot_id,
                     TrainReport* report = nullptr);

/// Mean cross-entropy of the model on one sequence (next-token, all
/// positions). Exposed for memorization checks.
template <class S>
double sequence_loss(const ParamsT<S>& params, const std::vector<int>& ids);

// Internal surface used by the finite-difference tests: weighted-CE loss and
// parameter gradients for a batch of sequences.
template <class S>
struct BatchItem {
  std::vector<int> ids;        // inputs; targets are ids shifted by one
  std::vector<double> weight;  // per-prediction weights, size ids.size() - 1
};

template <class S>
double batch_loss_and_grad(const ParamsT<S>& params, const std::vector<BatchItem<S>>& batch,
                           ParamsT<S>* grads);

extern template ParamsT<float> train<float>(const ModelConfig&, const std::vector<int>&,
                                            const TrainSchedule&, TrainReport*);
extern template ParamsT<double> train<double>(const ModelConfig&, const std::vector<int>&,
                                              const TrainSchedule&, TrainReport*);
extern template ParamsT<float> fine_tune<float>(const ParamsT<float>&,
                                                const std::vector<TuningPair>&,
                                                const FineTuneSchedule&, int, TrainReport*);
extern template ParamsT<double> fine_tune<double>(const ParamsT<double>&,
                                                  const std::vector<TuningPair>&,
                                                  const FineTuneSchedule&, int, TrainReport*);
extern template double sequence_loss<float>(const ParamsT<float>&, const std::vector<int>&);
extern template double sequence_loss<double>(const ParamsT<double>&, const std::vector<int>&);
extern template double batch_loss_and_grad<float>(const ParamsT<float>&,
                                                  const std::vector<BatchItem<float>>&,
                                                  ParamsT<float>*);
extern template double batch_loss_and_grad<double>(const ParamsT<double>&,
                                                   const std::vector<BatchItem<double>>&,
                                                   ParamsT<double>*);

}  // namespace knowtrace::model
