// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/common.hpp"

#include <cmath>
#include <limits>

// Shared primitives for the traced and training forward passes. Both paths
// must call these so their outputs agree bitwise.
namespace knowtrace::model {

inline constexpr double kNormEps = 1e-6;

template <class S>
Mat<S> rmsnorm_rows(const Mat<S>& x, const Mat<S>& gain) {
  Mat<S> y(x.rows(), x.cols());
  const S eps = static_cast<S>(kNormEps);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S ms = x.row(i).squaredNorm() / static_cast<S>(x.cols());
    const S inv = S(1) / std::sqrt(ms + eps);
    y.row(i) = (x.row(i) * inv).cwiseProduct(gain.row(0));
  }
  return y;
}

/// Inverse RMS per row, as used by rmsnorm_rows (needed for backward).
template <class S>
Vec<S> rms_inverse_rows(const Mat<S>& x) {
  Vec<S> inv(x.rows());
  const S eps = static_cast<S>(kNormEps);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S ms = x.row(i).squaredNorm() / static_cast<S>(x.cols());
    inv[i] = S(1) / std::sqrt(ms + eps);
  }
  return inv;
}

template <class S>
void apply_causal_mask(Mat<S>& scores) {
  const S neg_inf = -std::numeric_limits<S>::infinity();
  for (Eigen::Index i = 0; i < scores.rows(); ++i)
    for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = neg_inf;
}

/// Row-wise softmax; -inf entries get exactly zero weight. At least one
/// finite entry per row is assumed (the causal diagonal is never masked).
template <class S>
Mat<S> softmax_rows(const Mat<S>& scores) {
  Mat<S> out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const S maxv = scores.row(i).maxCoeff();
    out.row(i) = (scores.row(i).array() - maxv).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline constexpr double kGeluCoeff = 0.044715;
inline const double kGeluScale = std::sqrt(2.0 / 3.14159265358979323846);

template <class S>
Mat<S> gelu(const Mat<S>& x) {
  const S c = static_cast<S>(kGeluCoeff);
  const S s = static_cast<S>(kGeluScale);
  auto v = x.array();
  Mat<S> y = (S(0.5) * v * (S(1) + (s * (v + c * v.cube())).tanh())).matrix();
  return y;
}

template <class S>
Mat<S> gelu_derivative(const Mat<S>& x) {
  const S c = static_cast<S>(kGeluCoeff);
  const S s = static_cast<S>(kGeluScale);
  auto v = x.array();
  auto t = (s * (v + c * v.cube())).tanh();
  Mat<S> y =
      (S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t.square()) * s * (S(1) + S(3) * c * v.square()))
          .matrix();
  return y;
}

/// Softmax of a logit row computed in double precision; sums to 1 closely
/// enough for strict distribution validation downstream.
template <class S>
VecD softmax_double(const RowVec<S>& logits) {
  VecD p(logits.size());
  double maxv = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    maxv = std::max(maxv, static_cast<double>(logits[i]));
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - maxv);
    sum += p[i];
  }
  p /= sum;
  return p;
}

/// RMS-norm backward: given upstream gradient dY, accumulates dX and dGain.
template <class S>
void rmsnorm_backward(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& dy, Mat<S>& dx_accum,
                      Mat<S>& dgain_accum) {
  const S eps = static_cast<S>(kNormEps);
  const S dim = static_cast<S>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S ms = x.row(i).squaredNorm() / dim;
    const S inv = S(1) / std::sqrt(ms + eps);
    RowVec<S> t = dy.row(i).cwiseProduct(gain.row(0));
    const S dot = t.dot(x.row(i));
    dx_accum.row(i) += inv * t - (inv * inv * inv / dim * dot) * x.row(i);
    dgain_accum.row(0) += dy.row(i).cwiseProduct(x.row(i) * inv);
  }
}

}  // namespace knowtrace::model
