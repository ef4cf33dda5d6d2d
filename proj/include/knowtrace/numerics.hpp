// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/common.hpp"

#include <cstdint>
#include <optional>
#include <vector>

// Dense linear-algebra and statistics kernels shared by the rest of the
// pipeline. All functions are pure; everything here is double precision.
namespace knowtrace::numerics {

/// Probability vector over a vocabulary. Entries >= 0, sum to 1 within 1e-6.
class Distribution {
 public:
  explicit Distribution(VecD probs);
  const VecD& probs() const { return probs_; }
  Eigen::Index size() const { return probs_.size(); }
  double operator[](Eigen::Index i) const { return probs_[i]; }

 private:
  VecD probs_;
};

/// Orthonormal column set (pairwise dot < 1e-5, norms within 1e-5 of 1).
class OrthonormalBasis {
 public:
  OrthonormalBasis(MatD vectors, double energy_fraction);
  /// One basis vector per column, ordered by descending singular value.
  const MatD& vectors() const { return vectors_; }
  Eigen::Index dim() const { return vectors_.rows(); }
  Eigen::Index count() const { return vectors_.cols(); }
  double energy_fraction() const { return energy_fraction_; }

 private:
  MatD vectors_;
  double energy_fraction_;
};

/// Base-2 Jensen-Shannon divergence, in [0, 1]. Symmetric; 0 iff p == q.
double js_divergence(const Distribution& p, const Distribution& q);

/// Base-2 Shannon entropy. 0 for a point mass, log2(n) for uniform over n.
double entropy(const Distribution& p);

/// Standard cosine similarity in [-1, 1]. Rejects zero vectors.
double cosine_similarity(const VecD& u, const VecD& v);

/// Right-singular vectors of W spanning the smallest top subspace whose
/// squared singular values reach energy_fraction of the total energy.
OrthonormalBasis top_singular_subspace(const MatD& W, double energy_fraction);

/// Overlap ratio ||x^T V V^T||^2 / ||x||^2 in [0, 1].
double subspace_overlap(const VecD& x, const OrthonormalBasis& V);

/// Mann-Whitney AUROC: P(random positive outscores random negative), ties 1/2.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Linear probe over standardized features.
struct ProbeModel {
  VecD weights;                   // one weight per kept feature
  double bias = 0.0;
  VecD feature_mean;              // kept features, fit-time statistics
  VecD feature_std;               // kept features, all > 0
  std::vector<int> kept_features; // column indices that survived variance screen
  std::vector<int> dropped_features;
  std::vector<double> loss_history;

  /// P(label = 1) for a raw (unstandardized, full-width) feature vector.
  double predict_proba(const VecD& x) const;
};

/// Mean logistic loss plus L2 penalty on already-standardized features.
double logistic_loss(const MatD& X, const std::vector<int>& labels, const VecD& w, double b,
                     double l2);

/// Gradient of logistic_loss wrt (w, b).
void logistic_gradient(const MatD& X, const std::vector<int>& labels, const VecD& w, double b,
                       double l2, VecD& grad_w, double& grad_b);

/// Standardize features (dropping zero-variance columns), then fit
/// L2-regularized logistic regression by full-batch gradient descent.
/// Step starts at `step` and halves whenever a step would increase the loss,
/// so recorded epoch losses are non-increasing. Stops at gradient norm
/// <= 1e-6 or max_epochs.
ProbeModel fit_logistic_probe(const MatD& features, const std::vector<int>& labels,
                              double l2, uint64_t seed, double step = 0.1,
                              int max_epochs = 1000);

/// Mean-centered projection of points (rows) onto the top `dims` principal
/// axes. Deterministic: each axis is sign-fixed so its largest-magnitude
/// component is positive.
MatD pca_project(const MatD& points, int dims);

}  // namespace knowtrace::numerics
