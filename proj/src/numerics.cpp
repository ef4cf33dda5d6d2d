// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/numerics.hpp"

#include "knowtrace/rng.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace knowtrace::numerics {

namespace {

constexpr double kLog2 = 0.69314718055994530941723212145818;

double log2_safe(double x) { return std::log(x) / kLog2; }

// 0 * log 0 := 0 throughout.
double xlog2x(double x) { return x > 0.0 ? x * log2_safe(x) : 0.0; }

void check_distribution(const VecD& p) {
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0)) {
      std::ostringstream os;
      os << "distribution entry " << i << " is negative or NaN: " << p[i];
      throw InvalidInput(os.str());
    }
  }
  const double sum = p.sum();
  if (std::abs(sum - 1.0) > 1e-6) {
    std::ostringstream os;
    os.precision(12);
    os << "distribution sums to " << sum << ", expected 1 within 1e-6";
    throw InvalidInput(os.str());
  }
}

}  // namespace

Distribution::Distribution(VecD probs) : probs_(std::move(probs)) {
  require(probs_.size() > 0, "distribution must be non-empty");
  check_distribution(probs_);
}

OrthonormalBasis::OrthonormalBasis(MatD vectors, double energy_fraction)
    : vectors_(std::move(vectors)), energy_fraction_(energy_fraction) {
  require(vectors_.cols() >= 1, "basis must contain at least one vector");
  require(energy_fraction_ > 0.0 && energy_fraction_ <= 1.0,
          "energy_fraction must be in (0, 1]");
  for (Eigen::Index i = 0; i < vectors_.cols(); ++i) {
    const double n = vectors_.col(i).norm();
    if (std::abs(n - 1.0) > 1e-5) {
      std::ostringstream os;
      os << "basis vector " << i << " has norm " << n << ", expected 1 within 1e-5";
      throw InvalidInput(os.str());
    }
    for (Eigen::Index j = i + 1; j < vectors_.cols(); ++j) {
      const double d = vectors_.col(i).dot(vectors_.col(j));
      if (std::abs(d) > 1e-5) {
        std::ostringstream os;
        os << "basis vectors " << i << " and " << j << " are not orthogonal (dot " << d << ")";
        throw InvalidInput(os.str());
      }
    }
  }
}

double js_divergence(const Distribution& p, const Distribution& q) {
  require(p.size() == q.size(), "js_divergence: dimension mismatch");
  double js = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    js += 0.5 * (xlog2x(p[i]) + xlog2x(q[i])) - xlog2x(m);
  }
  // Clamp roundoff at the boundaries.
  return std::min(1.0, std::max(0.0, js));
}

double entropy(const Distribution& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) h -= xlog2x(p[i]);
  return std::max(0.0, h);
}

double cosine_similarity(const VecD& u, const VecD& v) {
  require(u.size() == v.size(), "cosine_similarity: dimension mismatch");
  const double nu = u.norm();
  const double nv = v.norm();
  require(nu > 0.0, "cosine_similarity: first vector is zero");
  require(nv > 0.0, "cosine_similarity: second vector is zero");
  return std::min(1.0, std::max(-1.0, u.dot(v) / (nu * nv)));
}

OrthonormalBasis top_singular_subspace(const MatD& W, double energy_fraction) {
  require(W.allFinite(), "top_singular_subspace: matrix has non-finite entries");
  require(energy_fraction > 0.0 && energy_fraction <= 1.0,
          "top_singular_subspace: energy_fraction must be in (0, 1]");
  Eigen::JacobiSVD<MatD> svd(W, Eigen::ComputeThinV);
  const VecD& sv = svd.singularValues();
  double total = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) total += sv[i] * sv[i];
  require(total > 0.0, "top_singular_subspace: matrix is zero");
  Eigen::Index k = 0;
  double acc = 0.0;
  while (k < sv.size()) {
    acc += sv[k] * sv[k];
    ++k;
    if (acc >= energy_fraction * total - 1e-12) break;
  }
  return OrthonormalBasis(svd.matrixV().leftCols(k), energy_fraction);
}

double subspace_overlap(const VecD& x, const OrthonormalBasis& V) {
  require(x.size() == V.dim(), "subspace_overlap: dimension mismatch");
  const double nx2 = x.squaredNorm();
  require(nx2 > 0.0, "subspace_overlap: x is zero");
  const VecD coords = V.vectors().transpose() * x;
  return std::min(1.0, std::max(0.0, coords.squaredNorm() / nx2));
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "auroc: scores/labels length mismatch");
  require(!scores.empty(), "auroc: empty input");
  size_t n_pos = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, "auroc: labels must be 0/1");
    n_pos += static_cast<size_t>(l);
  }
  const size_t n_neg = scores.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, "auroc: both classes must be present");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Midranks over tie groups, then the Mann-Whitney rank-sum statistic.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) rank_sum_pos += midrank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double ProbeModel::predict_proba(const VecD& x) const {
  double z = bias;
  for (size_t k = 0; k < kept_features.size(); ++k) {
    const double v = (x[kept_features[k]] - feature_mean[static_cast<Eigen::Index>(k)]) /
                     feature_std[static_cast<Eigen::Index>(k)];
    z += weights[static_cast<Eigen::Index>(k)] * v;
  }
  return 1.0 / (1.0 + std::exp(-z));
}

double logistic_loss(const MatD& X, const std::vector<int>& labels, const VecD& w, double b,
                     double l2) {
  const Eigen::Index n = X.rows();
  VecD z = X * w;
  z.array() += b;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double zi = z[i];
    const double m = std::max(0.0, zi);
    loss += m - labels[static_cast<size_t>(i)] * zi + std::log(std::exp(-m) + std::exp(zi - m));
  }
  loss /= static_cast<double>(n);
  loss += 0.5 * l2 * w.squaredNorm();
  return loss;
}

void logistic_gradient(const MatD& X, const std::vector<int>& labels, const VecD& w, double b,
                       double l2, VecD& grad_w, double& grad_b) {
  const Eigen::Index n = X.rows();
  VecD z = X * w;
  z.array() += b;
  VecD resid(n);
  for (Eigen::Index i = 0; i < n; ++i)
    resid[i] = 1.0 / (1.0 + std::exp(-z[i])) - labels[static_cast<size_t>(i)];
  grad_w = (X.transpose() * resid) / static_cast<double>(n) + l2 * w;
  grad_b = resid.sum() / static_cast<double>(n);
}

ProbeModel fit_logistic_probe(const MatD& features, const std::vector<int>& labels,
                              double l2, uint64_t seed, double step, int max_epochs) {
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  require(static_cast<size_t>(n) == labels.size(), "probe: rows/labels mismatch");
  require(l2 >= 0.0, "probe: l2 must be >= 0");
  Eigen::Index n_pos = 0;
  for (int l : labels) n_pos += l;
  require(n_pos >= 2 && n - n_pos >= 2, "probe: need at least 2 samples per class");

  ProbeModel model;
  VecD mean = features.colwise().mean();
  for (Eigen::Index j = 0; j < d; ++j) {
    const double var = (features.col(j).array() - mean[j]).square().sum() / static_cast<double>(n);
    if (var > 1e-12) {
      model.kept_features.push_back(static_cast<int>(j));
    } else {
      model.dropped_features.push_back(static_cast<int>(j));
    }
  }
  const Eigen::Index kept = static_cast<Eigen::Index>(model.kept_features.size());
  require(kept > 0, "probe: degenerate feature matrix (all features constant)");

  MatD X(n, kept);
  model.feature_mean.resize(kept);
  model.feature_std.resize(kept);
  for (Eigen::Index k = 0; k < kept; ++k) {
    const Eigen::Index j = model.kept_features[static_cast<size_t>(k)];
    const double var =
        (features.col(j).array() - mean[j]).square().sum() / static_cast<double>(n);
    const double sd = std::sqrt(var);
    model.feature_mean[k] = mean[j];
    model.feature_std[k] = sd;
    X.col(k) = (features.col(j).array() - mean[j]) / sd;
  }

  Rng rng(seed, "probe-init");
  VecD w(kept);
  for (Eigen::Index k = 0; k < kept; ++k) w[k] = 1e-2 * rng.gaussian();
  double b = 0.0;

  double cur_loss = logistic_loss(X, labels, w, b, l2);
  model.loss_history.push_back(cur_loss);
  double lr = step;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    VecD gw;
    double gb = 0.0;
    logistic_gradient(X, labels, w, b, l2, gw, gb);
    const double gnorm = std::sqrt(gw.squaredNorm() + gb * gb);
    if (gnorm <= 1e-6) break;
    // Halve the step until the loss does not increase.
    while (true) {
      VecD w_try = w - lr * gw;
      double b_try = b - lr * gb;
      double loss_try = logistic_loss(X, labels, w_try, b_try, l2);
      if (loss_try <= cur_loss || lr < 1e-12) {
        w = std::move(w_try);
        b = b_try;
        cur_loss = loss_try;
        break;
      }
      lr *= 0.5;
    }
    model.loss_history.push_back(cur_loss);
  }

  model.weights = std::move(w);
  model.bias = b;
  return model;
}

MatD pca_project(const MatD& points, int dims) {
  require(dims >= 1, "pca_project: dims must be >= 1");
  require(points.rows() >= 2, "pca_project: need at least 2 points");
  require(dims <= points.cols(), "pca_project: dims exceeds point dimension");
  MatD centered = points.rowwise() - points.colwise().mean();
  MatD cov = (centered.transpose() * centered) / static_cast<double>(points.rows() - 1);
  Eigen::SelfAdjointEigenSolver<MatD> eig(cov);
  // Eigenvalues ascend; take the trailing `dims` columns in reverse.
  MatD axes(points.cols(), dims);
  for (int k = 0; k < dims; ++k) {
    VecD v = eig.eigenvectors().col(cov.cols() - 1 - k);
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v[imax] < 0) v = -v;
    axes.col(k) = v;
  }
  return centered * axes;
}

}  // namespace knowtrace::numerics
