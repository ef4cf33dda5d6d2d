// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace knowtrace {

// Row-major throughout: a sequence is a (tokens x features) matrix.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecD = Vec<double>;
using VecF = Vec<float>;

/// Thrown when an input violates a documented precondition.
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown on I/O failures and corrupt artifacts.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidInput(msg);
}

}  // namespace knowtrace
