// Copyright 2026 The Brainformer Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Value-level math shared by the autodiff ops and by the routing code.
// Everything here is a pure function of its Eigen arguments.

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "brainformer/errors.hpp"

namespace brainformer::kernels {

template <typename Scalar>
Scalar relu(Scalar x) {
  return x > Scalar(0) ? x : Scalar(0);
}

template <typename Scalar>
Scalar relu_derivative(Scalar x) {
  return x > Scalar(0) ? Scalar(1) : Scalar(0);
}

// Exact erf form, no tanh approximation.
template <typename Scalar>
Scalar gelu(Scalar x) {
  using std::erf;
  return Scalar(0.5) * x * (Scalar(1) + erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  using std::erf;
  using std::exp;
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + erf(x / std::numbers::sqrt2_v<Scalar>));
  const Scalar pdf = exp(Scalar(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Scalar> /
                     std::numbers::sqrt2_v<Scalar>;
  return cdf + x * pdf;
}

/// Softmax of every row, stabilised by subtracting the row max.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
softmax_cols(const Eigen::MatrixBase<Derived>& x) {
  return softmax_rows(x.transpose()).transpose();
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& row) {
  using std::exp;
  using std::log;
  const auto m = row.maxCoeff();
  return m + log((row.array() - m).exp().sum());
}

/// Indices of the k largest entries, largest first. Equal values are
/// ordered by ascending index, so the result is fully deterministic.
template <typename Derived>
std::vector<int> top_k_indices(const Eigen::DenseBase<Derived>& scores, int k) {
  const auto n = static_cast<int>(scores.size());
  if (k < 0 || k > n) {
    throw InputError("top_k_indices: k=" + std::to_string(k) + " exceeds length " +
                     std::to_string(n));
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](int a, int b) {
    const auto va = scores(a);
    const auto vb = scores(b);
    return va > vb || (va == vb && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), better);
  order.resize(static_cast<std::size_t>(k));
  return order;
}

template <typename Derived>
int argmax(const Eigen::DenseBase<Derived>& scores) {
  return top_k_indices(scores, 1).front();
}

}  // namespace brainformer::kernels
