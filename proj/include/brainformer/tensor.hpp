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

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every op of one forward pass in execution order, which is
// also a topological order. backward() walks the tape once in reverse and
// then the tape is spent: values stay readable, a second backward throws.
// Scalars are 1x1 matrices; rows are tokens, columns are features.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "brainformer/errors.hpp"

namespace brainformer {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// A trainable tensor owned by a model. Gradients from every tape that
/// reads it accumulate into `grad` until zero_grad().
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  /// Gradient after backward(); an empty matrix if nothing flowed here.
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the gradient of the node being processed.
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);
  /// Leaf that reads p.value and, on backward, adds its gradient to p.grad.
  Var parameter(Parameter& p);

  /// Appends an op. `inputs` must already be on this tape. If none of them
  /// requires a gradient the backward rule is dropped. Throws NumericError
  /// when `value` holds NaN/Inf.
  Var record(Matrix value, std::vector<Var> inputs, BackwardFn backward, const char* op);

  /// Adds `g` into the gradient of `v` (no-op for constants).
  void accumulate(const Var& v, const Matrix& g);

  /// Propagates d(loss)/d(node) to every node that requires a gradient.
  void backward(const Var& loss);

  bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool spent() const { return spent_; }

 private:
  friend class Var;

  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* sink = nullptr;  // parameter leaves read sink->value in place
    bool requires_grad = false;

    const Matrix& data() const { return sink != nullptr ? sink->value : value; }
  };

  Var push(Node node);
  void check_owned(const Var& v, const char* op) const;

  // deque keeps node references stable while the tape grows.
  std::deque<Node> nodes_;
  bool spent_ = false;
};

// ---- differentiable ops -----------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
/// a[m,n] + row[1,n] broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var mul(const Var& a, const Var& b);
/// a[m,n] * col[m,1] broadcast over columns.
Var mul_col(const Var& a, const Var& col);
Var scale(const Var& a, Scalar s);
Var sum(const Var& a);
Var mean(const Var& a);
/// [m,n] -> [1,n]
Var column_sums(const Var& a);

/// axis 0 normalises each column, axis 1 each row.
Var softmax(const Var& x, int axis);
/// Row softmax restricted to columns j <= i; masked entries are exactly 0.
Var causal_softmax(const Var& scores);

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps = 1e-6);

enum class Activation { ReLU, GeLU, GatedReLU, GatedGeLU };

bool is_gated(Activation a);
/// Base nonlinearity of a (possibly gated) kind.
Activation base_activation(Activation a);

/// Elementwise ReLU or GeLU. Gated kinds need the two-stream overload.
Var activation(const Var& x, Activation kind);
/// act(u) * v for gated kinds.
Var activation(const Var& u, const Var& v, Activation kind);

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Var cross_entropy(const Var& logits, std::span<const int> targets);

Var gather_rows(const Var& table, std::span<const int> rows);
/// out[n_rows, cols] with out[rows[i]] += src[i].
Var scatter_add_rows(const Var& src, std::span<const int> rows, Index n_rows);
/// Column vector of a(r_i, c_i).
Var gather_elements(const Var& a, std::span<const std::pair<int, int>> at);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_cols(std::span<const Var> parts);

/// Indices of the k largest entries of a row; ties go to the lower index.
std::vector<int> top_k_indices(const Matrix& row, int k);

}  // namespace brainformer
