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

#include "brainformer/tensor.hpp"

#include <cmath>
#include <sstream>

#include "brainformer/kernels.hpp"

namespace brainformer {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << '[' << m.rows() << ',' << m.cols() << ']';
  return os.str();
}

[[noreturn]] void shape_mismatch(const char* op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(op, a.value(), b.value());
}

}  // namespace

// ---- Var / Tape -------------------------------------------------------------

const Matrix& Var::value() const {
  if (tape_ == nullptr) throw UsageError("Var: empty handle");
  return tape_->nodes_[id_].data();
}

const Matrix& Var::grad() const {
  if (tape_ == nullptr) throw UsageError("Var: empty handle");
  return tape_->nodes_[id_].grad;
}

Scalar Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw UsageError("Var::item on non-scalar " + shape_str(v));
  return v(0, 0);
}

Var Tape::push(Node node) {
  if (spent_) throw UsageError("tape already consumed by backward()");
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(const Var& v, const char* op) const {
  if (v.tape_ != this) throw UsageError(std::string(op) + ": input belongs to another tape");
}

Var Tape::constant(Matrix value) { return push(Node{std::move(value), {}, {}, nullptr, false}); }

Var Tape::variable(Matrix value) { return push(Node{std::move(value), {}, {}, nullptr, true}); }

Var Tape::parameter(Parameter& p) { return push(Node{Matrix(), {}, {}, &p, true}); }

Var Tape::record(Matrix value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  if (!value.allFinite()) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
  bool needs_grad = false;
  for (const Var& in : inputs) {
    check_owned(in, op);
    needs_grad = needs_grad || nodes_[in.id_].requires_grad;
  }
  Node node{std::move(value), {}, {}, nullptr, needs_grad};
  if (needs_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& node = nodes_[v.id_];
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

void Tape::backward(const Var& loss) {
  check_owned(loss, "backward");
  if (spent_) throw UsageError("backward: tape already consumed");
  if (loss.value().size() != 1) {
    throw UsageError("backward: loss must be scalar, got " + shape_str(loss.value()));
  }
  if (!nodes_[loss.id_].requires_grad) {
    spent_ = true;
    return;
  }
  nodes_[loss.id_].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.grad.size() == 0) continue;
    if (node.backward) node.backward(*this, node.grad);
    if (node.sink != nullptr) node.sink->grad += node.grad;
  }
  for (Node& node : nodes_) node.backward = nullptr;
  spent_ = true;
}

// ---- linear algebra ---------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.value(), b.value());
  Matrix out = a.value() * b.value();
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
        if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
      },
      "matmul");
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return a.tape()->record(
      std::move(out), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); },
      "transpose");
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Matrix out = a.value() + b.value();
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
      },
      "add");
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_mismatch("add_row", a.value(), row.value());
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(
      std::move(out), {a, row},
      [a, row](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
      },
      "add_row");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
        if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
      },
      "mul");
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) shape_mismatch("mul_col", a.value(), col.value());
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return a.tape()->record(
      std::move(out), {a, col},
      [a, col](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) {
          Matrix ga = g.array().colwise() * col.value().col(0).array();
          t.accumulate(a, ga);
        }
        if (t.requires_grad(col)) {
          Matrix gc = g.cwiseProduct(a.value()).rowwise().sum();
          t.accumulate(col, gc);
        }
      },
      "mul_col");
}

Var scale(const Var& a, Scalar s) {
  Matrix out = a.value() * s;
  return a.tape()->record(
      std::move(out), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); }, "scale");
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(
      std::move(out), {a},
      [a](Tape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
      },
      "sum");
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<Scalar>(a.value().size()));
}

Var column_sums(const Var& a) {
  Matrix out = a.value().colwise().sum();
  return a.tape()->record(
      std::move(out), {a},
      [a](Tape& t, const Matrix& g) {
        Matrix ga = g.replicate(a.rows(), 1);
        t.accumulate(a, ga);
      },
      "column_sums");
}

// ---- normalisation ----------------------------------------------------------

Var softmax(const Var& x, int axis) {
  if (axis != 0 && axis != 1) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for rank-2 tensor");
  }
  Matrix y = axis == 1 ? kernels::softmax_rows(x.value()) : kernels::softmax_cols(x.value());
  Matrix y_copy = y;
  return x.tape()->record(
      std::move(y), {x},
      [x, axis, y = std::move(y_copy)](Tape& t, const Matrix& g) {
        Matrix gy = g.cwiseProduct(y);
        Matrix gx;
        if (axis == 1) {
          gx = gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix();
        } else {
          gx = gy - (y.array().rowwise() * gy.colwise().sum().array()).matrix();
        }
        t.accumulate(x, gx);
      },
      "softmax");
}

Var causal_softmax(const Var& scores) {
  const Matrix& s = scores.value();
  if (s.rows() != s.cols()) throw DimensionError("causal_softmax: expects square scores, got " + shape_str(s));
  const Index n = s.rows();
  Matrix y = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    const auto visible = s.row(i).head(i + 1);
    const Scalar m = visible.maxCoeff();
    y.row(i).head(i + 1) = (visible.array() - m).exp().matrix();
    y.row(i).head(i + 1) /= y.row(i).head(i + 1).sum();
  }
  Matrix y_copy = y;
  return scores.tape()->record(
      std::move(y), {scores},
      [scores, y = std::move(y_copy)](Tape& t, const Matrix& g) {
        // masked entries have y == 0, so their gradient is 0 as well
        Matrix gy = g.cwiseProduct(y);
        Matrix gx = gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix();
        t.accumulate(scores, gx);
      },
      "causal_softmax");
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps) {
  const Index h = x.cols();
  if (h == 0) throw DimensionError("layer_norm: feature dimension is 0");
  if (gain.rows() != 1 || gain.cols() != h) shape_mismatch("layer_norm", x.value(), gain.value());
  if (bias.rows() != 1 || bias.cols() != h) shape_mismatch("layer_norm", x.value(), bias.value());

  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), h);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  return x.tape()->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                            const Matrix& g) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (t.requires_grad(x)) {
          const auto h = static_cast<Scalar>(xhat.cols());
          Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
          Matrix dx(xhat.rows(), xhat.cols());
          for (Index r = 0; r < xhat.rows(); ++r) {
            const Scalar m1 = dxhat.row(r).sum() / h;
            const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / h;
            dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
          t.accumulate(x, dx);
        }
      },
      "layer_norm");
}

// ---- activations ------------------------------------------------------------

bool is_gated(Activation a) { return a == Activation::GatedReLU || a == Activation::GatedGeLU; }

Activation base_activation(Activation a) {
  switch (a) {
    case Activation::GatedReLU:
      return Activation::ReLU;
    case Activation::GatedGeLU:
      return Activation::GeLU;
    default:
      return a;
  }
}

Var activation(const Var& x, Activation kind) {
  if (is_gated(kind)) throw UsageError("activation: gated kinds take two input streams");
  Matrix out;
  if (kind == Activation::ReLU) {
    out = x.value().unaryExpr([](Scalar v) { return kernels::relu(v); });
  } else {
    out = x.value().unaryExpr([](Scalar v) { return kernels::gelu(v); });
  }
  return x.tape()->record(
      std::move(out), {x},
      [x, kind](Tape& t, const Matrix& g) {
        Matrix d = kind == Activation::ReLU
                       ? Matrix(x.value().unaryExpr([](Scalar v) { return kernels::relu_derivative(v); }))
                       : Matrix(x.value().unaryExpr([](Scalar v) { return kernels::gelu_derivative(v); }));
        t.accumulate(x, g.cwiseProduct(d));
      },
      kind == Activation::ReLU ? "relu" : "gelu");
}

Var activation(const Var& u, const Var& v, Activation kind) {
  if (!is_gated(kind)) throw UsageError("activation: two-stream form needs a gated kind");
  return mul(activation(u, base_activation(kind)), v);
}

// ---- losses -----------------------------------------------------------------

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const Matrix& z = logits.value();
  const Index n = z.rows();
  const Index vocab = z.cols();
  if (static_cast<Index>(targets.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  if (n == 0) throw DimensionError("cross_entropy: no rows");
  std::vector<int> tgt(targets.begin(), targets.end());
  for (int id : tgt) {
    if (id < 0 || id >= vocab) {
      throw InputError("cross_entropy: target " + std::to_string(id) + " outside [0," +
                       std::to_string(vocab) + ")");
    }
  }
  Scalar total = 0.0;
  for (Index r = 0; r < n; ++r) total += kernels::log_sum_exp(z.row(r)) - z(r, tgt[r]);
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(n);
  return logits.tape()->record(
      std::move(out), {logits},
      [logits, tgt = std::move(tgt)](Tape& t, const Matrix& g) {
        Matrix p = kernels::softmax_rows(logits.value());
        for (Index r = 0; r < p.rows(); ++r) p(r, tgt[r]) -= 1.0;
        t.accumulate(logits, p * (g(0, 0) / static_cast<Scalar>(p.rows())));
      },
      "cross_entropy");
}

// ---- indexing ---------------------------------------------------------------

Var gather_rows(const Var& table, std::span<const int> rows) {
  const Matrix& src = table.value();
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= src.rows()) {
      throw InputError("gather_rows: row " + std::to_string(idx[i]) + " outside [0," +
                       std::to_string(src.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = src.row(idx[i]);
  }
  return table.tape()->record(
      std::move(out), {table},
      [table, idx = std::move(idx)](Tape& t, const Matrix& g) {
        Matrix gt = Matrix::Zero(table.rows(), table.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Index>(i));
        t.accumulate(table, gt);
      },
      "gather_rows");
}

Var scatter_add_rows(const Var& src, std::span<const int> rows, Index n_rows) {
  if (static_cast<Index>(rows.size()) != src.rows()) {
    throw DimensionError("scatter_add_rows: index count does not match source rows");
  }
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix out = Matrix::Zero(n_rows, src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n_rows) {
      throw InputError("scatter_add_rows: row " + std::to_string(idx[i]) + " out of range");
    }
    out.row(idx[i]) += src.value().row(static_cast<Index>(i));
  }
  return src.tape()->record(
      std::move(out), {src},
      [src, idx = std::move(idx)](Tape& t, const Matrix& g) {
        Matrix gs(static_cast<Index>(idx.size()), g.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) gs.row(static_cast<Index>(i)) = g.row(idx[i]);
        t.accumulate(src, gs);
      },
      "scatter_add_rows");
}

Var gather_elements(const Var& a, std::span<const std::pair<int, int>> at) {
  std::vector<std::pair<int, int>> idx(at.begin(), at.end());
  Matrix out(static_cast<Index>(idx.size()), 1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto [r, c] = idx[i];
    if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) {
      throw InputError("gather_elements: index out of range");
    }
    out(static_cast<Index>(i), 0) = a.value()(r, c);
  }
  return a.tape()->record(
      std::move(out), {a},
      [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          ga(idx[i].first, idx[i].second) += g(static_cast<Index>(i), 0);
        }
        t.accumulate(a, ga);
      },
      "gather_elements");
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: range outside " + shape_str(a.value()));
  }
  Matrix out = a.value().middleCols(start, count);
  return a.tape()->record(
      std::move(out), {a},
      [a, start, count](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        ga.middleCols(start, count) = g;
        t.accumulate(a, ga);
      },
      "slice_cols");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_mismatch("concat_cols", parts.front().value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape()->record(
      std::move(out), inputs,
      [inputs](Tape& t, const Matrix& g) {
        Index offset = 0;
        for (const Var& p : inputs) {
          if (t.requires_grad(p)) t.accumulate(p, g.middleCols(offset, p.cols()));
          offset += p.cols();
        }
      },
      "concat_cols");
}

std::vector<int> top_k_indices(const Matrix& row, int k) {
  if (row.rows() != 1 && row.cols() != 1) {
    throw DimensionError("top_k_indices: expects a single row, got " + shape_str(row));
  }
  return kernels::top_k_indices(row.reshaped(), k);
}

}  // namespace brainformer
