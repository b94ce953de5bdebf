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

#include "brainformer/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "brainformer/kernels.hpp"

namespace brainformer {

namespace {

void require_positive(int v, const char* what) {
  if (v < 1) throw ConfigError(std::string(what) + " must be positive, got " + std::to_string(v));
}

void require_input(const Var& x, int model_dim, const char* op) {
  if (x.cols() != model_dim) {
    throw DimensionError(std::string(op) + ": input has " + std::to_string(x.cols()) +
                         " features, config expects " + std::to_string(model_dim));
  }
  if (x.rows() < 1) throw DimensionError(std::string(op) + ": empty sequence");
}

}  // namespace

void AttentionConfig::validate() const {
  require_positive(model_dim, "attention model_dim");
  require_positive(n_heads, "attention n_heads");
  require_positive(head_dim, "attention head_dim");
}

void FfnConfig::validate() const {
  require_positive(model_dim, "ffn model_dim");
  require_positive(hidden_dim, "ffn hidden_dim");
}

void MoeConfig::validate() const {
  require_positive(model_dim, "moe model_dim");
  require_positive(expert_hidden_dim, "moe expert_hidden_dim");
  require_positive(n_experts, "moe n_experts");
  require_positive(capacity_factor, "moe capacity_factor");
}

int expert_capacity(int capacity_factor, int n_tokens, int n_experts) {
  if (n_experts < 1) throw ConfigError("expert_capacity: n_experts must be positive");
  return static_cast<int>((static_cast<long long>(capacity_factor) * n_tokens) / n_experts);
}

std::vector<int> RoutingDecision::expert_load(int n_experts) const {
  std::vector<int> load(static_cast<std::size_t>(n_experts), 0);
  for (const Assignment& a : assignments) ++load.at(static_cast<std::size_t>(a.expert));
  return load;
}

std::vector<int> RoutingDecision::token_load(int n_tokens) const {
  std::vector<int> load(static_cast<std::size_t>(n_tokens), 0);
  for (const Assignment& a : assignments) ++load.at(static_cast<std::size_t>(a.token));
  return load;
}

Var attention_forward(const Var& x, const AttentionConfig& cfg, const AttentionWeights& w) {
  cfg.validate();
  require_input(x, cfg.model_dim, "attention_forward");
  const Var q = matmul(x, w.wq);
  const Var k = matmul(x, w.wk);
  const Var v = matmul(x, w.wv);
  const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(cfg.head_dim));

  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    const Index at = static_cast<Index>(h) * cfg.head_dim;
    const Var qh = slice_cols(q, at, cfg.head_dim);
    const Var kh = slice_cols(k, at, cfg.head_dim);
    const Var vh = slice_cols(v, at, cfg.head_dim);
    const Var probs = causal_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    heads.push_back(matmul(probs, vh));
  }
  const Var merged = heads.size() == 1 ? heads.front() : concat_cols(heads);
  return matmul(merged, w.wo);
}

Var ffn_forward(const Var& x, const FfnConfig& cfg, const FfnWeights& w) {
  cfg.validate();
  require_input(x, cfg.model_dim, "ffn_forward");
  Var hidden;
  if (is_gated(cfg.activation)) {
    hidden = activation(matmul(x, w.w_in), matmul(x, w.w_gate), cfg.activation);
  } else {
    hidden = activation(matmul(x, w.w_in), cfg.activation);
  }
  return matmul(hidden, w.w_out);
}

Var gate_scores(const Var& x, const Var& router) { return softmax(matmul(x, router), 1); }

RoutingDecision route_top2(const Matrix& scores, int capacity) {
  if (capacity < 1) throw InputError("route_top2: capacity must be >= 1");
  const int n = static_cast<int>(scores.rows());
  const int n_experts = static_cast<int>(scores.cols());
  if (n_experts < 1) throw DimensionError("route_top2: no experts");
  const int choices = std::min(2, n_experts);

  RoutingDecision d;
  d.gating = Gating::Top2;
  d.capacity = capacity;
  std::vector<int> load(static_cast<std::size_t>(n_experts), 0);
  for (int t = 0; t < n; ++t) {
    bool assigned = false;
    for (int e : kernels::top_k_indices(scores.row(t), choices)) {
      if (load[static_cast<std::size_t>(e)] >= capacity) continue;
      ++load[static_cast<std::size_t>(e)];
      d.assignments.push_back({t, e, scores(t, e)});
      assigned = true;
    }
    if (!assigned) d.dropped_tokens.push_back(t);
  }
  return d;
}

RoutingDecision route_expert_choice(const Matrix& scores, int capacity) {
  const int n = static_cast<int>(scores.rows());
  const int n_experts = static_cast<int>(scores.cols());
  if (capacity < 1) throw InputError("route_expert_choice: capacity must be >= 1");
  if (capacity > n) {
    throw InputError("route_expert_choice: capacity " + std::to_string(capacity) +
                     " exceeds token count " + std::to_string(n));
  }
  RoutingDecision d;
  d.gating = Gating::ExpertChoice;
  d.capacity = capacity;
  std::vector<bool> served(static_cast<std::size_t>(n), false);
  for (int e = 0; e < n_experts; ++e) {
    for (int t : kernels::top_k_indices(scores.col(e), capacity)) {
      d.assignments.push_back({t, e, scores(t, e)});
      served[static_cast<std::size_t>(t)] = true;
    }
  }
  for (int t = 0; t < n; ++t) {
    if (!served[static_cast<std::size_t>(t)]) d.dropped_tokens.push_back(t);
  }
  return d;
}

Var load_balance_aux_loss(const Var& scores, const RoutingDecision& decision) {
  if (decision.gating != Gating::Top2) {
    throw UsageError("load_balance_aux_loss: only defined for Top2 routing");
  }
  const Matrix& s = scores.value();
  const Index n = s.rows();
  const Index n_experts = s.cols();
  Matrix top1_fraction = Matrix::Zero(1, n_experts);
  for (Index t = 0; t < n; ++t) top1_fraction(0, kernels::argmax(s.row(t))) += 1.0;
  top1_fraction /= static_cast<Scalar>(n);

  Tape& tape = *scores.tape();
  const Var mean_score = scale(column_sums(scores), 1.0 / static_cast<Scalar>(n));
  const Var weighted = mul(mean_score, tape.constant(std::move(top1_fraction)));
  return scale(sum(weighted), static_cast<Scalar>(n_experts));
}

MoeOutput moe_forward(const Var& x, const MoeConfig& cfg, const MoeWeights& w) {
  cfg.validate();
  require_input(x, cfg.model_dim, "moe_forward");
  if (static_cast<int>(w.experts.size()) != cfg.n_experts) {
    throw ConfigError("moe_forward: weights hold " + std::to_string(w.experts.size()) +
                      " experts, config says " + std::to_string(cfg.n_experts));
  }
  const int n = static_cast<int>(x.rows());
  const int capacity = expert_capacity(cfg.capacity_factor, n, cfg.n_experts);
  if (capacity < 1) {
    throw ConfigError("moe_forward: capacity floor(" + std::to_string(cfg.capacity_factor) + "*" +
                      std::to_string(n) + "/" + std::to_string(cfg.n_experts) + ") < 1");
  }

  Tape& tape = *x.tape();
  const Var scores = gate_scores(x, w.router);
  MoeOutput out;
  out.routing = cfg.gating == Gating::Top2 ? route_top2(scores.value(), capacity)
                                           : route_expert_choice(scores.value(), capacity);

  const FfnConfig expert_cfg = cfg.expert();
  Var combined;
  for (int e = 0; e < cfg.n_experts; ++e) {
    std::vector<int> tokens;
    std::vector<std::pair<int, int>> cells;
    for (const Assignment& a : out.routing.assignments) {
      if (a.expert != e) continue;
      tokens.push_back(a.token);
      cells.emplace_back(a.token, e);
    }
    if (tokens.empty()) continue;
    const Var expert_out = ffn_forward(gather_rows(x, tokens), expert_cfg,
                                       w.experts[static_cast<std::size_t>(e)]);
    const Var weighted = mul_col(expert_out, gather_elements(scores, cells));
    const Var scattered = scatter_add_rows(weighted, tokens, n);
    combined = combined.valid() ? add(combined, scattered) : scattered;
  }
  out.output = combined.valid() ? combined : tape.constant(Matrix::Zero(n, cfg.model_dim));
  out.aux_loss = cfg.gating == Gating::Top2 ? load_balance_aux_loss(scores, out.routing)
                                            : tape.constant(Matrix::Zero(1, 1));
  return out;
}

}  // namespace brainformer
