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

// The three sub-layer primitives: causal self-attention, dense FFN and the
// sparsely gated MoE FFN with token-choice (top-2) or expert-choice routing.
// All functions are pure in (input, weights); weights arrive as tape Vars.

#pragma once

#include <vector>

#include "brainformer/tensor.hpp"

namespace brainformer {

enum class Gating { Top2, ExpertChoice };

struct AttentionConfig {
  int model_dim = 0;
  int n_heads = 0;
  int head_dim = 0;

  int projection_dim() const { return n_heads * head_dim; }
  void validate() const;
};

struct FfnConfig {
  int model_dim = 0;
  int hidden_dim = 0;
  Activation activation = Activation::ReLU;

  void validate() const;
};

struct MoeConfig {
  int model_dim = 0;
  int expert_hidden_dim = 0;
  int n_experts = 1;
  Gating gating = Gating::Top2;
  int capacity_factor = 1;
  Activation activation = Activation::ReLU;

  FfnConfig expert() const { return {model_dim, expert_hidden_dim, activation}; }
  void validate() const;
};

/// floor(c * n / E): tokens one expert may take from a batch of n.
int expert_capacity(int capacity_factor, int n_tokens, int n_experts);

struct AttentionWeights {
  Var wq, wk, wv;  // [d, h*d_head]
  Var wo;          // [h*d_head, d]
};

struct FfnWeights {
  Var w_in;    // [d, d_ffn]
  Var w_gate;  // [d, d_ffn], gated activations only
  Var w_out;   // [d_ffn, d]
};

struct MoeWeights {
  Var router;  // W_g, [d, E]
  std::vector<FfnWeights> experts;
};

struct Assignment {
  int token = 0;
  int expert = 0;
  Scalar weight = 0.0;

  bool operator==(const Assignment&) const = default;
};

struct RoutingDecision {
  Gating gating = Gating::Top2;
  int capacity = 0;
  std::vector<Assignment> assignments;
  /// Sorted token indices that received no expert.
  std::vector<int> dropped_tokens;

  std::vector<int> expert_load(int n_experts) const;
  std::vector<int> token_load(int n_tokens) const;
};

/// Causal multi-head attention; position i only sees positions j <= i.
Var attention_forward(const Var& x, const AttentionConfig& cfg, const AttentionWeights& w);

/// d -> d_ffn -> d. Gated kinds use act(x W_in) * (x W_gate).
Var ffn_forward(const Var& x, const FfnConfig& cfg, const FfnWeights& w);

/// softmax over experts of x W_g; each row sums to 1.
Var gate_scores(const Var& x, const Var& router);

/// Token-choice routing. Tokens are visited in index order and each claims
/// its best then second-best expert while that expert has capacity left.
/// With a single expert this degenerates to top-1.
RoutingDecision route_top2(const Matrix& scores, int capacity);

/// Expert-choice routing: every expert takes its `capacity` highest-scoring
/// tokens. Throws InputError when capacity exceeds the token count.
RoutingDecision route_expert_choice(const Matrix& scores, int capacity);

struct MoeOutput {
  Var output;
  Var aux_loss;
  RoutingDecision routing;
};

/// Dispatches each routed token through its expert FFN and sums the expert
/// outputs weighted by the gate score. Dropped tokens get a zero row; the
/// caller's residual connection carries them through. aux_loss is the
/// load-balancing loss for Top2 and a constant 0 for ExpertChoice.
MoeOutput moe_forward(const Var& x, const MoeConfig& cfg, const MoeWeights& w);

/// E * sum_e (fraction of tokens whose top-1 expert is e) * (mean score of e).
/// Differentiable through the mean-score factor only.
Var load_balance_aux_loss(const Var& scores, const RoutingDecision& decision);

}  // namespace brainformer
