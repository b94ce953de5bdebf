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

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "brainformer/genome.hpp"
#include "brainformer/layers.hpp"
#include "brainformer/tensor.hpp"

namespace brainformer {

inline constexpr Scalar kLayerNormEps = 1e-6;

struct SubLayerWeights {
  Var norm_gain;
  Var norm_bias;
  std::variant<AttentionWeights, FfnWeights, MoeWeights> weights;
};

struct BlockResult {
  Var output;
  Var aux_loss;  // sum over the block's MoE layers; constant 0 if none
};

/// x + F(layer_norm(x)) for one sub-layer. Adds the MoE aux loss, if any,
/// into *aux (which may start invalid).
Var apply_sublayer(const Var& x, const LayerSpec& layer, const SubLayerWeights& w, Var* aux);

/// Applies layers 1..k in order, each pre-normed and residual-wrapped.
class ComposedBlock {
 public:
  explicit ComposedBlock(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {}

  BlockResult operator()(const Var& x, std::span<const SubLayerWeights> weights) const;
  const std::vector<LayerSpec>& layers() const { return layers_; }

 private:
  std::vector<LayerSpec> layers_;
};

/// Throws ConfigError for an invalid spec.
ComposedBlock compose_block(const BlockSpec& spec);

/// n*k sub-layers: the block repeated n times. Parameters are never shared
/// between repetitions; the body only fixes structure.
std::vector<LayerSpec> stack_n_times(const BlockSpec& spec, int n);

/// Multiplies d, d_moe and d_ffn by factor (2 or 4). Heads, head width,
/// gating, capacity, activation and layer order are unchanged. The result
/// may leave the search domains; that is expected for scaled targets.
BlockSpec scale_model_dim(const BlockSpec& spec, int factor);

/// Parameter tallies. "embedding" covers the token table, the position
/// table and the (untied) output projection.
struct ParamCount {
  std::int64_t n_params = 0;
  std::int64_t n_params_no_embed = 0;
  std::int64_t n_act_params = 0;
  std::int64_t n_act_params_no_embed = 0;
  std::int64_t embedding_params = 0;
};

/// Trainable parameters of one sub-layer including its layer norm. When
/// `activated` is set, MoE layers count the router plus the experts one
/// token touches on average: min(2, E) for top-2, c for expert choice.
std::int64_t layer_param_count(const LayerSpec& layer, bool activated);
ParamCount count_params(const ModelSpec& model);

/// Analytic matmul FLOPs (2 per multiply-add) for one sequence of seq_len
/// tokens. Norms, softmax and elementwise work are not counted.
struct FlopEstimate {
  double forward = 0.0;
  double train_step = 0.0;  // forward + backward, taken as 3x forward
};

double layer_forward_flops(const LayerSpec& layer, int seq_len);
FlopEstimate estimate_flops(const ModelSpec& model, int seq_len);

struct LmOutput {
  Var logits;    // [L, V]
  Var aux_loss;  // sum of MoE aux losses
};

/// Decoder-only LM: token + learned position embedding, n_blocks copies of
/// the composed block with independent weights, final layer norm, untied
/// output projection.
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);

  std::int64_t parameter_count() const;
  void zero_grad();

  /// Throws InputError for sequences longer than max_seq_len or bad ids.
  LmOutput lm_forward(Tape& tape, std::span<const int> tokens);

 private:
  struct SubLayerSlots {
    LayerSpec layer;
    std::size_t gain = 0;
    std::size_t bias = 0;
    std::vector<std::size_t> slots;
  };

  std::size_t add_param(std::string name, Matrix value);
  SubLayerWeights bind(Tape& tape, const SubLayerSlots& s);

  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::vector<std::vector<SubLayerSlots>> blocks_;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::size_t final_gain_ = 0;
  std::size_t final_bias_ = 0;
  std::size_t output_ = 0;
};

// ---- checkpoints ------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Matrix value;
};

/// `<stem>.bin` holds every tensor's values as consecutive row-major
/// float64; `<stem>.json` maps names to shapes and element offsets and
/// carries `meta` verbatim.
void save_checkpoint(const std::string& stem, const nlohmann::json& meta,
                     std::span<const NamedTensor> tensors);

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

Checkpoint load_checkpoint(const std::string& stem);

}  // namespace brainformer
