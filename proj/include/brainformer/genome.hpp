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

// Architecture genome: a block is an ordered list of sub-layer kinds that
// share width, gating and activation hyperparameters; a model stacks N
// copies of one block between an embedding and an output projection.

#pragma once

#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "brainformer/layers.hpp"

namespace brainformer {

enum class LayerKind { Attn, Moe, Ffn };

inline constexpr int kGenomeSchemaVersion = 1;

std::string_view to_string(LayerKind k);
std::string_view to_string(Gating g);
std::string_view to_string(Activation a);
LayerKind parse_layer_kind(std::string_view s);
Gating parse_gating(std::string_view s);
Activation parse_activation(std::string_view s);

struct LayerSpec {
  LayerKind kind = LayerKind::Ffn;
  std::variant<AttentionConfig, FfnConfig, MoeConfig> config;
};

struct BlockSpec {
  std::vector<LayerKind> layers;
  int model_dim = 768;
  int moe_hidden_dim = 3072;
  int ffn_hidden_dim = 3072;
  int n_heads = 12;
  /// Not searched; h * head_dim is the attention projection width.
  int head_dim = 64;
  Gating gating = Gating::Top2;
  int capacity_factor = 2;
  Activation activation = Activation::GeLU;
  /// Run-scale parameter, not searched.
  int n_experts = 32;

  int length() const { return static_cast<int>(layers.size()); }
  int count(LayerKind k) const;

  AttentionConfig attention_config() const { return {model_dim, n_heads, head_dim}; }
  FfnConfig ffn_config() const { return {model_dim, ffn_hidden_dim, activation}; }
  MoeConfig moe_config() const {
    return {model_dim, moe_hidden_dim, n_experts, gating, capacity_factor, activation};
  }
  LayerSpec layer_spec(LayerKind k) const;
  std::vector<LayerSpec> layer_specs() const;

  /// Structural validity: positive dims, k >= 1, at least one attention
  /// layer, and expert-choice blocks need capacity_factor <= n_experts so an
  /// expert never asks for more tokens than the batch holds. Search-space
  /// membership is checked separately by SearchSpace::contains.
  void validate() const;

  bool operator==(const BlockSpec&) const = default;
};

struct ModelSpec {
  BlockSpec block;
  int n_blocks = 1;
  int vocab_size = 258;
  int max_seq_len = 128;

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

nlohmann::json to_json(const BlockSpec& b);
nlohmann::json to_json(const ModelSpec& m);
/// Throws ConfigError naming the offending field.
BlockSpec block_from_json(const nlohmann::json& j);
ModelSpec model_from_json(const nlohmann::json& j);

/// Accepts either a model document or a bare block (stacked n_blocks times).
ModelSpec load_model_spec(const std::string& path, int n_blocks_if_block = 1);

namespace json_field {

/// Typed accessors that turn missing or mistyped fields into ConfigError
/// messages of the form "<context>.<field>: expected ...".
int get_int(const nlohmann::json& j, std::string_view field, std::string_view context);
int get_int(const nlohmann::json& j, std::string_view field, std::string_view context, int fallback);
double get_double(const nlohmann::json& j, std::string_view field, std::string_view context);
double get_double(const nlohmann::json& j, std::string_view field, std::string_view context,
                  double fallback);
std::string get_string(const nlohmann::json& j, std::string_view field, std::string_view context);
std::string get_string(const nlohmann::json& j, std::string_view field, std::string_view context,
                       std::string fallback);
bool get_bool(const nlohmann::json& j, std::string_view field, std::string_view context, bool fallback);
std::vector<int> get_int_list(const nlohmann::json& j, std::string_view field, std::string_view context);
const nlohmann::json& get_object(const nlohmann::json& j, std::string_view field,
                                 std::string_view context);

}  // namespace json_field

nlohmann::json read_json_file(const std::string& path);

}  // namespace brainformer
