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

#include "brainformer/genome.hpp"

#include <algorithm>
#include <fstream>

namespace brainformer {

using nlohmann::json;

std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Attn:
      return "attn";
    case LayerKind::Moe:
      return "moe";
    case LayerKind::Ffn:
      return "ffn";
  }
  return "?";
}

std::string_view to_string(Gating g) { return g == Gating::Top2 ? "top2" : "expert_choice"; }

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::ReLU:
      return "relu";
    case Activation::GeLU:
      return "gelu";
    case Activation::GatedReLU:
      return "gated_relu";
    case Activation::GatedGeLU:
      return "gated_gelu";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view s) {
  if (s == "attn") return LayerKind::Attn;
  if (s == "moe") return LayerKind::Moe;
  if (s == "ffn") return LayerKind::Ffn;
  throw ConfigError("unknown layer kind '" + std::string(s) + "' (expected attn, moe or ffn)");
}

Gating parse_gating(std::string_view s) {
  if (s == "top2") return Gating::Top2;
  if (s == "expert_choice") return Gating::ExpertChoice;
  throw ConfigError("unknown gating '" + std::string(s) + "' (expected top2 or expert_choice)");
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "gelu") return Activation::GeLU;
  if (s == "gated_relu") return Activation::GatedReLU;
  if (s == "gated_gelu") return Activation::GatedGeLU;
  throw ConfigError("unknown activation '" + std::string(s) +
                    "' (expected relu, gelu, gated_relu or gated_gelu)");
}

int BlockSpec::count(LayerKind k) const {
  return static_cast<int>(std::count(layers.begin(), layers.end(), k));
}

LayerSpec BlockSpec::layer_spec(LayerKind k) const {
  switch (k) {
    case LayerKind::Attn:
      return {k, attention_config()};
    case LayerKind::Ffn:
      return {k, ffn_config()};
    case LayerKind::Moe:
      return {k, moe_config()};
  }
  throw ConfigError("invalid layer kind");
}

std::vector<LayerSpec> BlockSpec::layer_specs() const {
  std::vector<LayerSpec> out;
  out.reserve(layers.size());
  for (LayerKind k : layers) out.push_back(layer_spec(k));
  return out;
}

void BlockSpec::validate() const {
  if (layers.empty()) throw ConfigError("block.layers: a block needs at least one layer");
  if (count(LayerKind::Attn) == 0) {
    throw ConfigError("block.layers: a block needs at least one attn layer");
  }
  auto positive = [](int v, const char* field) {
    if (v < 1) throw ConfigError(std::string("block.") + field + ": must be positive");
  };
  positive(model_dim, "model_dim");
  positive(moe_hidden_dim, "moe_hidden_dim");
  positive(ffn_hidden_dim, "ffn_hidden_dim");
  positive(n_heads, "n_heads");
  positive(head_dim, "head_dim");
  positive(capacity_factor, "capacity_factor");
  positive(n_experts, "n_experts");
  if (gating == Gating::ExpertChoice && count(LayerKind::Moe) > 0 && capacity_factor > n_experts) {
    throw ConfigError("block.capacity_factor: expert_choice needs capacity_factor <= n_experts (" +
                      std::to_string(capacity_factor) + " > " + std::to_string(n_experts) + ")");
  }
}

void ModelSpec::validate() const {
  block.validate();
  if (n_blocks < 1) throw ConfigError("model.n_blocks: must be >= 1");
  if (vocab_size < 2) throw ConfigError("model.vocab_size: must be >= 2");
  if (max_seq_len < 1) throw ConfigError("model.max_seq_len: must be >= 1");
}

json to_json(const BlockSpec& b) {
  json layers = json::array();
  for (LayerKind k : b.layers) layers.push_back(std::string(to_string(k)));
  return json{{"schema_version", kGenomeSchemaVersion},
              {"kind", "block"},
              {"layers", layers},
              {"model_dim", b.model_dim},
              {"moe_hidden_dim", b.moe_hidden_dim},
              {"ffn_hidden_dim", b.ffn_hidden_dim},
              {"n_heads", b.n_heads},
              {"head_dim", b.head_dim},
              {"gating", std::string(to_string(b.gating))},
              {"capacity_factor", b.capacity_factor},
              {"activation", std::string(to_string(b.activation))},
              {"n_experts", b.n_experts}};
}

json to_json(const ModelSpec& m) {
  return json{{"schema_version", kGenomeSchemaVersion},
              {"kind", "model"},
              {"block", to_json(m.block)},
              {"n_blocks", m.n_blocks},
              {"vocab_size", m.vocab_size},
              {"max_seq_len", m.max_seq_len}};
}

namespace {

void check_schema(const json& j, std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected a JSON object");
  const int version = json_field::get_int(j, "schema_version", context, kGenomeSchemaVersion);
  if (version != kGenomeSchemaVersion) {
    throw ConfigError(std::string(context) + ".schema_version: unsupported version " +
                      std::to_string(version));
  }
}

}  // namespace

BlockSpec block_from_json(const json& j) {
  check_schema(j, "block");
  BlockSpec b;
  if (!j.contains("layers") || !j["layers"].is_array()) {
    throw ConfigError("block.layers: expected an array of layer kinds");
  }
  for (const json& l : j["layers"]) {
    if (!l.is_string()) throw ConfigError("block.layers: entries must be strings");
    try {
      b.layers.push_back(parse_layer_kind(l.get<std::string>()));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("block.layers: ") + e.what());
    }
  }
  b.model_dim = json_field::get_int(j, "model_dim", "block");
  b.moe_hidden_dim = json_field::get_int(j, "moe_hidden_dim", "block");
  b.ffn_hidden_dim = json_field::get_int(j, "ffn_hidden_dim", "block");
  b.n_heads = json_field::get_int(j, "n_heads", "block");
  b.head_dim = json_field::get_int(j, "head_dim", "block", 64);
  b.capacity_factor = json_field::get_int(j, "capacity_factor", "block");
  b.n_experts = json_field::get_int(j, "n_experts", "block");
  try {
    b.gating = parse_gating(json_field::get_string(j, "gating", "block"));
    b.activation = parse_activation(json_field::get_string(j, "activation", "block"));
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.rfind("block.", 0) == 0 ? msg : "block: " + msg);
  }
  b.validate();
  return b;
}

ModelSpec model_from_json(const json& j) {
  check_schema(j, "model");
  ModelSpec m;
  m.block = block_from_json(json_field::get_object(j, "block", "model"));
  m.n_blocks = json_field::get_int(j, "n_blocks", "model");
  m.vocab_size = json_field::get_int(j, "vocab_size", "model", 258);
  m.max_seq_len = json_field::get_int(j, "max_seq_len", "model", 128);
  m.validate();
  return m;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": malformed JSON: " + e.what());
  }
}

ModelSpec load_model_spec(const std::string& path, int n_blocks_if_block) {
  const json j = read_json_file(path);
  const std::string kind =
      j.is_object() && j.contains("kind") && j["kind"].is_string() ? j["kind"].get<std::string>() : "";
  if (kind == "model") return model_from_json(j);
  if (kind == "block") {
    ModelSpec m;
    m.block = block_from_json(j);
    m.n_blocks = n_blocks_if_block;
    m.validate();
    return m;
  }
  throw ConfigError(path + ": field 'kind' must be \"model\" or \"block\"");
}

namespace json_field {

namespace {

std::string where(std::string_view context, std::string_view field) {
  return std::string(context) + "." + std::string(field);
}

const json* find(const json& j, std::string_view field) {
  if (!j.is_object()) return nullptr;
  auto it = j.find(std::string(field));
  return it == j.end() ? nullptr : &*it;
}

}  // namespace

int get_int(const json& j, std::string_view field, std::string_view context) {
  const json* v = find(j, field);
  if (v == nullptr) throw ConfigError(where(context, field) + ": missing required integer");
  if (!v->is_number_integer()) throw ConfigError(where(context, field) + ": expected an integer");
  return v->get<int>();
}

int get_int(const json& j, std::string_view field, std::string_view context, int fallback) {
  return find(j, field) == nullptr ? fallback : get_int(j, field, context);
}

double get_double(const json& j, std::string_view field, std::string_view context) {
  const json* v = find(j, field);
  if (v == nullptr) throw ConfigError(where(context, field) + ": missing required number");
  if (!v->is_number()) throw ConfigError(where(context, field) + ": expected a number");
  return v->get<double>();
}

double get_double(const json& j, std::string_view field, std::string_view context, double fallback) {
  return find(j, field) == nullptr ? fallback : get_double(j, field, context);
}

std::string get_string(const json& j, std::string_view field, std::string_view context) {
  const json* v = find(j, field);
  if (v == nullptr) throw ConfigError(where(context, field) + ": missing required string");
  if (!v->is_string()) throw ConfigError(where(context, field) + ": expected a string");
  return v->get<std::string>();
}

std::string get_string(const json& j, std::string_view field, std::string_view context,
                       std::string fallback) {
  return find(j, field) == nullptr ? fallback : get_string(j, field, context);
}

bool get_bool(const json& j, std::string_view field, std::string_view context, bool fallback) {
  const json* v = find(j, field);
  if (v == nullptr) return fallback;
  if (!v->is_boolean()) throw ConfigError(where(context, field) + ": expected true or false");
  return v->get<bool>();
}

std::vector<int> get_int_list(const json& j, std::string_view field, std::string_view context) {
  const json* v = find(j, field);
  if (v == nullptr) throw ConfigError(where(context, field) + ": missing required list");
  if (!v->is_array()) throw ConfigError(where(context, field) + ": expected a list of integers");
  std::vector<int> out;
  for (const json& e : *v) {
    if (!e.is_number_integer()) throw ConfigError(where(context, field) + ": expected integers");
    out.push_back(e.get<int>());
  }
  return out;
}

const json& get_object(const json& j, std::string_view field, std::string_view context) {
  const json* v = find(j, field);
  if (v == nullptr || !v->is_object()) {
    throw ConfigError(where(context, field) + ": expected an object");
  }
  return *v;
}

}  // namespace json_field

}  // namespace brainformer
