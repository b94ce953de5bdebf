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

#include "brainformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace brainformer {

using nlohmann::json;

// ---- composition ------------------------------------------------------------

Var apply_sublayer(const Var& x, const LayerSpec& layer, const SubLayerWeights& w, Var* aux) {
  const Var normed = layer_norm(x, w.norm_gain, w.norm_bias, kLayerNormEps);
  Var y;
  switch (layer.kind) {
    case LayerKind::Attn:
      y = attention_forward(normed, std::get<AttentionConfig>(layer.config),
                            std::get<AttentionWeights>(w.weights));
      break;
    case LayerKind::Ffn:
      y = ffn_forward(normed, std::get<FfnConfig>(layer.config), std::get<FfnWeights>(w.weights));
      break;
    case LayerKind::Moe: {
      MoeOutput moe =
          moe_forward(normed, std::get<MoeConfig>(layer.config), std::get<MoeWeights>(w.weights));
      y = moe.output;
      if (aux != nullptr) *aux = aux->valid() ? add(*aux, moe.aux_loss) : moe.aux_loss;
      break;
    }
  }
  return add(x, y);
}

BlockResult ComposedBlock::operator()(const Var& x, std::span<const SubLayerWeights> weights) const {
  if (weights.size() != layers_.size()) {
    throw ConfigError("block: " + std::to_string(weights.size()) + " weight sets for " +
                      std::to_string(layers_.size()) + " layers");
  }
  BlockResult r;
  r.output = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    r.output = apply_sublayer(r.output, layers_[i], weights[i], &r.aux_loss);
  }
  if (!r.aux_loss.valid()) r.aux_loss = x.tape()->constant(Matrix::Zero(1, 1));
  return r;
}

ComposedBlock compose_block(const BlockSpec& spec) {
  spec.validate();
  return ComposedBlock(spec.layer_specs());
}

std::vector<LayerSpec> stack_n_times(const BlockSpec& spec, int n) {
  if (n < 1) throw InputError("stack_n_times: n must be >= 1, got " + std::to_string(n));
  spec.validate();
  const std::vector<LayerSpec> one = spec.layer_specs();
  std::vector<LayerSpec> body;
  body.reserve(one.size() * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) body.insert(body.end(), one.begin(), one.end());
  return body;
}

BlockSpec scale_model_dim(const BlockSpec& spec, int factor) {
  if (factor != 2 && factor != 4) {
    throw InputError("scale_model_dim: factor must be 2 or 4, got " + std::to_string(factor));
  }
  BlockSpec out = spec;
  out.model_dim *= factor;
  out.moe_hidden_dim *= factor;
  out.ffn_hidden_dim *= factor;
  return out;
}

// ---- accounting -------------------------------------------------------------

namespace {

std::int64_t ffn_matrices(Activation a) { return is_gated(a) ? 3 : 2; }

}  // namespace

std::int64_t layer_param_count(const LayerSpec& layer, bool activated) {
  std::int64_t n = 0;
  switch (layer.kind) {
    case LayerKind::Attn: {
      const auto& c = std::get<AttentionConfig>(layer.config);
      n = 4LL * c.model_dim * c.projection_dim();
      return n + 2LL * c.model_dim;
    }
    case LayerKind::Ffn: {
      const auto& c = std::get<FfnConfig>(layer.config);
      n = ffn_matrices(c.activation) * c.model_dim * c.hidden_dim;
      return n + 2LL * c.model_dim;
    }
    case LayerKind::Moe: {
      const auto& c = std::get<MoeConfig>(layer.config);
      const std::int64_t per_expert = ffn_matrices(c.activation) * c.model_dim * c.expert_hidden_dim;
      std::int64_t experts = c.n_experts;
      if (activated) {
        experts = c.gating == Gating::Top2 ? std::min(2, c.n_experts)
                                           : std::min(c.capacity_factor, c.n_experts);
      }
      n = static_cast<std::int64_t>(c.model_dim) * c.n_experts + experts * per_expert;
      return n + 2LL * c.model_dim;
    }
  }
  return 0;
}

ParamCount count_params(const ModelSpec& model) {
  model.validate();
  const std::int64_t d = model.block.model_dim;
  ParamCount pc;
  pc.embedding_params = static_cast<std::int64_t>(model.vocab_size) * d * 2 +
                        static_cast<std::int64_t>(model.max_seq_len) * d;
  std::int64_t body = 0;
  std::int64_t body_act = 0;
  for (const LayerSpec& l : model.block.layer_specs()) {
    body += layer_param_count(l, false);
    body_act += layer_param_count(l, true);
  }
  const std::int64_t final_norm = 2 * d;
  pc.n_params_no_embed = body * model.n_blocks + final_norm;
  pc.n_act_params_no_embed = body_act * model.n_blocks + final_norm;
  pc.n_params = pc.n_params_no_embed + pc.embedding_params;
  pc.n_act_params = pc.n_act_params_no_embed + pc.embedding_params;
  return pc;
}

double layer_forward_flops(const LayerSpec& layer, int seq_len) {
  const double len = seq_len;
  switch (layer.kind) {
    case LayerKind::Attn: {
      const auto& c = std::get<AttentionConfig>(layer.config);
      const double proj = c.projection_dim();
      // q, k, v, o projections + scores + probs*values, full L x L
      return 8.0 * len * c.model_dim * proj + 4.0 * len * len * proj;
    }
    case LayerKind::Ffn: {
      const auto& c = std::get<FfnConfig>(layer.config);
      return 2.0 * static_cast<double>(ffn_matrices(c.activation)) * len * c.model_dim * c.hidden_dim;
    }
    case LayerKind::Moe: {
      const auto& c = std::get<MoeConfig>(layer.config);
      const int cap = expert_capacity(c.capacity_factor, seq_len, c.n_experts);
      const double slots = static_cast<double>(c.n_experts) * cap;
      const double assignments =
          c.gating == Gating::Top2 ? std::min(std::min(2, c.n_experts) * len, slots) : slots;
      const double router = 2.0 * len * c.model_dim * c.n_experts;
      return router + assignments * 2.0 * static_cast<double>(ffn_matrices(c.activation)) *
                          c.model_dim * c.expert_hidden_dim;
    }
  }
  return 0.0;
}

FlopEstimate estimate_flops(const ModelSpec& model, int seq_len) {
  double block = 0.0;
  for (const LayerSpec& l : model.block.layer_specs()) block += layer_forward_flops(l, seq_len);
  const double output = 2.0 * seq_len * model.block.model_dim * model.vocab_size;
  FlopEstimate f;
  f.forward = block * model.n_blocks + output;
  f.train_step = 3.0 * f.forward;
  return f;
}

// ---- model ------------------------------------------------------------------

namespace {

Matrix random_normal(Index rows, Index cols, Scalar stddev, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix projection(Index fan_in, Index fan_out, std::mt19937_64& rng) {
  return random_normal(fan_in, fan_out, 1.0 / std::sqrt(static_cast<Scalar>(fan_in)), rng);
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  const BlockSpec& b = spec_.block;
  const Index d = b.model_dim;

  token_embedding_ = add_param("embed.token", random_normal(spec_.vocab_size, d, 1.0, rng));
  position_embedding_ = add_param("embed.position", random_normal(spec_.max_seq_len, d, 1.0, rng));

  const std::vector<LayerSpec> layers = b.layer_specs();
  for (int blk = 0; blk < spec_.n_blocks; ++blk) {
    std::vector<SubLayerSlots> block;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const std::string prefix = "block" + std::to_string(blk) + ".layer" + std::to_string(i) +
                                 "." + std::string(to_string(l.kind));
      SubLayerSlots s{l, 0, 0, {}};
      s.gain = add_param(prefix + ".norm.gain", Matrix::Ones(1, d));
      s.bias = add_param(prefix + ".norm.bias", Matrix::Zero(1, d));
      auto add_ffn = [&](const std::string& p, const FfnConfig& c) {
        s.slots.push_back(add_param(p + ".w_in", projection(d, c.hidden_dim, rng)));
        if (is_gated(c.activation)) {
          s.slots.push_back(add_param(p + ".w_gate", projection(d, c.hidden_dim, rng)));
        }
        s.slots.push_back(add_param(p + ".w_out", projection(c.hidden_dim, d, rng)));
      };
      switch (l.kind) {
        case LayerKind::Attn: {
          const auto& c = std::get<AttentionConfig>(l.config);
          for (const char* w : {".wq", ".wk", ".wv"}) {
            s.slots.push_back(add_param(prefix + w, projection(d, c.projection_dim(), rng)));
          }
          s.slots.push_back(add_param(prefix + ".wo", projection(c.projection_dim(), d, rng)));
          break;
        }
        case LayerKind::Ffn:
          add_ffn(prefix, std::get<FfnConfig>(l.config));
          break;
        case LayerKind::Moe: {
          const auto& c = std::get<MoeConfig>(l.config);
          s.slots.push_back(add_param(prefix + ".router", projection(d, c.n_experts, rng)));
          for (int e = 0; e < c.n_experts; ++e) {
            add_ffn(prefix + ".expert" + std::to_string(e), c.expert());
          }
          break;
        }
      }
      block.push_back(std::move(s));
    }
    blocks_.push_back(std::move(block));
  }
  final_gain_ = add_param("final_norm.gain", Matrix::Ones(1, d));
  final_bias_ = add_param("final_norm.bias", Matrix::Zero(1, d));
  output_ = add_param("output.w", projection(d, spec_.vocab_size, rng));
}

std::size_t Model::add_param(std::string name, Matrix value) {
  params_.emplace_back(std::move(name), std::move(value));
  return params_.size() - 1;
}

Parameter& Model::parameter(const std::string& name) {
  for (Parameter& p : params_) {
    if (p.name == name) return p;
  }
  throw InputError("Model: no parameter named '" + name + "'");
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const Parameter& p : params_) n += p.size();
  return n;
}

void Model::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

SubLayerWeights Model::bind(Tape& tape, const SubLayerSlots& s) {
  auto at = [&](std::size_t i) { return tape.parameter(params_[s.slots[i]]); };
  SubLayerWeights w;
  w.norm_gain = tape.parameter(params_[s.gain]);
  w.norm_bias = tape.parameter(params_[s.bias]);
  auto bind_ffn = [&](std::size_t& i, Activation a) {
    FfnWeights f;
    f.w_in = at(i++);
    if (is_gated(a)) f.w_gate = at(i++);
    f.w_out = at(i++);
    return f;
  };
  std::size_t i = 0;
  switch (s.layer.kind) {
    case LayerKind::Attn:
      w.weights = AttentionWeights{at(0), at(1), at(2), at(3)};
      break;
    case LayerKind::Ffn:
      w.weights = bind_ffn(i, std::get<FfnConfig>(s.layer.config).activation);
      break;
    case LayerKind::Moe: {
      const auto& c = std::get<MoeConfig>(s.layer.config);
      MoeWeights m;
      m.router = at(i++);
      for (int e = 0; e < c.n_experts; ++e) m.experts.push_back(bind_ffn(i, c.activation));
      w.weights = std::move(m);
      break;
    }
  }
  return w;
}

LmOutput Model::lm_forward(Tape& tape, std::span<const int> tokens) {
  const int len = static_cast<int>(tokens.size());
  if (len < 1) throw InputError("lm_forward: empty sequence");
  if (len > spec_.max_seq_len) {
    throw InputError("lm_forward: sequence of " + std::to_string(len) + " exceeds max_seq_len " +
                     std::to_string(spec_.max_seq_len));
  }
  for (int id : tokens) {
    if (id < 0 || id >= spec_.vocab_size) {
      throw InputError("lm_forward: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(spec_.vocab_size));
    }
  }
  std::vector<int> positions(static_cast<std::size_t>(len));
  std::iota(positions.begin(), positions.end(), 0);

  Var x = add(gather_rows(tape.parameter(params_[token_embedding_]), tokens),
              gather_rows(tape.parameter(params_[position_embedding_]), positions));
  Var aux;
  for (const auto& block : blocks_) {
    for (const SubLayerSlots& s : block) x = apply_sublayer(x, s.layer, bind(tape, s), &aux);
  }
  x = layer_norm(x, tape.parameter(params_[final_gain_]), tape.parameter(params_[final_bias_]),
                 kLayerNormEps);
  LmOutput out;
  out.logits = matmul(x, tape.parameter(params_[output_]));
  out.aux_loss = aux.valid() ? aux : tape.constant(Matrix::Zero(1, 1));
  return out;
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::string& stem, const json& meta, std::span<const NamedTensor> tensors) {
  std::ofstream bin(stem + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw ConfigError(stem + ".bin: cannot open for writing");
  json index = json::array();
  std::int64_t offset = 0;
  for (const NamedTensor& t : tensors) {
    bin.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(Scalar)));
    index.push_back({{"name", t.name},
                     {"shape", {t.value.rows(), t.value.cols()}},
                     {"offset", offset}});
    offset += t.value.size();
  }
  if (!bin) throw ConfigError(stem + ".bin: write failed");
  json sidecar{{"schema_version", 1},
               {"dtype", "float64"},
               {"layout", "row-major"},
               {"total_elements", offset},
               {"tensors", index},
               {"meta", meta}};
  std::ofstream side(stem + ".json", std::ios::trunc);
  if (!side) throw ConfigError(stem + ".json: cannot open for writing");
  side << sidecar.dump(2) << '\n';
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

Checkpoint load_checkpoint(const std::string& stem) {
  const json sidecar = read_json_file(stem + ".json");
  std::ifstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw ConfigError(stem + ".bin: cannot open");
  Checkpoint ck;
  ck.meta = sidecar.value("meta", json::object());
  if (!sidecar.contains("tensors") || !sidecar["tensors"].is_array()) {
    throw ConfigError(stem + ".json: missing tensors index");
  }
  for (const json& t : sidecar["tensors"]) {
    NamedTensor nt;
    nt.name = json_field::get_string(t, "name", "checkpoint.tensors");
    const auto shape = json_field::get_int_list(t, "shape", "checkpoint.tensors");
    if (shape.size() != 2) throw ConfigError(stem + ".json: tensor '" + nt.name + "' shape must be 2-d");
    const std::int64_t offset = t.at("offset").get<std::int64_t>();
    nt.value.resize(shape[0], shape[1]);
    bin.seekg(static_cast<std::streamoff>(offset * static_cast<std::int64_t>(sizeof(Scalar))));
    bin.read(reinterpret_cast<char*>(nt.value.data()),
             static_cast<std::streamsize>(nt.value.size() * sizeof(Scalar)));
    if (!bin) throw ConfigError(stem + ".bin: truncated data for tensor '" + nt.name + "'");
    ck.tensors.push_back(std::move(nt));
  }
  return ck;
}

}  // namespace brainformer
