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

#include "brainformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace brainformer {

using nlohmann::json;

void TrainConfig::validate() const {
  auto positive = [](bool ok, const char* field) {
    if (!ok) throw ConfigError(std::string("train.") + field + ": must be positive");
  };
  positive(base_lr > 0.0, "base_lr");
  positive(warmup_constant_steps >= 1, "warmup_constant_steps");
  positive(max_steps >= 0, "max_steps");
  positive(batch_size >= 1, "batch_size");
  positive(seq_len >= 1, "seq_len");
  positive(aux_coeff >= 0.0, "aux_coeff");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2: must lie in (0, 1)");
  positive(clip_threshold > 0.0, "clip_threshold");
  positive(eps1 > 0.0, "eps1");
  positive(eps2 > 0.0, "eps2");
  positive(eval_interval >= 0, "eval_interval");
  positive(eval_windows >= 0, "eval_windows");
}

json to_json(const TrainConfig& c) {
  return json{{"base_lr", c.base_lr},
              {"warmup_constant_steps", c.warmup_constant_steps},
              {"max_steps", c.max_steps},
              {"batch_size", c.batch_size},
              {"seq_len", c.seq_len},
              {"seed", c.seed},
              {"aux_coeff", c.aux_coeff},
              {"beta2", c.beta2},
              {"clip_threshold", c.clip_threshold},
              {"eps1", c.eps1},
              {"eps2", c.eps2},
              {"scale_by_parameter_rms", c.scale_by_parameter_rms},
              {"eval_interval", c.eval_interval},
              {"eval_windows", c.eval_windows}};
}

TrainConfig train_config_from_json(const json& j, std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected an object");
  namespace f = json_field;
  TrainConfig c;
  c.base_lr = f::get_double(j, "base_lr", context, c.base_lr);
  c.warmup_constant_steps = f::get_int(j, "warmup_constant_steps", context, c.warmup_constant_steps);
  c.max_steps = f::get_int(j, "max_steps", context, c.max_steps);
  c.batch_size = f::get_int(j, "batch_size", context, c.batch_size);
  c.seq_len = f::get_int(j, "seq_len", context, c.seq_len);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !(j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0)) {
      throw ConfigError(std::string(context) + ".seed: expected a non-negative integer");
    }
    c.seed = j["seed"].get<std::uint64_t>();
  }
  c.aux_coeff = f::get_double(j, "aux_coeff", context, c.aux_coeff);
  c.beta2 = f::get_double(j, "beta2", context, c.beta2);
  c.clip_threshold = f::get_double(j, "clip_threshold", context, c.clip_threshold);
  c.eps1 = f::get_double(j, "eps1", context, c.eps1);
  c.eps2 = f::get_double(j, "eps2", context, c.eps2);
  c.scale_by_parameter_rms =
      f::get_bool(j, "scale_by_parameter_rms", context, c.scale_by_parameter_rms);
  c.eval_interval = f::get_int(j, "eval_interval", context, c.eval_interval);
  c.eval_windows = f::get_int(j, "eval_windows", context, c.eval_windows);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    if (context != "train" && msg.rfind("train.", 0) == 0) msg = std::string(context) + msg.substr(5);
    throw ConfigError(msg);
  }
  return c;
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 1) throw InputError("lr_at: step must be >= 1");
  if (step <= cfg.warmup_constant_steps) return cfg.base_lr;
  return cfg.base_lr * std::sqrt(static_cast<double>(cfg.warmup_constant_steps) / step);
}

// ---- Adafactor --------------------------------------------------------------

AdafactorState AdafactorState::for_shape(Index rows, Index cols) {
  AdafactorState s;
  s.factored = rows > 1 && cols > 1;
  if (s.factored) {
    s.row = Matrix::Zero(rows, 1);
    s.col = Matrix::Zero(1, cols);
  } else {
    s.full = Matrix::Zero(rows, cols);
  }
  return s;
}

void adafactor_update(Parameter& p, AdafactorState& state, double lr, const AdafactorOptions& opt) {
  const Matrix& g = p.grad;
  if (g.rows() != p.value.rows() || g.cols() != p.value.cols()) {
    throw DimensionError("adafactor_update: gradient shape does not match '" + p.name + "'");
  }
  if (!g.allFinite()) {
    throw TrainingError("adafactor_update: non-finite gradient in parameter '" + p.name + "'");
  }
  const double beta2 = opt.beta2;
  const Matrix g2 = g.array().square() + opt.eps1;
  Matrix update;
  if (state.factored) {
    state.row = beta2 * state.row + (1.0 - beta2) * g2.rowwise().sum();
    state.col = beta2 * state.col + (1.0 - beta2) * g2.colwise().sum();
    const Matrix v_hat = (state.row * state.col) / state.row.sum();
    update = g.array() / v_hat.array().sqrt();
  } else {
    state.full = beta2 * state.full + (1.0 - beta2) * g2;
    update = g.array() / state.full.array().sqrt();
  }
  const double rms_update = std::sqrt(update.array().square().mean());
  update /= std::max(1.0, rms_update / opt.clip_threshold);
  double step_size = lr;
  if (opt.scale_by_parameter_rms) {
    const double rms_param = std::sqrt(p.value.array().square().mean());
    step_size *= std::max(opt.eps2, rms_param);
  }
  p.value -= step_size * update;
}

// ---- data -------------------------------------------------------------------

std::vector<int> encode_bytes(std::string_view bytes) {
  std::vector<int> out;
  out.reserve(bytes.size());
  for (char c : bytes) out.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  return out;
}

Corpus Corpus::from_bytes(std::string_view bytes, double valid_fraction) {
  return from_tokens(encode_bytes(bytes), valid_fraction);
}

Corpus Corpus::from_tokens(std::vector<int> tokens, double valid_fraction) {
  if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) {
    throw ConfigError("corpus.valid_fraction: must lie in [0, 1)");
  }
  const auto n_train = static_cast<std::size_t>(
      std::floor((1.0 - valid_fraction) * static_cast<double>(tokens.size())));
  Corpus c;
  c.train_.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.valid_.assign(tokens.begin() + static_cast<std::ptrdiff_t>(n_train), tokens.end());
  if (c.train_.size() < 2) throw InputError("corpus: training split needs at least 2 tokens");
  return c;
}

Corpus Corpus::from_file(const std::string& path, double valid_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open corpus");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_bytes(bytes, valid_fraction);
}

// ---- evaluation -------------------------------------------------------------

double evaluate_loss(Model& model, std::span<const int> tokens, int seq_len, int max_windows) {
  const auto n = static_cast<int>(tokens.size());
  if (n < 2) throw InputError("evaluate_loss: need at least 2 tokens");
  if (seq_len < 1) throw InputError("evaluate_loss: seq_len must be >= 1");
  const int len_cap = std::min(seq_len, model.spec().max_seq_len);
  double total = 0.0;
  int count = 0;
  int windows = 0;
  for (int start = 0; start < n - 1; start += len_cap) {
    if (max_windows > 0 && windows >= max_windows) break;
    const int len = std::min(len_cap, n - 1 - start);
    Tape tape;
    const LmOutput out = model.lm_forward(tape, tokens.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(len)));
    const Var ce = cross_entropy(out.logits, tokens.subspan(static_cast<std::size_t>(start + 1), static_cast<std::size_t>(len)));
    total += ce.item() * len;
    count += len;
    ++windows;
  }
  return total / count;
}

double evaluate_perplexity(Model& model, std::span<const int> tokens, int seq_len, int max_windows) {
  return std::exp(evaluate_loss(model, tokens, seq_len, max_windows));
}

// ---- trainer ----------------------------------------------------------------

Trainer::Trainer(Model& model, const Corpus& corpus, TrainConfig cfg)
    : model_(model),
      corpus_(corpus),
      cfg_(std::move(cfg)),
      opt_(AdafactorOptions::from(cfg_)),
      sampler_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.validate();
  const auto n_train = static_cast<int>(corpus_.train().size());
  window_ = std::min({cfg_.seq_len, model_.spec().max_seq_len, n_train - 1});
  if (window_ < 1) throw InputError("Trainer: training split too short");
  n_chunks_ = (n_train - 2) / window_ + 1;
  state_.reserve(model_.parameters().size());
  for (const Parameter& p : model_.parameters()) {
    state_.push_back(AdafactorState::for_shape(p.value.rows(), p.value.cols()));
  }
  cost_per_step_ = estimate_flops(model_.spec(), window_).train_step * cfg_.batch_size;
}

StepRecord Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const int next = step_ + 1;
  const double lr = lr_at(next, cfg_);
  const std::span<const int> train = corpus_.train();
  const auto n = static_cast<int>(train.size());
  std::uniform_int_distribution<int> pick(0, n_chunks_ - 1);

  model_.zero_grad();
  double ce_total = 0.0;
  try {
    Tape tape;
    Var objective;
    for (int b = 0; b < cfg_.batch_size; ++b) {
      const int start = pick(sampler_) * window_;
      const auto len = static_cast<std::size_t>(std::min(window_, n - 1 - start));
      const auto inputs = train.subspan(static_cast<std::size_t>(start), len);
      const auto targets = train.subspan(static_cast<std::size_t>(start) + 1, len);
      const LmOutput out = model_.lm_forward(tape, inputs);
      const Var ce = cross_entropy(out.logits, targets);
      ce_total += ce.item();
      const Var loss = add(ce, scale(out.aux_loss, cfg_.aux_coeff));
      objective = objective.valid() ? add(objective, loss) : loss;
    }
    tape.backward(scale(objective, 1.0 / cfg_.batch_size));
  } catch (const NumericError& e) {
    throw TrainingError("diverged at step " + std::to_string(next) + ": " + e.what());
  }
  for (std::size_t i = 0; i < state_.size(); ++i) {
    adafactor_update(model_.parameters()[i], state_[i], lr, opt_);
  }
  step_ = next;

  StepRecord r;
  r.step = step_;
  r.train_loss = ce_total / cfg_.batch_size;
  r.lr = lr;
  r.cost_units = cost_per_step_;
  r.step_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

double Trainer::validation_loss() {
  const auto valid = corpus_.valid();
  if (valid.size() < 2) throw InputError("Trainer: validation split is empty");
  return evaluate_loss(model_, valid, window_, cfg_.eval_windows);
}

std::vector<NamedTensor> Trainer::snapshot() const {
  std::vector<NamedTensor> out;
  const auto& params = model_.parameters();
  for (const Parameter& p : params) out.push_back({p.name, p.value});
  for (std::size_t i = 0; i < params.size(); ++i) {
    const AdafactorState& s = state_[i];
    const std::string base = "adafactor." + params[i].name;
    if (s.factored) {
      out.push_back({base + ".row", s.row});
      out.push_back({base + ".col", s.col});
    } else {
      out.push_back({base + ".full", s.full});
    }
  }
  return out;
}

void Trainer::restore(const Checkpoint& ck) {
  auto& params = model_.parameters();
  auto load = [&](const std::string& name, Matrix& dst) {
    const NamedTensor* t = ck.find(name);
    if (t == nullptr) throw ConfigError("checkpoint: missing tensor '" + name + "'");
    if (t->value.rows() != dst.rows() || t->value.cols() != dst.cols()) {
      throw ConfigError("checkpoint: tensor '" + name + "' has the wrong shape");
    }
    dst = t->value;
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    load(params[i].name, params[i].value);
    const std::string base = "adafactor." + params[i].name;
    if (state_[i].factored) {
      load(base + ".row", state_[i].row);
      load(base + ".col", state_[i].col);
    } else {
      load(base + ".full", state_[i].full);
    }
  }
  step_ = ck.meta.value("step", 0);
  // Replay the sampler draws of the restored steps.
  std::uniform_int_distribution<int> pick(0, n_chunks_ - 1);
  sampler_.seed(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
  for (long long i = 0; i < static_cast<long long>(step_) * cfg_.batch_size; ++i) pick(sampler_);
}

TrainResult train_steps(Trainer& trainer, const Budget& budget, const TrainObserver& observe) {
  TrainResult r;
  const auto start = std::chrono::steady_clock::now();
  const TrainConfig& cfg = trainer.config();
  for (;;) {
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool fits = false;
    switch (budget.kind) {
      case Budget::Kind::Steps:
        fits = r.steps_completed() < static_cast<int>(budget.value);
        break;
      case Budget::Kind::Seconds:
        fits = elapsed < budget.value;
        break;
      case Budget::Kind::Cost:
        fits = r.cost_consumed + trainer.cost_per_step() <= budget.value;
        break;
    }
    if (!fits) break;

    StepRecord rec;
    try {
      rec = trainer.step();
    } catch (const TrainingError& e) {
      r.diverged = true;
      r.error = e.what();
      break;
    }
    r.cost_consumed += rec.cost_units;
    r.trajectory.push_back(rec);

    const EvalRecord* eval = nullptr;
    if (cfg.eval_interval > 0 && rec.step % cfg.eval_interval == 0) {
      try {
        const double loss = trainer.validation_loss();
        r.evals.push_back({rec.step, loss, std::exp(loss)});
        eval = &r.evals.back();
      } catch (const InputError&) {
        // no validation split
      }
    }
    if (observe) observe(rec, eval);
  }
  return r;
}

StepTiming measure_step_time(const Model& model, int batch_size, int seq_len, int repetitions,
                             const TrainConfig& cfg) {
  if (repetitions < 3) throw InputError("measure_step_time: repetitions must be >= 3");
  Model copy = model;
  TrainConfig tc = cfg;
  tc.batch_size = batch_size;
  tc.seq_len = std::min(seq_len, copy.spec().max_seq_len);
  tc.eval_interval = 0;
  tc.validate();

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> token(0, copy.spec().vocab_size - 1);
  std::vector<int> tokens(static_cast<std::size_t>((batch_size + 2) * (tc.seq_len + 1) + 1));
  for (int& t : tokens) t = token(rng);
  const Corpus corpus = Corpus::from_tokens(std::move(tokens), 0.0);

  Trainer trainer(copy, corpus, tc);
  trainer.step();  // warm-up
  std::vector<double> times;
  for (int i = 0; i < repetitions; ++i) times.push_back(trainer.step().step_seconds);
  const auto mid = times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2);
  std::nth_element(times.begin(), mid, times.end());
  return {*mid, trainer.cost_per_step()};
}

}  // namespace brainformer
