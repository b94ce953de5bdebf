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

// Byte-level LM training: constant-then-inverse-sqrt learning rate,
// Adafactor without first moment, budgeted training loop and perplexity.

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "brainformer/model.hpp"

namespace brainformer {

inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
/// 256 byte values plus BOS/EOS.
inline constexpr int kByteVocabSize = 258;

struct TrainConfig {
  double base_lr = 0.01;
  int warmup_constant_steps = 100;
  int max_steps = 1000;
  int batch_size = 8;
  int seq_len = 128;
  std::uint64_t seed = 0;
  double aux_coeff = 0.01;
  // Adafactor. beta1 is fixed at 0: no first-moment state exists.
  double beta2 = 0.99;
  double clip_threshold = 1.0;
  double eps1 = 1e-30;
  double eps2 = 1e-3;
  bool scale_by_parameter_rms = true;
  // Validation every eval_interval steps (0 disables) over at most
  // eval_windows windows of the validation split (0 = all).
  int eval_interval = 100;
  int eval_windows = 16;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing fields keep their defaults; mistyped ones raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, std::string_view context = "train");

/// base_lr for step <= W, base_lr * sqrt(W / step) afterwards.
double lr_at(int step, const TrainConfig& cfg);

// ---- Adafactor --------------------------------------------------------------

struct AdafactorOptions {
  double beta2 = 0.99;
  double clip_threshold = 1.0;
  double eps1 = 1e-30;
  double eps2 = 1e-3;
  bool scale_by_parameter_rms = true;

  static AdafactorOptions from(const TrainConfig& c) {
    return {c.beta2, c.clip_threshold, c.eps1, c.eps2, c.scale_by_parameter_rms};
  }
};

/// Second-moment statistics for one parameter. Matrices with both dims > 1
/// keep a row vector and a column vector; anything else keeps a full copy.
struct AdafactorState {
  bool factored = false;
  Matrix row;   // [r, 1] when factored
  Matrix col;   // [1, c] when factored
  Matrix full;  // same shape as the parameter otherwise

  static AdafactorState for_shape(Index rows, Index cols);
  /// Number of scalars held; there is no first-moment buffer.
  Index size() const { return row.size() + col.size() + full.size(); }
};

/// One update of `p` from `p.grad`. Throws TrainingError when the gradient
/// holds NaN/Inf.
void adafactor_update(Parameter& p, AdafactorState& state, double lr, const AdafactorOptions& opt);

// ---- data -------------------------------------------------------------------

std::vector<int> encode_bytes(std::string_view bytes);

class Corpus {
 public:
  /// The first (1 - valid_fraction) of the bytes train, the rest validate.
  static Corpus from_bytes(std::string_view bytes, double valid_fraction);
  static Corpus from_file(const std::string& path, double valid_fraction);
  /// Same split rule over arbitrary token ids.
  static Corpus from_tokens(std::vector<int> tokens, double valid_fraction);

  std::span<const int> train() const { return train_; }
  std::span<const int> valid() const { return valid_; }

 private:
  std::vector<int> train_;
  std::vector<int> valid_;
};

// ---- loop -------------------------------------------------------------------

struct Budget {
  enum class Kind { Steps, Seconds, Cost };
  Kind kind = Kind::Steps;
  double value = 0.0;

  static Budget steps(int n) { return {Kind::Steps, static_cast<double>(n)}; }
  static Budget seconds(double s) { return {Kind::Seconds, s}; }
  static Budget cost(double units) { return {Kind::Cost, units}; }
};

struct StepRecord {
  int step = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  double step_seconds = 0.0;
  double cost_units = 0.0;  // analytic FLOPs of this step
};

struct EvalRecord {
  int step = 0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
};

/// Mean next-token cross entropy over consecutive windows of seq_len + 1
/// tokens. Throws InputError for fewer than 2 tokens.
double evaluate_loss(Model& model, std::span<const int> tokens, int seq_len, int max_windows = 0);
/// exp(evaluate_loss).
double evaluate_perplexity(Model& model, std::span<const int> tokens, int seq_len,
                           int max_windows = 0);

/// Owns the optimizer state and batch sampler of one training run. The
/// training split is cut into consecutive windows of seq_len inputs (the
/// last may be shorter); each batch row is a uniformly drawn window.
class Trainer {
 public:
  Trainer(Model& model, const Corpus& corpus, TrainConfig cfg);

  /// One optimizer step. Throws TrainingError on NaN/Inf loss or gradients.
  StepRecord step();
  double validation_loss();

  /// Analytic FLOPs of one step (forward + backward over the batch).
  double cost_per_step() const { return cost_per_step_; }
  int steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  const std::vector<AdafactorState>& optimizer_state() const { return state_; }

  /// Model parameters plus optimizer statistics, for checkpointing.
  std::vector<NamedTensor> snapshot() const;
  /// Restores parameters, optimizer statistics and the step counter.
  void restore(const Checkpoint& ck);

 private:
  Model& model_;
  const Corpus& corpus_;
  TrainConfig cfg_;
  AdafactorOptions opt_;
  std::vector<AdafactorState> state_;
  std::mt19937_64 sampler_;
  int step_ = 0;
  int window_ = 0;
  int n_chunks_ = 0;
  double cost_per_step_ = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> trajectory;
  std::vector<EvalRecord> evals;
  bool diverged = false;
  std::string error;
  double cost_consumed = 0.0;
  int steps_completed() const { return static_cast<int>(trajectory.size()); }
};

using TrainObserver = std::function<void(const StepRecord&, const EvalRecord*)>;

/// Runs steps until the budget is spent. A step is only started if it fits:
/// in cost mode the consumed total never exceeds the budget. Divergence
/// stops the run and keeps the partial trajectory.
TrainResult train_steps(Trainer& trainer, const Budget& budget, const TrainObserver& observe = {});

struct StepTiming {
  double median_seconds = 0.0;
  double analytic_flops = 0.0;
};

/// Median wall time of forward + backward + update on a copy of `model`,
/// after one warm-up step. Requires repetitions >= 3.
StepTiming measure_step_time(const Model& model, int batch_size, int seq_len, int repetitions,
                             const TrainConfig& cfg = {});

}  // namespace brainformer
