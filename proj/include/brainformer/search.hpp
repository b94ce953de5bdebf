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

// Block search by regularized evolution. Each trial stacks a candidate
// block three times, trains it under a fixed budget and is pruned at a
// fraction of that budget if it is slower than the baseline or behind the
// baseline's perplexity. Survivors are rewarded with -validation loss.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "brainformer/genome.hpp"
#include "brainformer/model.hpp"
#include "brainformer/training.hpp"

namespace brainformer {

// ---- space ------------------------------------------------------------------

/// Finite domain of every searched field. n_experts and head_dim are run
/// parameters and stay fixed.
struct SearchSpace {
  std::vector<int> model_dims{512, 768, 1024};
  std::vector<int> moe_hidden_dims{1536, 2048, 3072, 4096};
  std::vector<int> ffn_hidden_dims{1536, 2048, 3072, 4096};
  std::vector<int> n_heads{12, 16, 20};
  std::vector<Gating> gatings{Gating::Top2, Gating::ExpertChoice};
  std::vector<int> capacity_factors{1, 2, 3, 4};
  std::vector<Activation> activations{Activation::GatedReLU, Activation::GatedGeLU,
                                      Activation::ReLU, Activation::GeLU};
  std::vector<LayerKind> layer_kinds{LayerKind::Attn, LayerKind::Moe, LayerKind::Ffn};
  std::vector<int> block_lengths{4, 5, 6, 7, 8, 9, 10};
  int n_experts = 32;
  int head_dim = 64;

  /// Throws ConfigError for an empty or non-positive domain.
  void validate() const;
  bool contains(const BlockSpec& b) const;
  /// Number of distinct genomes, ignoring BlockSpec validity. Saturates at
  /// INT64_MAX.
  std::int64_t cardinality() const;
};

nlohmann::json to_json(const SearchSpace& s);
/// Fields absent from `j` keep the defaults.
SearchSpace search_space_from_json(const nlohmann::json& j, std::string_view context = "space");

/// Uniform independent draw per field, redrawn until the genome validates.
/// Throws ConfigError after `max_attempts` rejections.
BlockSpec sample_block(const SearchSpace& space, std::mt19937_64& rng, int max_attempts = 1000);

struct Mutation {
  BlockSpec child;
  /// "model_dim", "moe_hidden_dim", "ffn_hidden_dim", "n_heads", "gating",
  /// "capacity_factor", "activation", "length" or "layers[i]".
  std::string field;
};

/// Fields of `parent` whose domain offers another value.
std::vector<std::string> mutable_fields(const SearchSpace& space, const BlockSpec& parent);

/// Resamples one uniformly chosen mutable field to a different value. A
/// length change truncates or appends freshly drawn layers. Draws yielding an
/// invalid child are rejected; ConfigError after `max_attempts`.
Mutation mutate(const SearchSpace& space, const BlockSpec& parent, std::mt19937_64& rng,
                int max_attempts = 1000);

// ---- trials -----------------------------------------------------------------

enum class StopReason { Completed, StepTimeViolation, PerplexityViolation, Diverged, NoSteps };

std::string_view to_string(StopReason r);
StopReason parse_stop_reason(std::string_view s);

struct TrialRecord {
  int id = 0;
  int parent_id = -1;
  int round = 0;
  BlockSpec genome;
  /// Constraint-side step time: analytic cost in cost/steps mode, seconds in
  /// wall-clock mode.
  double step_time = 0.0;
  double cost_per_step = 0.0;
  std::vector<double> train_losses;
  int steps_completed = 0;
  double budget_consumed = 0.0;
  /// Perplexity at the check fraction, if the check was reached.
  std::optional<double> check_perplexity;
  std::optional<double> final_val_loss;
  double reward = -1.0;
  StopReason stop_reason = StopReason::NoSteps;
  std::string error;
};

nlohmann::json to_json(const TrialRecord& r);
TrialRecord trial_from_json(const nlohmann::json& j);

/// One training run of a stacked candidate.
class TrialSession {
 public:
  virtual ~TrialSession() = default;
  /// Analytic cost of one step.
  virtual double cost_per_step() const = 0;
  /// Wall-clock seconds of one step (measured or simulated).
  virtual double measure_step_seconds() = 0;
  struct Step {
    double train_loss = 0.0;
    double seconds = 0.0;
  };
  /// Throws TrainingError on divergence.
  virtual Step step() = 0;
  virtual double validation_loss() = 0;
};

class TrialBackend {
 public:
  virtual ~TrialBackend() = default;
  /// Sessions from one backend may run on different threads.
  virtual std::unique_ptr<TrialSession> open(const BlockSpec& genome, std::uint64_t seed) const = 0;
};

/// Stacks the block `kProxyStack` times.
inline constexpr int kProxyStack = 3;
ModelSpec proxy_model_spec(const BlockSpec& genome, int seq_len);

/// Real training of the stacked proxy on a byte corpus.
class ProxyBackend final : public TrialBackend {
 public:
  ProxyBackend(const Corpus& corpus, TrainConfig train, int timing_repetitions = 3);
  std::unique_ptr<TrialSession> open(const BlockSpec& genome, std::uint64_t seed) const override;

 private:
  const Corpus& corpus_;
  TrainConfig train_;
  int timing_repetitions_;
};

/// Analytic loss curve: loss(s) = floor(genome) + amplitude / (1 + rate * s),
/// with validation loss equal to the training curve. Cost per step defaults
/// to the proxy's analytic FLOPs; one cost unit lasts seconds_per_unit.
struct SurrogateModel {
  double amplitude = 4.0;
  double rate = 0.01;
  double seconds_per_unit = 1e-12;
  int seq_len = 128;
  int batch_size = 1;
  std::function<double(const BlockSpec&)> floor;
  std::function<double(const BlockSpec&)> cost;

  /// Default floor: 1 + 1000 / sqrt(activated non-embedding proxy params).
  static double default_floor(const BlockSpec& genome, int seq_len);
  double loss_at(const BlockSpec& genome, int steps) const;
  double cost_of(const BlockSpec& genome) const;
};

class SurrogateBackend final : public TrialBackend {
 public:
  explicit SurrogateBackend(SurrogateModel model) : model_(std::move(model)) {}
  std::unique_ptr<TrialSession> open(const BlockSpec& genome, std::uint64_t seed) const override;
  const SurrogateModel& model() const { return model_; }

 private:
  SurrogateModel model_;
};

/// Reference point for the pruning rules.
struct Baseline {
  double step_time = 0.0;
  double check_perplexity = 0.0;
};

struct Constraints {
  bool step_time = true;
  bool perplexity = true;
};

struct TrialConfig {
  Budget budget = Budget::cost(0.0);
  double check_fraction = 0.25;
  Constraints constraints;
};

/// Continue, or the violation that stops the trial. Both comparisons are
/// strict: equality continues.
StopReason early_stop_check(double step_time, double perplexity, const Baseline& baseline,
                            const Constraints& constraints = {});

/// Trains `genome` under cfg.budget. At the first step where consumed
/// budget reaches check_fraction, the step time and validation perplexity
/// are compared with `baseline` (skipped when null). Reward is -final
/// validation loss when completed and -1 otherwise.
TrialRecord run_trial(const BlockSpec& genome, const TrialBackend& backend, const TrialConfig& cfg,
                      const Baseline* baseline, std::uint64_t seed);

/// GLaM-style block [attn, ffn, attn, moe] x 2 with top-2 routing and GeLU;
/// the three-fold proxy stack then has the 12 layers of GLaM 0.1B.
/// Each width takes the GLaM 0.1B value (d 768, hidden 3072, 12 heads,
/// capacity 2) when the domain has it, else the lower median.
BlockSpec glam_baseline_block(const SearchSpace& space);

/// Trains the baseline unconstrained and reads off its reference values.
/// Throws TrainingError if it does not complete.
Baseline measure_baseline(const BlockSpec& genome, const TrialBackend& backend,
                          const TrialConfig& cfg, std::uint64_t seed, TrialRecord* record = nullptr);

// ---- evolution --------------------------------------------------------------

struct EvolutionConfig {
  int population_size = 16;
  int rounds = 10;
  /// Children per round; 0 means population_size.
  int children_per_round = 0;
  /// 0 means max(2, population_size / 5).
  int tournament_size = 0;
  int workers = 1;
  std::uint64_t seed = 0;

  int children() const { return children_per_round > 0 ? children_per_round : population_size; }
  int tournament() const;
  void validate() const;
};

struct EvolutionState {
  /// Trial ids, oldest first. Never longer than population_size.
  std::vector<int> population;
  /// Every trial in id order.
  std::vector<TrialRecord> history;
};

/// Called once per new trial, in id order, from the coordinating thread.
using TrialSink = std::function<void(const TrialRecord&)>;

/// Deterministic per-(seed, round, slot) stream.
std::mt19937_64 trial_rng(std::uint64_t seed, int round, int slot);

/// Tournament over `population`: best reward among `size` distinct
/// uniformly drawn members, ties to the earlier id.
int tournament_select(const std::vector<int>& population, const std::vector<TrialRecord>& history,
                      int size, std::mt19937_64& rng);

/// Round 0 samples population_size genomes; each later round draws
/// children from the population as it stood at the round start, evaluates
/// them concurrently, appends them in id order and evicts the oldest.
/// Trials present in `recorded` (a prior ledger) are reused instead of
/// re-run; ConfigError if one disagrees with the replayed genome.
EvolutionState evolve(const SearchSpace& space, const EvolutionConfig& cfg,
                      const TrialBackend& backend, const TrialConfig& trial,
                      const Baseline* baseline, const std::vector<TrialRecord>& recorded = {},
                      const TrialSink& sink = {});

struct ScaledSpec {
  int factor = 1;
  ModelSpec model;
};

struct TopKEntry {
  int trial_id = 0;
  double reward = 0.0;
  BlockSpec genome;
  std::vector<ScaledSpec> scaled;
};

struct TopKResult {
  std::vector<TopKEntry> entries;
  /// Fewer than k completed trials were available.
  bool incomplete = false;
};

/// The k best completed trials (ties to the earlier id), each scaled by
/// factors[i] and stacked stack_counts[i] times.
TopKResult finalize_topk(const std::vector<TrialRecord>& history, int k,
                         const std::vector<int>& factors, const std::vector<int>& stack_counts,
                         int vocab_size = kByteVocabSize, int max_seq_len = 128);

nlohmann::json to_json(const TopKResult& r);

// ---- ledger -----------------------------------------------------------------

struct LedgerContents {
  std::vector<TrialRecord> records;
  int corrupt_lines = 0;
  /// Byte length of the well-formed prefix.
  std::uintmax_t valid_bytes = 0;
};

/// Reads a JSONL ledger. Malformed lines are counted and skipped; a missing
/// file reads as empty.
LedgerContents read_ledger(const std::string& path);

/// Drops a torn final line (no trailing newline) so appends start clean.
void truncate_torn_tail(const std::string& path);

/// Appends one record per line and flushes after each.
class LedgerWriter {
 public:
  LedgerWriter(const std::string& path, bool append);
  void write(const TrialRecord& r);

 private:
  std::string path_;
};

// ---- config -----------------------------------------------------------------

struct SearchConfig {
  SearchSpace space;
  EvolutionConfig evolution;
  TrialConfig trial;
  /// Per-trial budget by mode ("cost", "wallclock", "steps").
  std::map<std::string, double> budgets;
  enum class Backend { Surrogate, Proxy };
  Backend backend = Backend::Surrogate;
  SurrogateModel surrogate;
  std::string corpus_path;
  double valid_fraction = 0.1;
  TrainConfig train;
  std::optional<BlockSpec> baseline;
  int top_k = 3;
  std::vector<int> scale_factors{2, 4};
  std::vector<int> stack_counts{6, 8};
};

/// Throws ConfigError naming the offending field. Relative corpus paths are
/// resolved against `base_dir`.
SearchConfig search_config_from_json(const nlohmann::json& j, const std::string& base_dir = "");

/// Points trial.budget at budgets[mode]; ConfigError if absent.
void select_budget_mode(SearchConfig& c, const std::string& mode);

}  // namespace brainformer
