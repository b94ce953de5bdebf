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

#include "brainformer/search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace brainformer {

using nlohmann::json;

namespace {

template <typename T>
const T& pick(const std::vector<T>& domain, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, domain.size() - 1);
  return domain[d(rng)];
}

template <typename T>
bool has(const std::vector<T>& domain, const T& v) {
  return std::find(domain.begin(), domain.end(), v) != domain.end();
}

template <typename T>
bool has_other(const std::vector<T>& domain, const T& v) {
  return std::any_of(domain.begin(), domain.end(), [&](const T& x) { return !(x == v); });
}

template <typename T>
T pick_other(const std::vector<T>& domain, const T& current, std::mt19937_64& rng) {
  std::vector<T> others;
  for (const T& x : domain) {
    if (!(x == current)) others.push_back(x);
  }
  return pick(others, rng);
}

template <typename T>
void check_domain(const std::vector<T>& domain, const char* field) {
  if (domain.empty()) throw ConfigError(std::string("space.") + field + ": domain is empty");
  std::vector<T> sorted = domain;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError(std::string("space.") + field + ": duplicate values");
  }
}

void check_positive(const std::vector<int>& domain, const char* field) {
  check_domain(domain, field);
  for (int v : domain) {
    if (v < 1) throw ConfigError(std::string("space.") + field + ": values must be positive");
  }
}

bool is_valid(const BlockSpec& b) {
  try {
    b.validate();
    return true;
  } catch (const Error&) {
    return false;
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t trial_seed(std::uint64_t seed, int id) {
  return splitmix64(splitmix64(seed ^ 0x5851f42d4c957f2dULL) ^ static_cast<std::uint64_t>(id));
}

template <typename T, typename Parse>
std::vector<T> string_list(const json& j, const char* field, Parse parse) {
  const json& v = j.at(field);
  if (!v.is_array()) throw ConfigError(std::string("space.") + field + ": expected a list of strings");
  std::vector<T> out;
  for (const json& e : v) {
    if (!e.is_string()) throw ConfigError(std::string("space.") + field + ": expected strings");
    try {
      out.push_back(parse(e.get<std::string>()));
    } catch (const ConfigError& err) {
      throw ConfigError(std::string("space.") + field + ": " + err.what());
    }
  }
  return out;
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> known,
                    std::string_view context) {
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError(std::string(context) + "." + item.key() + ": unknown field");
    }
  }
}

json optional_number(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}

}  // namespace

// ---- space ------------------------------------------------------------------

void SearchSpace::validate() const {
  check_positive(model_dims, "model_dim");
  check_positive(moe_hidden_dims, "moe_hidden_dim");
  check_positive(ffn_hidden_dims, "ffn_hidden_dim");
  check_positive(n_heads, "n_heads");
  check_domain(gatings, "gating");
  check_positive(capacity_factors, "capacity_factor");
  check_domain(activations, "activation");
  check_domain(layer_kinds, "layer_types");
  check_positive(block_lengths, "block_length");
  if (!has(layer_kinds, LayerKind::Attn)) {
    throw ConfigError("space.layer_types: must include attn");
  }
  if (n_experts < 1) throw ConfigError("space.n_experts: must be positive");
  if (head_dim < 1) throw ConfigError("space.head_dim: must be positive");
}

bool SearchSpace::contains(const BlockSpec& b) const {
  if (b.n_experts != n_experts || b.head_dim != head_dim) return false;
  if (!has(model_dims, b.model_dim) || !has(moe_hidden_dims, b.moe_hidden_dim) ||
      !has(ffn_hidden_dims, b.ffn_hidden_dim) || !has(n_heads, b.n_heads) ||
      !has(gatings, b.gating) || !has(capacity_factors, b.capacity_factor) ||
      !has(activations, b.activation) || !has(block_lengths, b.length())) {
    return false;
  }
  return std::all_of(b.layers.begin(), b.layers.end(),
                     [&](LayerKind k) { return has(layer_kinds, k); });
}

std::int64_t SearchSpace::cardinality() const {
  constexpr auto kMax = std::numeric_limits<std::int64_t>::max();
  auto mul = [&](std::int64_t a, std::int64_t b) { return (b != 0 && a > kMax / b) ? kMax : a * b; };
  std::int64_t scalar = 1;
  for (std::size_t n : {model_dims.size(), moe_hidden_dims.size(), ffn_hidden_dims.size(),
                        n_heads.size(), gatings.size(), capacity_factors.size(),
                        activations.size()}) {
    scalar = mul(scalar, static_cast<std::int64_t>(n));
  }
  std::int64_t layouts = 0;
  for (int k : block_lengths) {
    std::int64_t n = 1;
    for (int i = 0; i < k; ++i) n = mul(n, static_cast<std::int64_t>(layer_kinds.size()));
    layouts = (layouts > kMax - n) ? kMax : layouts + n;
  }
  return mul(scalar, layouts);
}

json to_json(const SearchSpace& s) {
  json gatings = json::array(), activations = json::array(), kinds = json::array();
  for (Gating g : s.gatings) gatings.push_back(to_string(g));
  for (Activation a : s.activations) activations.push_back(to_string(a));
  for (LayerKind k : s.layer_kinds) kinds.push_back(to_string(k));
  return json{{"model_dim", s.model_dims},
              {"moe_hidden_dim", s.moe_hidden_dims},
              {"ffn_hidden_dim", s.ffn_hidden_dims},
              {"n_heads", s.n_heads},
              {"gating", gatings},
              {"capacity_factor", s.capacity_factors},
              {"activation", activations},
              {"layer_types", kinds},
              {"block_length", s.block_lengths},
              {"n_experts", s.n_experts},
              {"head_dim", s.head_dim}};
}

SearchSpace search_space_from_json(const json& j, std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected an object");
  reject_unknown(j,
                 {"model_dim", "moe_hidden_dim", "ffn_hidden_dim", "n_heads", "gating",
                  "capacity_factor", "activation", "layer_types", "block_length", "n_experts",
                  "head_dim"},
                 context);
  namespace f = json_field;
  SearchSpace s;
  if (j.contains("model_dim")) s.model_dims = f::get_int_list(j, "model_dim", context);
  if (j.contains("moe_hidden_dim")) s.moe_hidden_dims = f::get_int_list(j, "moe_hidden_dim", context);
  if (j.contains("ffn_hidden_dim")) s.ffn_hidden_dims = f::get_int_list(j, "ffn_hidden_dim", context);
  if (j.contains("n_heads")) s.n_heads = f::get_int_list(j, "n_heads", context);
  if (j.contains("capacity_factor")) s.capacity_factors = f::get_int_list(j, "capacity_factor", context);
  if (j.contains("block_length")) s.block_lengths = f::get_int_list(j, "block_length", context);
  if (j.contains("gating")) {
    s.gatings = string_list<Gating>(j, "gating", [](const std::string& v) { return parse_gating(v); });
  }
  if (j.contains("activation")) {
    s.activations = string_list<Activation>(j, "activation",
                                            [](const std::string& v) { return parse_activation(v); });
  }
  if (j.contains("layer_types")) {
    s.layer_kinds = string_list<LayerKind>(j, "layer_types",
                                           [](const std::string& v) { return parse_layer_kind(v); });
  }
  s.n_experts = f::get_int(j, "n_experts", context, s.n_experts);
  s.head_dim = f::get_int(j, "head_dim", context, s.head_dim);
  s.validate();
  return s;
}

BlockSpec sample_block(const SearchSpace& space, std::mt19937_64& rng, int max_attempts) {
  space.validate();
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    BlockSpec b;
    b.model_dim = pick(space.model_dims, rng);
    b.moe_hidden_dim = pick(space.moe_hidden_dims, rng);
    b.ffn_hidden_dim = pick(space.ffn_hidden_dims, rng);
    b.n_heads = pick(space.n_heads, rng);
    b.gating = pick(space.gatings, rng);
    b.capacity_factor = pick(space.capacity_factors, rng);
    b.activation = pick(space.activations, rng);
    b.n_experts = space.n_experts;
    b.head_dim = space.head_dim;
    const int length = pick(space.block_lengths, rng);
    b.layers.resize(static_cast<std::size_t>(length));
    for (LayerKind& k : b.layers) k = pick(space.layer_kinds, rng);
    if (is_valid(b)) return b;
  }
  throw ConfigError("space: no valid genome after " + std::to_string(max_attempts) + " draws");
}

std::vector<std::string> mutable_fields(const SearchSpace& space, const BlockSpec& parent) {
  std::vector<std::string> out;
  if (has_other(space.model_dims, parent.model_dim)) out.emplace_back("model_dim");
  if (has_other(space.moe_hidden_dims, parent.moe_hidden_dim)) out.emplace_back("moe_hidden_dim");
  if (has_other(space.ffn_hidden_dims, parent.ffn_hidden_dim)) out.emplace_back("ffn_hidden_dim");
  if (has_other(space.n_heads, parent.n_heads)) out.emplace_back("n_heads");
  if (has_other(space.gatings, parent.gating)) out.emplace_back("gating");
  if (has_other(space.capacity_factors, parent.capacity_factor)) out.emplace_back("capacity_factor");
  if (has_other(space.activations, parent.activation)) out.emplace_back("activation");
  if (has_other(space.block_lengths, parent.length())) out.emplace_back("length");
  for (int i = 0; i < parent.length(); ++i) {
    if (has_other(space.layer_kinds, parent.layers[static_cast<std::size_t>(i)])) {
      out.push_back("layers[" + std::to_string(i) + "]");
    }
  }
  return out;
}

Mutation mutate(const SearchSpace& space, const BlockSpec& parent, std::mt19937_64& rng,
                int max_attempts) {
  const std::vector<std::string> fields = mutable_fields(space, parent);
  if (fields.empty()) throw ConfigError("mutate: no field has an alternative value");
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Mutation m{parent, pick(fields, rng)};
    BlockSpec& c = m.child;
    const std::string& f = m.field;
    if (f == "model_dim") {
      c.model_dim = pick_other(space.model_dims, c.model_dim, rng);
    } else if (f == "moe_hidden_dim") {
      c.moe_hidden_dim = pick_other(space.moe_hidden_dims, c.moe_hidden_dim, rng);
    } else if (f == "ffn_hidden_dim") {
      c.ffn_hidden_dim = pick_other(space.ffn_hidden_dims, c.ffn_hidden_dim, rng);
    } else if (f == "n_heads") {
      c.n_heads = pick_other(space.n_heads, c.n_heads, rng);
    } else if (f == "gating") {
      c.gating = pick_other(space.gatings, c.gating, rng);
    } else if (f == "capacity_factor") {
      c.capacity_factor = pick_other(space.capacity_factors, c.capacity_factor, rng);
    } else if (f == "activation") {
      c.activation = pick_other(space.activations, c.activation, rng);
    } else if (f == "length") {
      const int length = pick_other(space.block_lengths, c.length(), rng);
      const auto old = c.layers.size();
      c.layers.resize(static_cast<std::size_t>(length));
      for (std::size_t i = old; i < c.layers.size(); ++i) c.layers[i] = pick(space.layer_kinds, rng);
    } else {
      const auto i = static_cast<std::size_t>(std::stoi(f.substr(7)));
      c.layers[i] = pick_other(space.layer_kinds, c.layers[i], rng);
    }
    if (is_valid(c)) return m;
  }
  throw ConfigError("mutate: no valid child after " + std::to_string(max_attempts) + " draws");
}

// ---- trial records ----------------------------------------------------------

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::Completed:
      return "completed";
    case StopReason::StepTimeViolation:
      return "step_time_violation";
    case StopReason::PerplexityViolation:
      return "perplexity_violation";
    case StopReason::Diverged:
      return "diverged";
    case StopReason::NoSteps:
      return "no_steps";
  }
  return "?";
}

StopReason parse_stop_reason(std::string_view s) {
  for (StopReason r : {StopReason::Completed, StopReason::StepTimeViolation,
                       StopReason::PerplexityViolation, StopReason::Diverged, StopReason::NoSteps}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("unknown stop_reason '" + std::string(s) + "'");
}

json to_json(const TrialRecord& r) {
  json j{{"id", r.id},
         {"parent_id", r.parent_id},
         {"round", r.round},
         {"genome", to_json(r.genome)},
         {"step_time", r.step_time},
         {"cost_per_step", r.cost_per_step},
         {"train_losses", r.train_losses},
         {"steps_completed", r.steps_completed},
         {"budget_consumed", r.budget_consumed},
         {"check_perplexity", optional_number(r.check_perplexity)},
         {"final_val_loss", optional_number(r.final_val_loss)},
         {"reward", r.reward},
         {"stop_reason", to_string(r.stop_reason)}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

TrialRecord trial_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("trial: expected an object");
  namespace f = json_field;
  TrialRecord r;
  r.id = f::get_int(j, "id", "trial");
  r.parent_id = f::get_int(j, "parent_id", "trial");
  r.round = f::get_int(j, "round", "trial");
  r.genome = block_from_json(f::get_object(j, "genome", "trial"));
  r.step_time = f::get_double(j, "step_time", "trial");
  r.cost_per_step = f::get_double(j, "cost_per_step", "trial");
  const json* losses = j.contains("train_losses") ? &j.at("train_losses") : nullptr;
  if (losses == nullptr || !losses->is_array()) {
    throw ConfigError("trial.train_losses: expected a list of numbers");
  }
  for (const json& v : *losses) {
    if (!v.is_number()) throw ConfigError("trial.train_losses: expected numbers");
    r.train_losses.push_back(v.get<double>());
  }
  r.steps_completed = f::get_int(j, "steps_completed", "trial");
  r.budget_consumed = f::get_double(j, "budget_consumed", "trial");
  for (auto [field, slot] : {std::pair{"check_perplexity", &r.check_perplexity},
                             std::pair{"final_val_loss", &r.final_val_loss}}) {
    if (!j.contains(field)) throw ConfigError(std::string("trial.") + field + ": missing");
    if (!j.at(field).is_null()) *slot = f::get_double(j, field, "trial");
  }
  r.reward = f::get_double(j, "reward", "trial");
  r.stop_reason = parse_stop_reason(f::get_string(j, "stop_reason", "trial"));
  r.error = f::get_string(j, "error", "trial", "");
  return r;
}

// ---- backends ---------------------------------------------------------------

ModelSpec proxy_model_spec(const BlockSpec& genome, int seq_len) {
  ModelSpec m;
  m.block = genome;
  m.n_blocks = kProxyStack;
  m.vocab_size = kByteVocabSize;
  m.max_seq_len = seq_len;
  return m;
}

namespace {

class ProxySession final : public TrialSession {
 public:
  ProxySession(const BlockSpec& genome, const Corpus& corpus, TrainConfig cfg, int reps)
      : cfg_(std::move(cfg)),
        model_(proxy_model_spec(genome, cfg_.seq_len), cfg_.seed),
        trainer_(model_, corpus, cfg_),
        reps_(reps) {}

  double cost_per_step() const override { return trainer_.cost_per_step(); }
  double measure_step_seconds() override {
    return measure_step_time(model_, cfg_.batch_size, cfg_.seq_len, reps_, cfg_).median_seconds;
  }
  Step step() override {
    const StepRecord r = trainer_.step();
    return {r.train_loss, r.step_seconds};
  }
  double validation_loss() override { return trainer_.validation_loss(); }

 private:
  TrainConfig cfg_;
  Model model_;
  Trainer trainer_;
  int reps_;
};

class SurrogateSession final : public TrialSession {
 public:
  SurrogateSession(const SurrogateModel& m, BlockSpec genome)
      : model_(m), genome_(std::move(genome)), cost_(m.cost_of(genome_)) {}

  double cost_per_step() const override { return cost_; }
  double measure_step_seconds() override { return cost_ * model_.seconds_per_unit; }
  Step step() override {
    ++steps_;
    return {model_.loss_at(genome_, steps_), cost_ * model_.seconds_per_unit};
  }
  double validation_loss() override { return model_.loss_at(genome_, steps_); }

 private:
  const SurrogateModel& model_;
  BlockSpec genome_;
  double cost_;
  int steps_ = 0;
};

}  // namespace

ProxyBackend::ProxyBackend(const Corpus& corpus, TrainConfig train, int timing_repetitions)
    : corpus_(corpus), train_(std::move(train)), timing_repetitions_(timing_repetitions) {
  train_.validate();
  if (timing_repetitions_ < 3) throw ConfigError("proxy.timing_repetitions: must be >= 3");
}

std::unique_ptr<TrialSession> ProxyBackend::open(const BlockSpec& genome, std::uint64_t seed) const {
  TrainConfig cfg = train_;
  cfg.seed = seed;
  cfg.eval_interval = 0;
  return std::make_unique<ProxySession>(genome, corpus_, cfg, timing_repetitions_);
}

double SurrogateModel::default_floor(const BlockSpec& genome, int seq_len) {
  const ParamCount pc = count_params(proxy_model_spec(genome, seq_len));
  return 1.0 + 1000.0 / std::sqrt(static_cast<double>(pc.n_act_params_no_embed));
}

double SurrogateModel::loss_at(const BlockSpec& genome, int steps) const {
  const double base = floor ? floor(genome) : default_floor(genome, seq_len);
  return base + amplitude / (1.0 + rate * steps);
}

double SurrogateModel::cost_of(const BlockSpec& genome) const {
  if (cost) return cost(genome);
  return estimate_flops(proxy_model_spec(genome, seq_len), seq_len).train_step * batch_size;
}

std::unique_ptr<TrialSession> SurrogateBackend::open(const BlockSpec& genome, std::uint64_t) const {
  return std::make_unique<SurrogateSession>(model_, genome);
}

// ---- trials -----------------------------------------------------------------

StopReason early_stop_check(double step_time, double perplexity, const Baseline& baseline,
                            const Constraints& constraints) {
  if (constraints.step_time && step_time > baseline.step_time) return StopReason::StepTimeViolation;
  if (constraints.perplexity && perplexity > baseline.check_perplexity) {
    return StopReason::PerplexityViolation;
  }
  return StopReason::Completed;
}

TrialRecord run_trial(const BlockSpec& genome, const TrialBackend& backend, const TrialConfig& cfg,
                      const Baseline* baseline, std::uint64_t seed) {
  if (!(cfg.budget.value >= 0.0)) throw ConfigError("trial.budget: must be >= 0");
  if (!(cfg.check_fraction >= 0.0 && cfg.check_fraction <= 1.0)) {
    throw ConfigError("trial.check_fraction: must lie in [0, 1]");
  }
  TrialRecord rec;
  rec.genome = genome;
  const std::unique_ptr<TrialSession> session = backend.open(genome, seed);
  rec.cost_per_step = session->cost_per_step();
  const Budget::Kind kind = cfg.budget.kind;
  rec.step_time = kind == Budget::Kind::Seconds ? session->measure_step_seconds() : rec.cost_per_step;

  const double total = cfg.budget.value;
  auto fits = [&] {
    switch (kind) {
      case Budget::Kind::Steps:
        return rec.steps_completed < static_cast<int>(total);
      case Budget::Kind::Cost:
        return rec.budget_consumed + rec.cost_per_step <= total;
      case Budget::Kind::Seconds:
        return rec.budget_consumed < total;
    }
    return false;
  };
  auto fail = [&](StopReason reason, std::string error) {
    rec.stop_reason = reason;
    rec.error = std::move(error);
    rec.reward = -1.0;
    return rec;
  };

  while (fits()) {
    TrialSession::Step s;
    try {
      s = session->step();
    } catch (const TrainingError& e) {
      return fail(StopReason::Diverged, e.what());
    }
    ++rec.steps_completed;
    rec.train_losses.push_back(s.train_loss);
    rec.budget_consumed += kind == Budget::Kind::Cost      ? rec.cost_per_step
                           : kind == Budget::Kind::Seconds ? s.seconds
                                                           : 1.0;
    if (!rec.check_perplexity && rec.budget_consumed >= cfg.check_fraction * total) {
      double ppl = 0.0;
      try {
        ppl = std::exp(session->validation_loss());
      } catch (const NumericError& e) {
        return fail(StopReason::Diverged, e.what());
      }
      if (!std::isfinite(ppl)) return fail(StopReason::Diverged, "non-finite validation perplexity");
      rec.check_perplexity = ppl;
      if (baseline != nullptr) {
        const StopReason r = early_stop_check(rec.step_time, ppl, *baseline, cfg.constraints);
        if (r != StopReason::Completed) return fail(r, "");
      }
    }
  }
  if (rec.steps_completed == 0) return fail(StopReason::NoSteps, "");
  double loss = 0.0;
  try {
    loss = session->validation_loss();
  } catch (const NumericError& e) {
    return fail(StopReason::Diverged, e.what());
  }
  if (!std::isfinite(loss)) return fail(StopReason::Diverged, "non-finite validation loss");
  rec.final_val_loss = loss;
  rec.reward = -loss;
  rec.stop_reason = StopReason::Completed;
  return rec;
}

BlockSpec glam_baseline_block(const SearchSpace& space) {
  space.validate();
  auto choose = [](std::vector<int> domain, int preferred) {
    if (has(domain, preferred)) return preferred;
    std::sort(domain.begin(), domain.end());
    return domain[(domain.size() - 1) / 2];
  };
  BlockSpec b;
  b.layers = {LayerKind::Attn, LayerKind::Ffn, LayerKind::Attn, LayerKind::Moe,
              LayerKind::Attn, LayerKind::Ffn, LayerKind::Attn, LayerKind::Moe};
  b.model_dim = choose(space.model_dims, 768);
  b.moe_hidden_dim = choose(space.moe_hidden_dims, 3072);
  b.ffn_hidden_dim = choose(space.ffn_hidden_dims, 3072);
  b.n_heads = choose(space.n_heads, 12);
  b.head_dim = space.head_dim;
  b.gating = Gating::Top2;
  b.capacity_factor = choose(space.capacity_factors, 2);
  b.activation = Activation::GeLU;
  b.n_experts = space.n_experts;
  b.validate();
  return b;
}

Baseline measure_baseline(const BlockSpec& genome, const TrialBackend& backend,
                          const TrialConfig& cfg, std::uint64_t seed, TrialRecord* record) {
  TrialRecord r = run_trial(genome, backend, cfg, nullptr, seed);
  r.id = -1;
  if (record != nullptr) *record = r;
  if (r.stop_reason != StopReason::Completed || !r.check_perplexity) {
    throw TrainingError("baseline did not complete: " + std::string(to_string(r.stop_reason)) +
                        (r.error.empty() ? "" : " (" + r.error + ")"));
  }
  return {r.step_time, *r.check_perplexity};
}

// ---- evolution --------------------------------------------------------------

int EvolutionConfig::tournament() const {
  return tournament_size > 0 ? tournament_size : std::max(2, population_size / 5);
}

void EvolutionConfig::validate() const {
  if (population_size < 2) throw ConfigError("search.population_size: must be >= 2");
  if (rounds < 0) throw ConfigError("search.rounds: must be >= 0");
  if (children_per_round < 0) throw ConfigError("search.children_per_round: must be >= 0");
  if (tournament_size < 0) throw ConfigError("search.tournament_size: must be >= 0");
  if (workers < 1) throw ConfigError("search.workers: must be >= 1");
}

std::mt19937_64 trial_rng(std::uint64_t seed, int round, int slot) {
  std::uint64_t z = splitmix64(seed);
  z = splitmix64(z ^ static_cast<std::uint64_t>(round));
  z = splitmix64(z ^ (static_cast<std::uint64_t>(slot) << 32));
  return std::mt19937_64(z);
}

int tournament_select(const std::vector<int>& population, const std::vector<TrialRecord>& history,
                      int size, std::mt19937_64& rng) {
  if (population.empty()) throw InputError("tournament_select: empty population");
  const int s = std::clamp(size, 1, static_cast<int>(population.size()));
  std::vector<int> pool = population;
  int best = -1;
  for (int i = 0; i < s; ++i) {
    std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(i), pool.size() - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[d(rng)]);
    const int id = pool[static_cast<std::size_t>(i)];
    if (best < 0) {
      best = id;
      continue;
    }
    const double rb = history[static_cast<std::size_t>(best)].reward;
    const double rc = history[static_cast<std::size_t>(id)].reward;
    if (rc > rb || (rc == rb && id < best)) best = id;
  }
  return best;
}

namespace {

struct Job {
  int id = 0;
  int parent_id = -1;
  int round = 0;
  BlockSpec genome;
};

std::vector<TrialRecord> run_jobs(const std::vector<Job>& jobs, const TrialBackend& backend,
                                  const TrialConfig& trial, const Baseline* baseline,
                                  std::uint64_t seed, int workers) {
  std::vector<TrialRecord> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const Job& j = jobs[i];
        out[i] = run_trial(j.genome, backend, trial, baseline, trial_seed(seed, j.id));
        out[i].id = j.id;
        out[i].parent_id = j.parent_id;
        out[i].round = j.round;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::min<int>(workers, static_cast<int>(jobs.size()));
  if (n <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace

EvolutionState evolve(const SearchSpace& space, const EvolutionConfig& cfg,
                      const TrialBackend& backend, const TrialConfig& trial,
                      const Baseline* baseline, const std::vector<TrialRecord>& recorded,
                      const TrialSink& sink) {
  space.validate();
  cfg.validate();
  for (std::size_t i = 0; i < recorded.size(); ++i) {
    if (recorded[i].id != static_cast<int>(i)) {
      throw ConfigError("ledger: trial ids are not consecutive from 0 (found " +
                        std::to_string(recorded[i].id) + " at line " + std::to_string(i + 1) + ")");
    }
  }

  EvolutionState state;
  auto settle = [&](const std::vector<Job>& jobs) {
    std::vector<Job> fresh;
    for (const Job& j : jobs) {
      if (j.id < static_cast<int>(recorded.size())) {
        const TrialRecord& r = recorded[static_cast<std::size_t>(j.id)];
        if (!(r.genome == j.genome) || r.parent_id != j.parent_id || r.round != j.round) {
          throw ConfigError("ledger: trial " + std::to_string(j.id) +
                            " does not match this configuration");
        }
      } else {
        fresh.push_back(j);
      }
    }
    const std::vector<TrialRecord> results =
        run_jobs(fresh, backend, trial, baseline, cfg.seed, cfg.workers);
    std::size_t k = 0;
    for (const Job& j : jobs) {
      if (j.id < static_cast<int>(recorded.size())) {
        state.history.push_back(recorded[static_cast<std::size_t>(j.id)]);
      } else {
        state.history.push_back(results[k++]);
        if (sink) sink(state.history.back());
      }
      state.population.push_back(j.id);
    }
    const auto excess = static_cast<std::ptrdiff_t>(state.population.size()) - cfg.population_size;
    if (excess > 0) state.population.erase(state.population.begin(), state.population.begin() + excess);
  };

  std::vector<Job> jobs;
  for (int slot = 0; slot < cfg.population_size; ++slot) {
    std::mt19937_64 rng = trial_rng(cfg.seed, 0, slot);
    jobs.push_back({slot, -1, 0, sample_block(space, rng)});
  }
  settle(jobs);

  for (int round = 1; round <= cfg.rounds; ++round) {
    const std::vector<int> snapshot = state.population;
    const int first_id = static_cast<int>(state.history.size());
    jobs.clear();
    for (int slot = 0; slot < cfg.children(); ++slot) {
      std::mt19937_64 rng = trial_rng(cfg.seed, round, slot);
      const int parent = tournament_select(snapshot, state.history, cfg.tournament(), rng);
      Mutation m = mutate(space, state.history[static_cast<std::size_t>(parent)].genome, rng);
      jobs.push_back({first_id + slot, parent, round, std::move(m.child)});
    }
    settle(jobs);
  }
  return state;
}

TopKResult finalize_topk(const std::vector<TrialRecord>& history, int k,
                         const std::vector<int>& factors, const std::vector<int>& stack_counts,
                         int vocab_size, int max_seq_len) {
  if (history.empty()) throw InputError("finalize_topk: empty history");
  if (k < 1) throw InputError("finalize_topk: k must be >= 1");
  if (factors.size() != stack_counts.size()) {
    throw InputError("finalize_topk: factors and stack counts differ in length");
  }
  std::vector<const TrialRecord*> completed;
  for (const TrialRecord& r : history) {
    if (r.stop_reason == StopReason::Completed) completed.push_back(&r);
  }
  std::sort(completed.begin(), completed.end(), [](const TrialRecord* a, const TrialRecord* b) {
    return a->reward != b->reward ? a->reward > b->reward : a->id < b->id;
  });
  TopKResult out;
  out.incomplete = static_cast<int>(completed.size()) < k;
  const auto n = std::min<std::size_t>(completed.size(), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    const TrialRecord& r = *completed[i];
    TopKEntry e{r.id, r.reward, r.genome, {}};
    for (std::size_t t = 0; t < factors.size(); ++t) {
      ModelSpec m;
      m.block = scale_model_dim(r.genome, factors[t]);
      m.n_blocks = stack_counts[t];
      m.vocab_size = vocab_size;
      m.max_seq_len = max_seq_len;
      m.validate();
      e.scaled.push_back({factors[t], m});
    }
    out.entries.push_back(std::move(e));
  }
  return out;
}

json to_json(const TopKResult& r) {
  json entries = json::array();
  for (const TopKEntry& e : r.entries) {
    json scaled = json::array();
    for (const ScaledSpec& s : e.scaled) {
      scaled.push_back({{"factor", s.factor}, {"model", to_json(s.model)}});
    }
    entries.push_back({{"trial_id", e.trial_id},
                       {"reward", e.reward},
                       {"genome", to_json(e.genome)},
                       {"scaled", scaled}});
  }
  return json{{"entries", entries}, {"incomplete", r.incomplete}};
}

// ---- ledger -----------------------------------------------------------------

LedgerContents read_ledger(const std::string& path) {
  LedgerContents out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      ++out.corrupt_lines;  // torn tail
      break;
    }
    const std::string_view line(text.data() + pos, nl - pos);
    if (!line.empty()) {
      try {
        out.records.push_back(trial_from_json(json::parse(line)));
      } catch (const std::exception&) {
        ++out.corrupt_lines;
      }
    }
    pos = nl + 1;
    out.valid_bytes = pos;
  }
  return out;
}

void truncate_torn_tail(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const std::size_t last = text.rfind('\n');
  const std::size_t keep = last == std::string::npos ? 0 : last + 1;
  if (keep != text.size()) fs::resize_file(path, keep);
}

LedgerWriter::LedgerWriter(const std::string& path, bool append) : path_(path) {
  std::ofstream out(path_, append ? std::ios::app | std::ios::binary : std::ios::trunc | std::ios::binary);
  if (!out) throw ConfigError(path_ + ": cannot open ledger for writing");
}

void LedgerWriter::write(const TrialRecord& r) {
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  out << to_json(r).dump() << '\n';
  out.flush();
  if (!out) throw Error(path_ + ": ledger write failed");
}

// ---- config -----------------------------------------------------------------

SearchConfig search_config_from_json(const json& j, const std::string& base_dir) {
  constexpr std::string_view ctx = "search";
  if (!j.is_object()) throw ConfigError("search: expected a JSON object");
  reject_unknown(j,
                 {"schema_version", "seed", "population_size", "rounds", "children_per_round",
                  "tournament_size", "workers", "budget_mode", "budget", "budgets", "check_fraction",
                  "constraints", "space", "backend", "surrogate", "proxy", "baseline", "topk"},
                 ctx);
  namespace f = json_field;
  const int version = f::get_int(j, "schema_version", ctx, kGenomeSchemaVersion);
  if (version != kGenomeSchemaVersion) {
    throw ConfigError("search.schema_version: unsupported version " + std::to_string(version));
  }
  SearchConfig c;
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer() || j["seed"].get<long long>() < 0) {
      throw ConfigError("search.seed: expected a non-negative integer");
    }
    c.evolution.seed = j["seed"].get<std::uint64_t>();
  }
  c.evolution.population_size = f::get_int(j, "population_size", ctx, c.evolution.population_size);
  c.evolution.rounds = f::get_int(j, "rounds", ctx, c.evolution.rounds);
  c.evolution.children_per_round = f::get_int(j, "children_per_round", ctx, 0);
  c.evolution.tournament_size = f::get_int(j, "tournament_size", ctx, 0);
  c.evolution.workers = f::get_int(j, "workers", ctx, 1);
  c.evolution.validate();

  const std::string mode = f::get_string(j, "budget_mode", ctx, "cost");
  if (j.contains("budgets")) {
    const json& b = f::get_object(j, "budgets", ctx);
    reject_unknown(b, {"cost", "wallclock", "steps"}, "search.budgets");
    for (const auto& item : b.items()) {
      c.budgets[item.key()] = f::get_double(b, item.key(), "search.budgets");
    }
  }
  if (j.contains("budget")) c.budgets[mode] = f::get_double(j, "budget", ctx);
  for (const auto& [m, v] : c.budgets) {
    if (!(v >= 0.0)) throw ConfigError("search.budgets." + m + ": must be >= 0");
  }
  select_budget_mode(c, mode);
  c.trial.check_fraction = f::get_double(j, "check_fraction", ctx, 0.25);
  if (!(c.trial.check_fraction >= 0.0 && c.trial.check_fraction <= 1.0)) {
    throw ConfigError("search.check_fraction: must lie in [0, 1]");
  }
  if (j.contains("constraints")) {
    const json& k = f::get_object(j, "constraints", ctx);
    reject_unknown(k, {"step_time", "perplexity"}, "search.constraints");
    c.trial.constraints.step_time = f::get_bool(k, "step_time", "search.constraints", true);
    c.trial.constraints.perplexity = f::get_bool(k, "perplexity", "search.constraints", true);
  }
  if (j.contains("space")) c.space = search_space_from_json(f::get_object(j, "space", ctx));

  const std::string backend = f::get_string(j, "backend", ctx, "surrogate");
  if (backend == "surrogate") {
    c.backend = SearchConfig::Backend::Surrogate;
  } else if (backend == "proxy") {
    c.backend = SearchConfig::Backend::Proxy;
  } else {
    throw ConfigError("search.backend: expected surrogate or proxy");
  }
  if (j.contains("surrogate")) {
    const json& s = f::get_object(j, "surrogate", ctx);
    constexpr std::string_view sctx = "search.surrogate";
    reject_unknown(s, {"amplitude", "rate", "seconds_per_unit", "seq_len", "batch_size"}, sctx);
    c.surrogate.amplitude = f::get_double(s, "amplitude", sctx, c.surrogate.amplitude);
    c.surrogate.rate = f::get_double(s, "rate", sctx, c.surrogate.rate);
    c.surrogate.seconds_per_unit = f::get_double(s, "seconds_per_unit", sctx, c.surrogate.seconds_per_unit);
    c.surrogate.seq_len = f::get_int(s, "seq_len", sctx, c.surrogate.seq_len);
    c.surrogate.batch_size = f::get_int(s, "batch_size", sctx, c.surrogate.batch_size);
    if (c.surrogate.rate < 0.0 || c.surrogate.seconds_per_unit <= 0.0 || c.surrogate.seq_len < 1 ||
        c.surrogate.batch_size < 1) {
      throw ConfigError("search.surrogate: rate >= 0, seconds_per_unit > 0, seq_len and batch_size >= 1");
    }
  }
  if (j.contains("proxy")) {
    const json& p = f::get_object(j, "proxy", ctx);
    constexpr std::string_view pctx = "search.proxy";
    reject_unknown(p, {"corpus", "valid_fraction", "train"}, pctx);
    c.corpus_path = f::get_string(p, "corpus", pctx, "");
    if (!c.corpus_path.empty() && !base_dir.empty() &&
        std::filesystem::path(c.corpus_path).is_relative()) {
      c.corpus_path = (std::filesystem::path(base_dir) / c.corpus_path).string();
    }
    c.valid_fraction = f::get_double(p, "valid_fraction", pctx, c.valid_fraction);
    if (p.contains("train")) c.train = train_config_from_json(f::get_object(p, "train", pctx), "search.proxy.train");
  }
  if (c.backend == SearchConfig::Backend::Proxy && c.corpus_path.empty()) {
    throw ConfigError("search.proxy.corpus: required for the proxy backend");
  }
  if (j.contains("baseline")) {
    try {
      c.baseline = block_from_json(f::get_object(j, "baseline", ctx));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("search.baseline: ") + e.what());
    }
  }
  if (j.contains("topk")) {
    const json& t = f::get_object(j, "topk", ctx);
    constexpr std::string_view tctx = "search.topk";
    reject_unknown(t, {"k", "factors", "stack_counts"}, tctx);
    c.top_k = f::get_int(t, "k", tctx, c.top_k);
    if (t.contains("factors")) c.scale_factors = f::get_int_list(t, "factors", tctx);
    if (t.contains("stack_counts")) c.stack_counts = f::get_int_list(t, "stack_counts", tctx);
  }
  if (c.top_k < 1) throw ConfigError("search.topk.k: must be >= 1");
  if (c.scale_factors.size() != c.stack_counts.size()) {
    throw ConfigError("search.topk: factors and stack_counts must have the same length");
  }
  for (int fct : c.scale_factors) {
    if (fct != 2 && fct != 4) throw ConfigError("search.topk.factors: each factor must be 2 or 4");
  }
  for (int n : c.stack_counts) {
    if (n < 1) throw ConfigError("search.topk.stack_counts: must be positive");
  }
  return c;
}

void select_budget_mode(SearchConfig& c, const std::string& mode) {
  if (mode != "cost" && mode != "wallclock" && mode != "steps") {
    throw ConfigError("search.budget_mode: expected cost, wallclock or steps");
  }
  const auto it = c.budgets.find(mode);
  if (it == c.budgets.end()) {
    throw ConfigError("search.budget: no budget given for mode '" + mode + "'");
  }
  if (mode == "cost") {
    c.trial.budget = Budget::cost(it->second);
  } else if (mode == "wallclock") {
    c.trial.budget = Budget::seconds(it->second);
  } else {
    c.trial.budget = Budget::steps(static_cast<int>(it->second));
  }
}

}  // namespace brainformer
