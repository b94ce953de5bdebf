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

#include "brainformer/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <openssl/evp.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "brainformer/model.hpp"
#include "brainformer/report.hpp"
#include "brainformer/search.hpp"
#include "brainformer/training.hpp"

namespace brainformer::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- references -------------------------------------------------------------

namespace {

constexpr int kReferenceVocab = 32000;
constexpr int kReferenceSeqLen = 1024;

ModelSpec reference_spec(bool moe, int layers, int d, int hidden, int heads, int head_dim,
                         int experts) {
  ModelSpec m;
  BlockSpec& b = m.block;
  b.model_dim = d;
  b.ffn_hidden_dim = hidden;
  b.moe_hidden_dim = hidden;
  b.n_heads = heads;
  b.head_dim = head_dim;
  b.gating = Gating::Top2;
  b.capacity_factor = 2;
  b.activation = Activation::GeLU;
  b.n_experts = moe ? experts : 1;
  if (moe) {
    b.layers = {LayerKind::Attn, LayerKind::Ffn, LayerKind::Attn, LayerKind::Moe};
    m.n_blocks = layers / 2;
  } else {
    b.layers = {LayerKind::Attn, LayerKind::Ffn};
    m.n_blocks = layers;
  }
  m.vocab_size = kReferenceVocab;
  m.max_seq_len = kReferenceSeqLen;
  return m;
}

}  // namespace

const std::vector<ReferenceRow>& reference_rows() {
  static const std::vector<ReferenceRow> rows = {
      {"dense-0.1b", "0.1B", 130e6, 130e6, reference_spec(false, 12, 768, 3072, 12, 64, 1)},
      {"glam-0.1b-32e", "0.1B/32E", 1.9e9, 145e6, reference_spec(true, 12, 768, 3072, 12, 64, 32)},
      {"dense-1.7b", "1.7B", 1.7e9, 1.700e9, reference_spec(false, 24, 2048, 8192, 16, 128, 1)},
      {"glam-1.7b-64e", "1.7B/64E", 27e9, 1.879e9,
       reference_spec(true, 24, 2048, 8192, 16, 128, 64)},
      {"dense-8b", "8B", 8.7e9, 8.7e9, reference_spec(false, 32, 4096, 16384, 32, 128, 1)},
      {"glam-8b-64e", "8B/64E", 143e9, 9.8e9, reference_spec(true, 32, 4096, 16384, 32, 128, 64)},
  };
  return rows;
}

const ReferenceRow& find_reference(std::string_view name) {
  for (const ReferenceRow& r : reference_rows()) {
    if (r.name == name) return r;
  }
  std::string known;
  for (const ReferenceRow& r : reference_rows()) known += (known.empty() ? "" : ", ") + r.name;
  throw ConfigError("--reference: unknown '" + std::string(name) + "' (known: " + known + ")");
}

json count_params_report(const ModelSpec& model, int seq_len,
                         const std::vector<const ReferenceRow*>& references) {
  model.validate();
  const ParamCount pc = count_params(model);
  const FlopEstimate fl = estimate_flops(model, seq_len);
  json j{{"model", to_json(model)},
         {"n_params", pc.n_params},
         {"n_params_no_embed", pc.n_params_no_embed},
         {"n_act_params", pc.n_act_params},
         {"n_act_params_no_embed", pc.n_act_params_no_embed},
         {"embedding_params", pc.embedding_params},
         {"seq_len", seq_len},
         {"flops_forward_per_sequence", fl.forward},
         {"flops_train_step_per_sequence", fl.train_step},
         {"flops_forward_per_token", fl.forward / seq_len},
         {"convention",
          "embedding_params = token table (V*d) + position table (max_seq_len*d) + untied output "
          "projection (d*V); every sub-layer includes its layer-norm gain and bias; activated MoE "
          "parameters count the router plus min(2, E) experts for top2 and capacity_factor experts "
          "for expert_choice; FLOPs count matmuls only at 2 per multiply-add, train step = 3x "
          "forward"}};
  json rows = json::array();
  for (const ReferenceRow* r : references) {
    auto pct = [](double ours, double ref) { return 100.0 * (ours - ref) / ref; };
    rows.push_back(
        {{"reference", r->name},
         {"label", r->label},
         {"reference_n_params", r->reference_n_params},
         {"reference_n_act_params", r->reference_n_act_params},
         {"n_params", pc.n_params},
         {"n_act_params", pc.n_act_params},
         {"deviation_pct",
          {{"n_params", pct(static_cast<double>(pc.n_params), r->reference_n_params)},
           {"n_act_params", pct(static_cast<double>(pc.n_act_params), r->reference_n_act_params)},
           {"n_params_no_embed", pct(static_cast<double>(pc.n_params_no_embed), r->reference_n_params)},
           {"n_act_params_no_embed",
            pct(static_cast<double>(pc.n_act_params_no_embed), r->reference_n_act_params)}}}});
  }
  j["comparisons"] = rows;
  return j;
}

// ---- plumbing ---------------------------------------------------------------

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path + ": cannot open for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest initialisation failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

namespace {

std::shared_ptr<spdlog::logger> logger() {
  if (auto l = spdlog::get("brainformer")) return l;
  auto l = spdlog::stderr_color_mt("brainformer");
  l->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  return l;
}

void configure_logging() {
  auto log = logger();
  const char* env = std::getenv("BRAINFORMER_LOG_LEVEL");
  const std::string level = env != nullptr ? env : "info";
  if (level == "error") {
    log->set_level(spdlog::level::err);
  } else if (level == "warn") {
    log->set_level(spdlog::level::warn);
  } else if (level == "info") {
    log->set_level(spdlog::level::info);
  } else if (level == "debug") {
    log->set_level(spdlog::level::debug);
  } else {
    log->set_level(spdlog::level::info);
    log->warn("BRAINFORMER_LOG_LEVEL='{}' not one of error, warn, info, debug; using info", level);
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw Error(path.string() + ": write failed");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Collects artifacts and writes manifest.json exactly once.
class Manifest {
 public:
  Manifest(std::string command, fs::path out_dir, std::vector<std::string> argv)
      : command_(std::move(command)), out_dir_(std::move(out_dir)), argv_(std::move(argv)),
        started_(utc_now()) {}

  void set(const std::string& key, json value) { extra_[key] = std::move(value); }
  void artifact(const fs::path& path) { artifacts_.push_back(path); }

  void write(int exit_code, const std::string& error) {
    json artifacts = json::array();
    for (const fs::path& p : artifacts_) {
      if (!fs::exists(p)) continue;
      artifacts.push_back({{"path", fs::relative(p, out_dir_).generic_string()},
                           {"bytes", fs::file_size(p)},
                           {"sha256", sha256_file(p.string())}});
    }
    json j{{"schema_version", 1},
           {"command", command_},
           {"argv", argv_},
           {"output_dir", out_dir_.string()},
           {"started_at", started_},
           {"finished_at", utc_now()},
           {"exit_code", exit_code},
           {"artifacts", artifacts}};
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    if (!error.empty()) j["error"] = error;
    write_json(out_dir_ / "manifest.json", j);
  }

 private:
  std::string command_;
  fs::path out_dir_;
  std::vector<std::string> argv_;
  std::string started_;
  json extra_ = json::object();
  std::vector<fs::path> artifacts_;
};

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr || dynamic_cast<const UsageError*>(&e) != nullptr ||
      dynamic_cast<const InputError*>(&e) != nullptr || dynamic_cast<const json::exception*>(&e) != nullptr) {
    return kExitUsage;
  }
  return kExitRuntime;
}

/// Runs `body` with a manifest that is written whatever the outcome.
template <typename Body>
int with_manifest(const std::string& command, const std::string& out,
                  const std::vector<std::string>& argv, Body body) {
  auto log = logger();
  const fs::path out_dir(out);
  try {
    fs::create_directories(out_dir);
  } catch (const fs::filesystem_error& e) {
    log->error("--out {}: {}", out, e.what());
    return kExitUsage;
  }
  Manifest manifest(command, out_dir, argv);
  int code = kExitOk;
  std::string error;
  try {
    code = body(manifest);
  } catch (const std::exception& e) {
    code = exit_code_for(e);
    error = e.what();
    log->error("{}", error);
  }
  try {
    manifest.write(code, error);
  } catch (const std::exception& e) {
    log->error("manifest: {}", e.what());
    if (code == kExitOk) code = kExitRuntime;
  }
  return code;
}

std::string config_dir(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  return parent.empty() ? std::string(".") : parent.string();
}

// ---- search -----------------------------------------------------------------

struct SearchOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string budget_mode;
  bool resume = false;
};

int cmd_search(const SearchOptions& o, Manifest& manifest) {
  auto log = logger();
  SearchConfig sc = search_config_from_json(read_json_file(o.config), config_dir(o.config));
  if (o.seed) sc.evolution.seed = *o.seed;
  if (o.workers) {
    sc.evolution.workers = *o.workers;
    sc.evolution.validate();
  }
  if (!o.budget_mode.empty()) select_budget_mode(sc, o.budget_mode);
  manifest.set("config_path", o.config);
  manifest.set("seed", sc.evolution.seed);

  std::optional<Corpus> corpus;
  std::unique_ptr<TrialBackend> backend;
  int seq_len = sc.surrogate.seq_len;
  if (sc.backend == SearchConfig::Backend::Proxy) {
    corpus = Corpus::from_file(sc.corpus_path, sc.valid_fraction);
    backend = std::make_unique<ProxyBackend>(*corpus, sc.train);
    seq_len = sc.train.seq_len;
  } else {
    backend = std::make_unique<SurrogateBackend>(sc.surrogate);
  }

  const fs::path out(o.out);
  const BlockSpec baseline_genome = sc.baseline.value_or(glam_baseline_block(sc.space));
  TrialRecord baseline_record;
  log->info("training baseline");
  const Baseline baseline =
      measure_baseline(baseline_genome, *backend, sc.trial, sc.evolution.seed, &baseline_record);
  write_json(out / "baseline.json", {{"step_time", baseline.step_time},
                                     {"check_perplexity", baseline.check_perplexity},
                                     {"check_fraction", sc.trial.check_fraction},
                                     {"record", to_json(baseline_record)}});
  manifest.artifact(out / "baseline.json");
  log->info("baseline step_time={} check_perplexity={}", baseline.step_time,
            baseline.check_perplexity);

  const fs::path ledger_path = out / "ledger.jsonl";
  std::vector<TrialRecord> recorded;
  if (o.resume) {
    truncate_torn_tail(ledger_path.string());
    LedgerContents prior = read_ledger(ledger_path.string());
    if (prior.corrupt_lines > 0) {
      throw ConfigError(ledger_path.string() + ": " + std::to_string(prior.corrupt_lines) +
                        " corrupt line(s); cannot resume");
    }
    recorded = std::move(prior.records);
    log->info("resuming from {} recorded trial(s)", recorded.size());
  } else if (fs::exists(ledger_path) && fs::file_size(ledger_path) > 0) {
    throw UsageError(ledger_path.string() + " already exists; pass --resume or choose another --out");
  }
  LedgerWriter writer(ledger_path.string(), o.resume);
  manifest.artifact(ledger_path);

  const EvolutionState state =
      evolve(sc.space, sc.evolution, *backend, sc.trial, &baseline, recorded,
             [&](const TrialRecord& r) {
               writer.write(r);
               log->info("trial {} round {} reward {:.6f} ({})", r.id, r.round, r.reward,
                         to_string(r.stop_reason));
             });

  const TopKResult topk = finalize_topk(state.history, sc.top_k, sc.scale_factors,
                                        sc.stack_counts, kByteVocabSize, seq_len);
  if (topk.incomplete) {
    log->warn("only {} completed trial(s) for top-{}", topk.entries.size(), sc.top_k);
  }
  write_json(out / "topk.json", to_json(topk));
  manifest.artifact(out / "topk.json");
  std::ostringstream csv;
  write_summary_csv(csv, state.history);
  write_text(out / "summary.csv", csv.str());
  manifest.artifact(out / "summary.csv");
  manifest.set("n_trials", state.history.size());
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct TrainOptions {
  std::string genome;
  std::string corpus;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_blocks;
  std::string budget_mode;
  bool resume = false;
};

struct TrainJob {
  TrainConfig train;
  double valid_fraction = 0.1;
  int n_blocks = 1;
  std::string budget_mode = "steps";
  std::map<std::string, double> budgets;
};

TrainJob train_job_from_json(json j) {
  TrainJob job;
  if (!j.is_object()) throw ConfigError("train: expected a JSON object");
  namespace f = json_field;
  job.valid_fraction = f::get_double(j, "valid_fraction", "train", job.valid_fraction);
  job.n_blocks = f::get_int(j, "n_blocks", "train", job.n_blocks);
  job.budget_mode = f::get_string(j, "budget_mode", "train", job.budget_mode);
  if (j.contains("budgets")) {
    const json& b = f::get_object(j, "budgets", "train");
    for (const auto& item : b.items()) {
      job.budgets[item.key()] = f::get_double(b, item.key(), "train.budgets");
    }
  }
  if (j.contains("budget")) job.budgets[job.budget_mode] = f::get_double(j, "budget", "train");
  for (const char* k : {"valid_fraction", "n_blocks", "budget_mode", "budgets", "budget"}) j.erase(k);
  static const std::vector<std::string> known = {
      "base_lr", "warmup_constant_steps", "max_steps", "batch_size", "seq_len",
      "seed", "aux_coeff", "beta2", "clip_threshold", "eps1",
      "eps2", "scale_by_parameter_rms", "eval_interval", "eval_windows"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError("train." + item.key() + ": unknown field");
    }
  }
  job.train = train_config_from_json(j);
  if (job.n_blocks < 1) throw ConfigError("train.n_blocks: must be >= 1");
  return job;
}

Budget train_budget(const TrainJob& job, const std::string& mode, int steps_done) {
  if (mode == "steps") {
    const auto it = job.budgets.find("steps");
    const int total = it != job.budgets.end() ? static_cast<int>(it->second) : job.train.max_steps;
    return Budget::steps(std::max(0, total - steps_done));
  }
  if (mode != "cost" && mode != "wallclock") {
    throw ConfigError("train.budget_mode: expected steps, cost or wallclock");
  }
  const auto it = job.budgets.find(mode);
  if (it == job.budgets.end()) throw ConfigError("train.budget: no budget given for mode '" + mode + "'");
  return mode == "cost" ? Budget::cost(it->second) : Budget::seconds(it->second);
}

ModelSpec train_model_spec(const std::string& path, int n_blocks, int seq_len) {
  const json doc = read_json_file(path);
  if (doc.is_object() && doc.value("kind", "") == "block") {
    ModelSpec m;
    m.block = block_from_json(doc);
    m.n_blocks = n_blocks;
    m.vocab_size = kByteVocabSize;
    m.max_seq_len = seq_len;
    m.validate();
    return m;
  }
  return model_from_json(doc);
}

int cmd_train(const TrainOptions& o, Manifest& manifest) {
  auto log = logger();
  TrainJob job = o.config.empty() ? TrainJob{} : train_job_from_json(read_json_file(o.config));
  if (o.seed) job.train.seed = *o.seed;
  if (o.n_blocks) job.n_blocks = *o.n_blocks;
  const std::string mode = o.budget_mode.empty() ? job.budget_mode : o.budget_mode;
  manifest.set("config_path", o.config);
  manifest.set("seed", job.train.seed);

  const ModelSpec spec = train_model_spec(o.genome, job.n_blocks, job.train.seq_len);
  const Corpus corpus = Corpus::from_file(o.corpus, job.valid_fraction);
  Model model(spec, job.train.seed);
  Trainer trainer(model, corpus, job.train);

  const fs::path out(o.out);
  const std::string stem = (out / "checkpoint").string();
  const fs::path trajectory_path = out / "trajectory.jsonl";
  if (o.resume) {
    const Checkpoint ck = load_checkpoint(stem);
    if (!ck.meta.contains("model") || !(model_from_json(ck.meta.at("model")) == spec)) {
      throw ConfigError(stem + ": checkpoint was written for a different model");
    }
    trainer.restore(ck);
    log->info("resumed at step {}", trainer.steps_done());
  }
  const Budget budget = train_budget(job, mode, trainer.steps_done());

  std::ofstream trajectory(trajectory_path, o.resume ? std::ios::app : std::ios::trunc);
  if (!trajectory) throw Error(trajectory_path.string() + ": cannot open for writing");
  manifest.artifact(trajectory_path);
  const TrainResult result = train_steps(trainer, budget, [&](const StepRecord& s, const EvalRecord* e) {
    trajectory << json{{"kind", "step"},
                       {"step", s.step},
                       {"train_loss", s.train_loss},
                       {"lr", s.lr},
                       {"step_seconds", s.step_seconds},
                       {"cost_units", s.cost_units}}
                      .dump()
               << '\n';
    if (e != nullptr) {
      trajectory << json{{"kind", "eval"}, {"step", e->step}, {"val_loss", e->val_loss}, {"val_ppl", e->val_ppl}}
                        .dump()
                 << '\n';
      log->info("step {} val_ppl {:.4f}", e->step, e->val_ppl);
    }
    trajectory.flush();
  });
  trajectory.close();

  json metrics{{"steps_completed", result.steps_completed()},
               {"step", trainer.steps_done()},
               {"cost_consumed", result.cost_consumed},
               {"diverged", result.diverged}};
  if (!result.trajectory.empty()) metrics["final_train_loss"] = result.trajectory.back().train_loss;
  if (result.diverged) {
    metrics["error"] = result.error;
    write_json(out / "metrics.json", metrics);
    manifest.artifact(out / "metrics.json");
    log->error("training diverged: {}", result.error);
    return kExitRuntime;
  }

  metrics["train_perplexity"] =
      evaluate_perplexity(model, corpus.train(), job.train.seq_len, job.train.eval_windows);
  metrics["val_perplexity"] =
      corpus.valid().size() >= 2
          ? json(evaluate_perplexity(model, corpus.valid(), job.train.seq_len, job.train.eval_windows))
          : json(nullptr);
  json meta{{"step", trainer.steps_done()},
            {"model", to_json(spec)},
            {"train", to_json(job.train)},
            {"corpus", o.corpus}};
  save_checkpoint(stem, meta, trainer.snapshot());
  manifest.artifact(stem + ".bin");
  manifest.artifact(stem + ".json");
  write_json(out / "metrics.json", metrics);
  manifest.artifact(out / "metrics.json");
  log->info("trained {} step(s); train perplexity {}", result.steps_completed(),
            metrics["train_perplexity"].get<double>());
  return kExitOk;
}

// ---- count-params -----------------------------------------------------------

struct CountOptions {
  std::string genome;
  std::vector<std::string> references;
  std::string out;
  std::optional<int> n_blocks;
  std::optional<int> scale;
  std::optional<int> seq_len;
};

int cmd_count_params(const CountOptions& o, Manifest& manifest) {
  std::vector<const ReferenceRow*> refs;
  for (const std::string& name : o.references) refs.push_back(&find_reference(name));
  ModelSpec spec;
  if (!o.genome.empty()) {
    spec = load_model_spec(o.genome, o.n_blocks.value_or(1));
  } else if (!refs.empty()) {
    spec = refs.front()->spec;
  } else {
    throw UsageError("count-params: pass --genome or --reference");
  }
  if (o.n_blocks) spec.n_blocks = *o.n_blocks;
  if (o.scale) spec.block = scale_model_dim(spec.block, *o.scale);
  spec.validate();
  const int seq_len = o.seq_len.value_or(spec.max_seq_len);
  if (seq_len < 1) throw UsageError("--seq-len: must be positive");
  const json report = count_params_report(spec, seq_len, refs);
  const fs::path path = fs::path(o.out) / "params.json";
  write_json(path, report);
  manifest.artifact(path);
  std::cout << report.dump(2) << '\n';
  return kExitOk;
}

// ---- report -----------------------------------------------------------------

struct ReportOptions {
  std::string ledger;
  std::string out;
};

int cmd_report(const ReportOptions& o, Manifest& manifest) {
  auto log = logger();
  if (!fs::exists(o.ledger)) throw ConfigError(o.ledger + ": ledger not found");
  const LedgerContents ledger = read_ledger(o.ledger);
  if (ledger.corrupt_lines > 0) log->warn("{}: skipped {} corrupt line(s)", o.ledger, ledger.corrupt_lines);
  const Report rep = build_report(ledger);
  const fs::path out(o.out);
  std::ostringstream reward, lineage;
  write_reward_csv(reward, rep);
  write_lineage_csv(lineage, rep, ledger.records);
  write_text(out / "reward_over_time.csv", reward.str());
  write_text(out / "lineage.csv", lineage.str());
  write_json(out / "summary.json", to_json(rep));
  for (const char* f : {"reward_over_time.csv", "lineage.csv", "summary.json"}) manifest.artifact(out / f);
  manifest.set("ledger", o.ledger);
  return kExitOk;
}

}  // namespace

// ---- entry ------------------------------------------------------------------

int run(int argc, const char* const* argv) {
  configure_logging();
  std::vector<std::string> args(argv, argv + argc);

  CLI::App app{"Non-uniform MoE transformer blocks: search, train, count and report."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "brainformer 0.1.0");

  SearchOptions so;
  auto* search = app.add_subcommand("search", "Evolve blocks under a per-trial budget");
  search->add_option("--config", so.config, "Search config JSON")->required()->check(CLI::ExistingFile);
  search->add_option("--out", so.out, "Output directory")->required();
  search->add_option("--seed", so.seed, "Override the config seed");
  search->add_option("--workers", so.workers, "Concurrent trials")->check(CLI::PositiveNumber);
  search->add_option("--budget-mode", so.budget_mode, "Budget kind")
      ->check(CLI::IsMember({"wallclock", "cost"}));
  search->add_flag("--resume", so.resume, "Continue from the ledger in --out");

  TrainOptions to;
  auto* train = app.add_subcommand("train", "Train one genome on a byte corpus");
  train->add_option("--genome", to.genome, "Block or model JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--corpus", to.corpus, "Byte corpus file")->required()->check(CLI::ExistingFile);
  train->add_option("--config", to.config, "Training config JSON")->check(CLI::ExistingFile);
  train->add_option("--out", to.out, "Output directory")->required();
  train->add_option("--seed", to.seed, "Override the config seed");
  train->add_option("--n-blocks", to.n_blocks, "Block repetitions for a bare block")
      ->check(CLI::PositiveNumber);
  train->add_option("--budget-mode", to.budget_mode, "Budget kind")
      ->check(CLI::IsMember({"wallclock", "cost", "steps"}));
  train->add_flag("--resume", to.resume, "Continue from the checkpoint in --out");

  CountOptions co;
  auto* count = app.add_subcommand("count-params", "Parameter and FLOP accounting");
  count->add_option("--genome", co.genome, "Block or model JSON")->check(CLI::ExistingFile);
  count->add_option("--reference", co.references, "Comparison row (e.g. glam-0.1b-32e)");
  count->add_option("--out", co.out, "Output directory")->required();
  count->add_option("--n-blocks", co.n_blocks, "Override block repetitions")->check(CLI::PositiveNumber);
  count->add_option("--scale", co.scale, "Scale model width by 2 or 4")->check(CLI::IsMember({2, 4}));
  count->add_option("--seq-len", co.seq_len, "Sequence length for FLOPs")->check(CLI::PositiveNumber);

  ReportOptions ro;
  auto* report = app.add_subcommand("report", "Summarise a trial ledger");
  report->add_option("--ledger", ro.ledger, "ledger.jsonl")->required();
  report->add_option("--out", ro.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (search->parsed()) {
    return with_manifest("search", so.out, args, [&](Manifest& m) { return cmd_search(so, m); });
  }
  if (train->parsed()) {
    return with_manifest("train", to.out, args, [&](Manifest& m) { return cmd_train(to, m); });
  }
  if (count->parsed()) {
    return with_manifest("count-params", co.out, args,
                         [&](Manifest& m) { return cmd_count_params(co, m); });
  }
  return with_manifest("report", ro.out, args, [&](Manifest& m) { return cmd_report(ro, m); });
}

}  // namespace brainformer::cli
