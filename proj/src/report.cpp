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

#include "brainformer/report.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_map>

namespace brainformer {

using nlohmann::json;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

const TrialRecord* find_trial(const std::vector<TrialRecord>& history, int id) {
  for (const TrialRecord& r : history) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

}  // namespace

std::vector<int> lineage_of(const std::vector<TrialRecord>& history, int id) {
  std::unordered_map<int, int> parent;
  for (const TrialRecord& r : history) parent.emplace(r.id, r.parent_id);
  std::vector<int> out;
  std::set<int> seen;
  for (int cur = id; parent.count(cur) != 0 && seen.insert(cur).second; cur = parent[cur]) {
    out.push_back(cur);
  }
  return out;
}

std::optional<int> best_completed(const std::vector<TrialRecord>& history) {
  const TrialRecord* best = nullptr;
  for (const TrialRecord& r : history) {
    if (r.stop_reason != StopReason::Completed) continue;
    if (best == nullptr || r.reward > best->reward || (r.reward == best->reward && r.id < best->id)) {
      best = &r;
    }
  }
  if (best == nullptr) return std::nullopt;
  return best->id;
}

Report build_report(const LedgerContents& ledger) {
  Report rep;
  rep.corrupt_lines = ledger.corrupt_lines;
  for (StopReason s : {StopReason::Completed, StopReason::StepTimeViolation,
                       StopReason::PerplexityViolation, StopReason::Diverged, StopReason::NoSteps}) {
    rep.stop_reasons[std::string(to_string(s))] = 0;
  }
  double best = -std::numeric_limits<double>::infinity();
  for (const TrialRecord& r : ledger.records) {
    best = std::max(best, r.reward);
    rep.rows.push_back({r.id, r.round, r.parent_id, r.reward, best, r.stop_reason, r.step_time,
                        r.final_val_loss});
    ++rep.stop_reasons[std::string(to_string(r.stop_reason))];
    if (r.stop_reason == StopReason::Completed) ++rep.completed;
  }
  rep.best_trial = best_completed(ledger.records);
  if (rep.best_trial) {
    rep.best_reward = find_trial(ledger.records, *rep.best_trial)->reward;
    rep.lineage = lineage_of(ledger.records, *rep.best_trial);
  }
  return rep;
}

json to_json(const Report& r) {
  json j{{"n_trials", r.rows.size()},
         {"completed", r.completed},
         {"corrupt_lines", r.corrupt_lines},
         {"stop_reasons", r.stop_reasons},
         {"lineage", r.lineage}};
  j["best_trial"] = r.best_trial ? json(*r.best_trial) : json(nullptr);
  j["best_reward"] = r.best_reward ? json(*r.best_reward) : json(nullptr);
  return j;
}

void write_reward_csv(std::ostream& out, const Report& r) {
  out << "trial_id,round,parent_id,reward,best_reward,stop_reason,step_time,final_val_loss\n";
  for (const ReportRow& row : r.rows) {
    out << row.trial_id << ',' << row.round << ',' << row.parent_id << ','
        << format_double(row.reward) << ',' << format_double(row.best_reward) << ','
        << to_string(row.stop_reason) << ',' << format_double(row.step_time) << ','
        << optional_cell(row.final_val_loss) << '\n';
  }
}

void write_lineage_csv(std::ostream& out, const Report& r, const std::vector<TrialRecord>& history) {
  out << "step,trial_id,parent_id,reward,step_time,final_val_loss,stop_reason\n";
  int step = 0;
  for (int id : r.lineage) {
    const TrialRecord* t = find_trial(history, id);
    if (t == nullptr) continue;
    out << step++ << ',' << t->id << ',' << t->parent_id << ',' << format_double(t->reward) << ','
        << format_double(t->step_time) << ',' << optional_cell(t->final_val_loss) << ','
        << to_string(t->stop_reason) << '\n';
  }
}

void write_summary_csv(std::ostream& out, const std::vector<TrialRecord>& history) {
  out << "trial_id,reward,step_time,final_val_loss,stop_reason\n";
  for (const TrialRecord& t : history) {
    out << t.id << ',' << format_double(t.reward) << ',' << format_double(t.step_time) << ','
        << optional_cell(t.final_val_loss) << ',' << to_string(t.stop_reason) << '\n';
  }
}

}  // namespace brainformer
