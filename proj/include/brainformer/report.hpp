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

// Summaries of a trial ledger: reward over time, stop-reason tally and the
// ancestry of the best trial.

#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "brainformer/search.hpp"

namespace brainformer {

/// Shortest round-trip decimal form; "nan"/"inf" for non-finite values.
std::string format_double(double v);

struct ReportRow {
  int trial_id = 0;
  int round = 0;
  int parent_id = -1;
  double reward = 0.0;
  /// Best reward over this and all earlier rows.
  double best_reward = 0.0;
  StopReason stop_reason = StopReason::Completed;
  double step_time = 0.0;
  std::optional<double> final_val_loss;
};

struct Report {
  std::vector<ReportRow> rows;
  /// Every stop reason, including those with a zero count.
  std::map<std::string, int> stop_reasons;
  int corrupt_lines = 0;
  int completed = 0;
  std::optional<int> best_trial;
  std::optional<double> best_reward;
  /// Best trial first, then its parent, up to a round-0 ancestor.
  std::vector<int> lineage;
};

/// Ancestors of `id` through parent pointers, starting with `id`. Stops at a
/// missing parent or a repeated id.
std::vector<int> lineage_of(const std::vector<TrialRecord>& history, int id);

/// The best completed trial: highest reward, ties to the earlier id.
std::optional<int> best_completed(const std::vector<TrialRecord>& history);

Report build_report(const LedgerContents& ledger);

nlohmann::json to_json(const Report& r);
/// trial_id,round,parent_id,reward,best_reward,stop_reason,step_time,final_val_loss
void write_reward_csv(std::ostream& out, const Report& r);
/// step,trial_id,parent_id,reward,step_time,final_val_loss,stop_reason
/// rows of the lineage, best trial first.
void write_lineage_csv(std::ostream& out, const Report& r, const std::vector<TrialRecord>& history);
/// trial_id,reward,step_time,final_val_loss,stop_reason
void write_summary_csv(std::ostream& out, const std::vector<TrialRecord>& history);

}  // namespace brainformer
