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

// The `brainformer` command line: search, train, count-params and report.
// Every command writes manifest.json into its --out directory.

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "brainformer/genome.hpp"

namespace brainformer::cli {

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

/// Parses argv and runs one subcommand. Never throws.
int run(int argc, const char* const* argv);

/// A reference model size used as a comparison row for count-params.
struct ReferenceRow {
  std::string name;
  std::string label;
  double reference_n_params = 0.0;
  double reference_n_act_params = 0.0;
  ModelSpec spec;
};

/// Dense and GLaM-style rows at 0.1B, 1.7B and 8B activated scale.
const std::vector<ReferenceRow>& reference_rows();
/// Throws ConfigError for an unknown name.
const ReferenceRow& find_reference(std::string_view name);

/// Parameter tallies, FLOPs and any comparison rows for one model.
nlohmann::json count_params_report(const ModelSpec& model, int seq_len,
                                   const std::vector<const ReferenceRow*>& references);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);

}  // namespace brainformer::cli
