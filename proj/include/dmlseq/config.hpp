// Copyright (c) 2026 The dmlseq Authors. All Rights Reserved.
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

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dmlseq/data.hpp"
#include "dmlseq/model.hpp"
#include "dmlseq/trainer.hpp"

namespace dmlseq {

struct DecodeConfig {
  int beam = 20;
  int max_len = 0;  // 0: derived from the input length
};

/// One row of a comparison grid.
struct GridRow {
  std::string name;
  std::string setup = "large";  // "large" or "compact"
  bool label_smoothing = false;
  bool scheduled_sampling = false;
  bool spec_augment = false;
  ObjectiveMode mode = ObjectiveMode::kIndependent;
};

struct CompareConfig {
  std::vector<GridRow> rows;
  std::vector<std::uint64_t> seeds{1};
  int test_splits = 3;
  ModelConfig large;    // vocab/feature sizes follow the task
  ModelConfig compact;
  int cohort_size = 4;  // students per mutual-learning or distillation cohort
};

/// Everything a command needs; serialized next to its outputs.
struct RunConfig {
  SyntheticTaskConfig task;
  std::string data_dir;  // corpus files; empty generates the task in memory
  std::vector<StudentConfig> students;
  ObjectiveConfig objective;
  TrainerConfig trainer;
  DecodeConfig decode;
  CompareConfig compare;
  std::string output_dir = "runs/default";

  void validate() const;
};

/// The sixteen-row grid: five technique settings with and without mutual
/// learning for the large setup, and two settings under independent,
/// distillation and mutual training for the compact setup.
std::vector<GridRow> table1_rows();

/// Parses a configuration document. Unknown keys throw ConfigError.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical, fully expanded JSON; parse_run_config(to_json(c)) == c.
std::string to_json(const RunConfig& config);

/// Applies `dotted.key=value` edits to a JSON document before parsing.
/// Array elements are addressed by index (students.1.seed=7). The value is
/// read as JSON when it parses, otherwise as a string.
std::string apply_overrides(std::string_view json_text, const std::vector<std::string>& edits);

std::string mode_name(ObjectiveMode mode);
ObjectiveMode parse_mode(std::string_view name);

}  // namespace dmlseq
