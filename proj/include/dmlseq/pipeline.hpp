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
#include <iosfwd>
#include <span>
#include <vector>

#include "dmlseq/config.hpp"
#include "dmlseq/data.hpp"
#include "dmlseq/trainer.hpp"

namespace dmlseq {

/// Standardized corpora for one run.
struct PreparedData {
  Corpus train;
  Corpus valid;
  std::vector<Corpus> tests;
  Standardizer standardizer;
};

/// Reads corpus files from config.data_dir (train/valid/test.corpus) or
/// generates the task, then standardizes every split with statistics of the
/// training split. Extra test splits come from the task recorded in the
/// training corpus.
PreparedData prepare_data(const RunConfig& config, std::size_t test_splits = 1);

void save_standardizer(const std::filesystem::path& path, const Standardizer& s);
Standardizer load_standardizer(const std::filesystem::path& path);

/// Student seeds used by generated cohorts: distinct per index, shared by
/// every run with the same base seed.
StudentConfig seeded_student(const ModelConfig& model, std::uint64_t base_seed, std::size_t index);

/// Objective of a grid row on top of the shared hyper-parameters.
ObjectiveConfig row_objective(const ObjectiveConfig& base, const GridRow& row);

struct CompareResult {
  std::vector<GridRow> rows;
  std::vector<std::vector<double>> cer;  // [row][test split], percent, mean over seeds
};

/// Trains and evaluates every grid row for every seed. Distillation
/// teachers are the large independently trained model of the same
/// techniques and seed.
CompareResult run_compare(const RunConfig& config, const PreparedData& data,
                          std::ostream* progress = nullptr);

/// Header: row,setup,label_smoothing,scheduled_sampling,spec_augment,kd,dml,test1,...
void write_compare_csv(std::ostream& out, const CompareResult& result);

}  // namespace dmlseq
