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
#include <functional>
#include <string>
#include <vector>

#include "dmlseq/data.hpp"
#include "dmlseq/graph.hpp"
#include "dmlseq/model.hpp"

namespace dmlseq {

struct GradcheckOptions {
  double step = 1e-5;        // central-difference half width
  double tolerance = 1e-4;   // on the relative error below
  double scale_floor = 1e-6; // denominators smaller than this are raised to it
  std::uint64_t seed = 7;
};

struct GradcheckResult {
  std::string objective;
  double max_rel_error = 0.0;
  std::string worst_parameter;  // "name[index]"
  double analytic = 0.0;        // at the worst entry
  double numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Builds a scalar loss on a fresh graph; called once for the analytic
/// gradient and twice per checked entry.
using LossBuilder = std::function<Var(Graph&)>;

/// Compares backward() against central differences for every entry of
/// `params`. Relative error is |a - n| / max(|a|, |n|, scale_floor).
GradcheckResult check_gradient(const std::string& name, ModelParams& params,
                               const LossBuilder& loss, const GradcheckOptions& options = {});

/// The small model every objective is checked on: 8-d, one head, one
/// encoder and one decoder block, five-token vocabulary.
ModelConfig toy_model_config();
SyntheticTaskConfig toy_task_config();

/// Checks every training objective on the toy model.
std::vector<GradcheckResult> run_gradient_suite(const GradcheckOptions& options = {});

}  // namespace dmlseq
