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
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dmlseq/augment.hpp"
#include "dmlseq/data.hpp"
#include "dmlseq/model.hpp"
#include "dmlseq/objectives.hpp"

namespace dmlseq {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

/// First/second moment estimates for one model.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(const ModelParams& params);

  std::int64_t steps() const noexcept { return steps_; }

  /// Bias-corrected Adam update from the parameters' grad buffers, which are
  /// zeroed afterwards. Throws NumericError (without updating) on a
  /// non-finite gradient.
  void step(ModelParams& params, double lr, const AdamConfig& cfg);

  friend bool operator==(const AdamState&, const AdamState&) = default;

 private:
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::int64_t steps_ = 0;
};

/// Warmup then inverse-square-root decay:
/// factor * model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5). step >= 1.
double learning_rate(std::int64_t step, int model_dim, int warmup_steps, double factor = 1.0);

/// Rescales gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(ModelParams& params, double max_norm);

enum class ObjectiveMode { kIndependent, kMutual, kDistill };

/// Which objective each student optimizes.
struct ObjectiveConfig {
  ObjectiveMode mode = ObjectiveMode::kMutual;
  double lambda = 0.4;
  bool label_smoothing = false;
  double alpha = 0.1;
  bool scheduled_sampling = false;
  SamplingSchedule sampling;
  bool spec_augment = false;
  SpecAugmentConfig spec;
  std::string kd_teacher;  // checkpoint path, used by the CLI
  double kd_weight = 0.4;

  void validate(std::size_t students) const;
  /// Technique settings in force during `epoch`.
  TechniqueSettings settings_for_epoch(int epoch) const;
  /// Interpolation weight of the mimicry term for this mode.
  double mimicry_weight() const noexcept;
};

struct StudentConfig {
  ModelConfig model;
  std::uint64_t seed = 0;       // drives S_k, G_k and dropout
  std::uint64_t init_seed = 0;  // parameter initialization
};

enum class SelectionMode { kBest, kCompact };

struct TrainerConfig {
  int batch_size = 32;
  int max_epochs = 100;
  int warmup_steps = 4000;
  double lr_factor = 1.0;
  int patience = 5;
  double grad_clip = 5.0;
  AdamConfig adam;
  std::uint64_t seed = 1;
  int workers = 1;
  bool sequential_updates = false;  // experiment: peers refreshed after each update
  SelectionMode selection = SelectionMode::kBest;
  int compact_student = -1;  // -1: the unique smallest student
  std::int64_t max_steps = 0;  // 0: unlimited
  bool epoch_cer = true;       // greedy validation CER each epoch

  void validate() const;
};

struct Student {
  StudentConfig config;
  ModelParams params;
  AdamState optimizer;
};

std::vector<Student> make_cohort(std::span<const StudentConfig> configs);

struct StepContext {
  int epoch = 0;
  std::int64_t batch_index = 0;
  std::int64_t global_step = 1;  // 1-based, drives the learning rate
};

struct StudentStep {
  double lr = 0.0;
  double loss = 0.0;
  double truth_term = 0.0;
  double mimicry_term = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

struct StepReport {
  std::vector<StudentStep> students;
};

StreamKey stream_key(const TrainerConfig& trainer, const Student& student, const StepContext& ctx);

/// One joint mini-batch step. All forward passes finish before any loss is
/// built, and every student is updated from those snapshots. A numeric
/// failure in any student aborts the step for all of them.
StepReport cohort_step(std::vector<Student>& students, const Batch& batch,
                       const ObjectiveConfig& objective, const TrainerConfig& trainer,
                       const StepContext& ctx, const ModelParams* teacher = nullptr);

/// Plain MLE, clean inputs, teacher forcing.
struct ValidationResult {
  std::vector<double> loss;
  std::vector<double> cer;  // empty unless requested
  double mimicry = 0.0;     // mean over ordered student pairs; 0 for one student
};

ValidationResult validate_cohort(const std::vector<Student>& students, const Corpus& valid,
                                 bool with_cer, int workers);

struct EpochSummary {
  int epoch = 0;
  std::vector<double> valid_loss;
  std::vector<double> valid_cer;
  double valid_mimicry = 0.0;
};

struct TrainResult {
  std::vector<ModelParams> best_params;
  std::vector<double> best_valid_loss;
  std::vector<EpochSummary> history;
  std::size_t selected = 0;
  std::int64_t steps = 0;
  bool early_stopped = false;
};

struct TrainOutputs {
  std::ostream* metrics = nullptr;      // JSON lines
  std::ostream* log = nullptr;          // human-readable events (clipping, early stop)
  std::filesystem::path checkpoint_dir;  // empty: no files written
  std::function<void(const std::vector<Student>&, const StepReport&)> on_step;
};

std::size_t select_model(std::span<const double> valid_losses,
                         std::span<const std::size_t> parameter_counts, SelectionMode mode,
                         int compact_student);

/// Epoch loop with per-epoch validation, best-so-far checkpoints per student,
/// early stopping on the best validation loss across students, and final
/// model selection.
TrainResult train(std::span<const StudentConfig> students, const ObjectiveConfig& objective,
                  const TrainerConfig& trainer, const Corpus& train_corpus,
                  const Corpus& valid_corpus, const ModelParams* teacher = nullptr,
                  const TrainOutputs& outputs = {});

}  // namespace dmlseq
