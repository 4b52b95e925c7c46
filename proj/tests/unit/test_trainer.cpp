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

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "dmlseq/errors.hpp"
#include "dmlseq/gradcheck.hpp"
#include "dmlseq/trainer.hpp"
#include "json.hpp"

namespace dmlseq {
namespace {

using nlohmann::json;

StudentConfig toy_student(std::uint64_t seed, std::uint64_t init_seed) {
  return StudentConfig{toy_model_config(), seed, init_seed};
}

SyntheticTaskConfig toy_task() {
  SyntheticTaskConfig t = toy_task_config();
  t.vocab_size = 5;
  t.feature_dim = 4;
  t.noise_std = 0.3;
  t.min_tokens = 1;
  t.max_tokens = 3;
  t.train_size = 24;
  t.valid_size = 6;
  t.test_size = 6;
  return t;
}

TrainerConfig quick_trainer() {
  TrainerConfig t;
  t.batch_size = 4;
  t.max_epochs = 2;
  t.warmup_steps = 10;
  t.epoch_cer = false;
  return t;
}

bool same_params(const std::vector<Student>& a, const std::vector<Student>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!(a[k].params == b[k].params)) return false;
  }
  return true;
}

TEST(LearningRate, ClosedFormAndPeak) {
  EXPECT_NEAR(learning_rate(4000, 256, 4000), 9.882117688e-4, 1e-12);
  EXPECT_DOUBLE_EQ(learning_rate(4000, 256, 4000), 1.0 / std::sqrt(256.0 * 4000.0));
  for (std::int64_t s : {1, 10, 999}) {
    EXPECT_NEAR(learning_rate(2 * s, 256, 4000), 2.0 * learning_rate(s, 256, 4000), 1e-18);
  }
  EXPECT_GT(learning_rate(4000, 256, 4000), learning_rate(3999, 256, 4000));
  EXPECT_GT(learning_rate(4000, 256, 4000), learning_rate(4001, 256, 4000));
  EXPECT_DOUBLE_EQ(learning_rate(16000, 256, 4000), std::pow(256.0, -0.5) / std::sqrt(16000.0));
  EXPECT_DOUBLE_EQ(learning_rate(50, 32, 400, 2.5), 2.5 * learning_rate(50, 32, 400));
  EXPECT_THROW(learning_rate(0, 256, 4000), ContractError);
}

class AdamTest : public ::testing::Test {
 protected:
  void SetUp() override {
    params = ModelParams::initialize(toy_model_config(), 3);
    params.set_requires_grad(true);
  }
  void fill_grads(double scale) {
    Rng rng = make_rng({static_cast<std::uint64_t>(scale * 1000)});
    params.visit([&](const std::string&, Tensor& t) {
      for (double& g : t.grad()) g = scale * (2 * uniform01(rng) - 1);
    });
  }
  ModelParams params;
  AdamConfig cfg;
};

TEST_F(AdamTest, TwoStepsMatchHandRecursion) {
  const ModelParams start = params;
  std::vector<double> g1, g2;
  fill_grads(0.7);
  params.visit([&](const std::string&, const Tensor& t) { g1.insert(g1.end(), t.grad().begin(), t.grad().end()); });
  AdamState opt(params);
  opt.step(params, 1e-3, cfg);
  fill_grads(0.2);
  params.visit([&](const std::string&, const Tensor& t) { g2.insert(g2.end(), t.grad().begin(), t.grad().end()); });
  opt.step(params, 5e-4, cfg);
  EXPECT_EQ(opt.steps(), 2);

  std::vector<double> before, after;
  start.visit([&](const std::string&, const Tensor& t) { before.insert(before.end(), t.values().begin(), t.values().end()); });
  params.visit([&](const std::string&, const Tensor& t) {
    after.insert(after.end(), t.values().begin(), t.values().end());
    for (double g : t.grad()) EXPECT_EQ(g, 0.0);
  });
  for (std::size_t i = 0; i < before.size(); ++i) {
    // Step one reduces to lr * g / (|g| + eps).
    double x = before[i] - 1e-3 * g1[i] / (std::abs(g1[i]) + 1e-9);
    const double m = 0.9 * 0.1 * g1[i] + 0.1 * g2[i];
    const double v = 0.98 * 0.02 * g1[i] * g1[i] + 0.02 * g2[i] * g2[i];
    x -= 5e-4 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.98 * 0.98)) + 1e-9);
    ASSERT_NEAR(after[i], x, 1e-15);
  }
}

TEST_F(AdamTest, ZeroGradientsLeaveParametersUnchanged) {
  const ModelParams start = params;
  AdamState opt(params);
  for (int i = 0; i < 3; ++i) opt.step(params, 1e-2, cfg);
  EXPECT_TRUE(params == start);
}

TEST_F(AdamTest, NonFiniteGradientAbortsWithoutUpdate) {
  fill_grads(0.5);
  params.embedding.grad()[3] = std::numeric_limits<double>::quiet_NaN();
  const ModelParams start = params;
  AdamState opt(params);
  const AdamState opt_before = opt;
  EXPECT_THROW(opt.step(params, 1e-3, cfg), NumericError);
  EXPECT_TRUE(params == start);
  EXPECT_TRUE(opt == opt_before);
}

TEST_F(AdamTest, IdenticalRunsAreBitIdentical) {
  ModelParams other = params;
  AdamState a(params), b(other);
  for (int i = 1; i <= 4; ++i) {
    fill_grads(0.1 * i);
    std::vector<double> grads;
    params.visit([&](const std::string&, const Tensor& t) { grads.insert(grads.end(), t.grad().begin(), t.grad().end()); });
    std::size_t at = 0;
    other.visit([&](const std::string&, Tensor& t) {
      for (double& g : t.grad()) g = grads[at++];
    });
    a.step(params, 1e-3, cfg);
    b.step(other, 1e-3, cfg);
  }
  EXPECT_TRUE(params == other);
  EXPECT_TRUE(a == b);
}

TEST(ClipGradNorm, RescalesToBound) {
  ModelParams p = ModelParams::initialize(toy_model_config(), 4);
  p.set_requires_grad(true);
  double sq = 0;
  p.visit([&](const std::string&, Tensor& t) {
    for (double& g : t.grad()) g = 1.0, sq += 1.0;
  });
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 5.0), std::sqrt(sq));
  double after = 0;
  p.visit([&](const std::string&, const Tensor& t) {
    for (double g : t.grad()) after += g * g;
  });
  EXPECT_NEAR(std::sqrt(after), 5.0, 1e-12);
  EXPECT_NEAR(clip_grad_norm(p, 10.0), 5.0, 1e-12);
}

TEST(SelectModel, TieBreaksAndCompactMode) {
  const std::vector<double> losses{0.5, 0.4, 0.4};
  const std::vector<std::size_t> sizes{100, 100, 100};
  EXPECT_EQ(select_model(losses, sizes, SelectionMode::kBest, -1), 1u);
  const std::vector<double> one{0.9};
  const std::vector<std::size_t> one_size{7};
  EXPECT_EQ(select_model(one, one_size, SelectionMode::kBest, -1), 0u);
  const std::vector<double> four{0.1, 0.2, 0.3, 0.05};
  const std::vector<std::size_t> cohort{50, 400, 400, 400};
  EXPECT_EQ(select_model(four, cohort, SelectionMode::kCompact, -1), 0u);
  EXPECT_EQ(select_model(four, cohort, SelectionMode::kCompact, 2), 2u);
  EXPECT_THROW(select_model(four, cohort, SelectionMode::kCompact, 4), ConfigError);
  const std::vector<std::size_t> uniform{400, 400, 400, 400};
  EXPECT_THROW(select_model(four, uniform, SelectionMode::kCompact, -1), ConfigError);
}

class CohortStepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    corpus = generate_task(toy_task()).train;
    batches = make_batches(corpus, 4, 9);
    objective.mode = ObjectiveMode::kMutual;
    objective.label_smoothing = true;
    objective.scheduled_sampling = true;
    objective.sampling = {0.5, 1};
    objective.spec_augment = true;
    objective.spec = {1, 1, 2, 3, 0.0};
  }
  void run(std::vector<Student>& cohort, int steps) const {
    for (int s = 0; s < steps; ++s) {
      const StepContext ctx{1 + s / 6, s % 6, s + 1};
      cohort_step(cohort, batches[static_cast<std::size_t>(s) % batches.size()], objective, trainer, ctx);
    }
  }
  Corpus corpus;
  std::vector<Batch> batches;
  ObjectiveConfig objective;
  TrainerConfig trainer = quick_trainer();
};

TEST_F(CohortStepTest, IdenticalStudentsStayIdentical) {
  const std::vector<StudentConfig> cfg{toy_student(5, 5), toy_student(5, 5)};
  std::vector<Student> cohort = make_cohort(cfg);
  run(cohort, 20);
  EXPECT_TRUE(cohort[0].params == cohort[1].params);
  EXPECT_FALSE(cohort[0].params == ModelParams::initialize(toy_model_config(), 5));
}

TEST_F(CohortStepTest, ZeroLambdaPairReproducesSingleStudent) {
  objective.lambda = 0.0;
  const std::vector<StudentConfig> pair{toy_student(5, 6), toy_student(8, 9)};
  const std::vector<StudentConfig> single{toy_student(5, 6)};
  std::vector<Student> two = make_cohort(pair);
  std::vector<Student> one = make_cohort(single);
  run(two, 12);
  run(one, 12);
  EXPECT_TRUE(two[0].params == one[0].params);
  EXPECT_TRUE(two[0].optimizer == one[0].optimizer);
}

TEST_F(CohortStepTest, ReorderingStudentsDoesNotChangeUpdates) {
  const std::vector<StudentConfig> abc{toy_student(1, 11), toy_student(2, 12), toy_student(3, 13)};
  const std::vector<StudentConfig> cab{abc[2], abc[0], abc[1]};
  std::vector<Student> x = make_cohort(abc);
  std::vector<Student> y = make_cohort(cab);
  run(x, 3);
  run(y, 3);
  EXPECT_TRUE(x[0].params == y[1].params);
  EXPECT_TRUE(x[1].params == y[2].params);
  EXPECT_TRUE(x[2].params == y[0].params);
}

TEST_F(CohortStepTest, SequentialUpdatesDiffer) {
  const std::vector<StudentConfig> cfg{toy_student(1, 11), toy_student(2, 12)};
  std::vector<Student> sync = make_cohort(cfg);
  std::vector<Student> seq = make_cohort(cfg);
  run(sync, 1);
  trainer.sequential_updates = true;
  run(seq, 1);
  EXPECT_TRUE(sync[0].params == seq[0].params);  // student 0 still sees the original peer
  EXPECT_FALSE(sync[1].params == seq[1].params);
}

TEST_F(CohortStepTest, WorkerCountDoesNotChangeUpdates) {
  const std::vector<StudentConfig> cfg{toy_student(1, 11), toy_student(2, 12), toy_student(3, 13)};
  std::vector<Student> a = make_cohort(cfg);
  std::vector<Student> b = make_cohort(cfg);
  run(a, 3);
  trainer.workers = 4;
  run(b, 3);
  EXPECT_TRUE(same_params(a, b));
}

TEST_F(CohortStepTest, NumericFailureAbortsEveryStudent) {
  const std::vector<StudentConfig> cfg{toy_student(1, 11), toy_student(2, 12)};
  std::vector<Student> cohort = make_cohort(cfg);
  run(cohort, 1);
  cohort[1].params.out_b[2] = std::numeric_limits<double>::infinity();
  const std::vector<Student> before = cohort;
  EXPECT_THROW(run(cohort, 1), NumericError);
  EXPECT_TRUE(cohort[0].params == before[0].params);
  EXPECT_TRUE(cohort[0].optimizer == before[0].optimizer);
}

TEST_F(CohortStepTest, ReportsTermsAndLearningRate) {
  const std::vector<StudentConfig> cfg{toy_student(1, 11), toy_student(2, 12)};
  std::vector<Student> cohort = make_cohort(cfg);
  const StepReport r = cohort_step(cohort, batches[0], objective, trainer, {0, 0, 7});
  ASSERT_EQ(r.students.size(), 2u);
  for (const StudentStep& s : r.students) {
    EXPECT_DOUBLE_EQ(s.lr, learning_rate(7, 8, 10));
    EXPECT_NEAR(s.loss, 0.6 * s.truth_term + 0.4 * s.mimicry_term, 1e-12);
    EXPECT_GT(s.grad_norm, 0.0);
  }
}

TEST(ObjectiveConfig, Validation) {
  ObjectiveConfig o;
  EXPECT_NO_THROW(o.validate(2));
  EXPECT_THROW(o.validate(1), ConfigError);  // mutual learning needs a peer
  o.lambda = 1.2;
  EXPECT_THROW(o.validate(2), ConfigError);
  o = ObjectiveConfig{};
  o.mode = ObjectiveMode::kIndependent;
  EXPECT_NO_THROW(o.validate(1));
  EXPECT_EQ(o.mimicry_weight(), 0.0);
  o.scheduled_sampling = true;
  EXPECT_EQ(o.settings_for_epoch(0).sampling_probability, 0.0);
  EXPECT_EQ(o.settings_for_epoch(40).sampling_probability, 0.3);
}

class TrainLoop : public ::testing::Test {
 protected:
  TaskCorpora task = generate_task(toy_task());
  std::vector<StudentConfig> students{toy_student(1, 1), toy_student(2, 2)};
  ObjectiveConfig objective;
  TrainerConfig trainer = quick_trainer();
};

TEST_F(TrainLoop, MetricsSchemaIsExact) {
  std::ostringstream metrics;
  trainer.epoch_cer = true;
  const TrainResult r = train(students, objective, trainer, task.train, task.valid, nullptr, {&metrics});
  std::istringstream in(metrics.str());
  std::string line;
  int step_records = 0, epoch_records = 0;
  const std::vector<std::string> step_keys{"step", "epoch", "student", "lr", "loss", "mle_term", "mimicry_term"};
  const std::vector<std::string> epoch_keys{"epoch", "student", "valid_loss", "cer_greedy"};
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    std::sort(keys.begin(), keys.end());
    if (j.contains("step")) {
      auto want = step_keys;
      std::sort(want.begin(), want.end());
      EXPECT_EQ(keys, want);
      ++step_records;
    } else {
      auto want = epoch_keys;
      std::sort(want.begin(), want.end());
      EXPECT_EQ(keys, want);
      EXPECT_TRUE(j["cer_greedy"].is_number());
      ++epoch_records;
    }
  }
  EXPECT_EQ(r.steps, 12);
  EXPECT_EQ(step_records, 2 * 12);
  EXPECT_EQ(epoch_records, 2 * 2);
}

TEST_F(TrainLoop, ZeroPatienceStopsAtFirstNonImprovingEpoch) {
  trainer.patience = 0;
  trainer.max_epochs = 40;
  trainer.warmup_steps = 1;
  trainer.lr_factor = 20.0;  // oscillates quickly
  const TrainResult r = train(students, objective, trainer, task.train, task.valid);
  double best = std::numeric_limits<double>::infinity();
  std::size_t first_stale = r.history.size();
  for (std::size_t e = 0; e < r.history.size(); ++e) {
    const double m = *std::min_element(r.history[e].valid_loss.begin(), r.history[e].valid_loss.end());
    if (m >= best) {
      first_stale = e;
      break;
    }
    best = m;
  }
  ASSERT_TRUE(r.early_stopped);
  EXPECT_EQ(first_stale, r.history.size() - 1);
}

TEST_F(TrainLoop, CheckpointsAndSelection) {
  const auto dir = std::filesystem::temp_directory_path() / "dmlseq_trainer_ckpt";
  std::filesystem::remove_all(dir);
  const TrainResult r = train(students, objective, trainer, task.train, task.valid, nullptr, {nullptr, nullptr, dir});
  EXPECT_TRUE(load_checkpoint(dir / "student_0.ckpt") == r.best_params[0]);
  EXPECT_TRUE(load_checkpoint(dir / "student_1.ckpt") == r.best_params[1]);
  std::ifstream f(dir / "selected.json");
  const json sel = json::parse(f);
  EXPECT_EQ(sel["selected"].get<std::size_t>(), r.selected);
  EXPECT_EQ(r.selected, r.best_valid_loss[0] <= r.best_valid_loss[1] ? 0u : 1u);
  std::filesystem::remove_all(dir);
}

TEST_F(TrainLoop, WorkersDoNotChangeMetrics) {
  std::ostringstream a, b;
  trainer.epoch_cer = true;
  train(students, objective, trainer, task.train, task.valid, nullptr, {&a});
  trainer.workers = 4;
  train(students, objective, trainer, task.train, task.valid, nullptr, {&b});
  EXPECT_EQ(a.str(), b.str());
}

TEST_F(TrainLoop, SingleStudentHasNoMimicry) {
  objective.mode = ObjectiveMode::kIndependent;
  const std::vector<StudentConfig> one{students[0]};
  const TrainResult r = train(one, objective, trainer, task.train, task.valid);
  for (const EpochSummary& e : r.history) EXPECT_EQ(e.valid_mimicry, 0.0);
}

TEST(TrainConvergence, NoiselessToyTaskReachesLowValidationLoss) {
  SyntheticTaskConfig task = toy_task_config();
  task.vocab_size = 6;
  task.noise_std = 0.0;
  task.min_tokens = 2;
  task.max_tokens = 4;
  task.train_size = 512;
  task.valid_size = 16;
  task.seed = 3;
  const TaskCorpora data = generate_task(task);
  std::vector<StudentConfig> students{toy_student(1, 1), toy_student(2, 2)};
  for (StudentConfig& s : students) s.model.vocab_size = 6;
  TrainerConfig trainer;
  trainer.batch_size = 8;
  trainer.max_epochs = 30;
  trainer.warmup_steps = 200;
  trainer.patience = 30;
  trainer.epoch_cer = false;
  const TrainResult r = train(students, ObjectiveConfig{}, trainer, data.train, data.valid);
  const double best = *std::min_element(r.best_valid_loss.begin(), r.best_valid_loss.end());
  EXPECT_LT(best, 0.1 * std::log(6.0));
}

}  // namespace
}  // namespace dmlseq
