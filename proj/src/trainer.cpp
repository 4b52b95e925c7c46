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

#include "dmlseq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>

#include "json.hpp"

#include "dmlseq/decode.hpp"
#include "dmlseq/errors.hpp"
#include "dmlseq/parallel.hpp"
#include "dmlseq/rng.hpp"

namespace dmlseq {

// ---------------------------------------------------------------------------
// Optimizer

AdamState::AdamState(const ModelParams& params) {
  params.visit([this](const std::string&, const Tensor& t) {
    first_.emplace_back(t.shape());
    second_.emplace_back(t.shape());
  });
}

void AdamState::step(ModelParams& params, double lr, const AdamConfig& cfg) {
  if (!params.all_finite()) {
    throw NumericError("adam: parameters are not finite");
  }
  bool finite = true;
  params.visit([&finite](const std::string&, const Tensor& t) {
    for (double g : t.grad()) {
      finite = finite && std::isfinite(g);
    }
  });
  if (!finite) {
    throw NumericError("adam: non-finite gradient");
  }
  if (first_.empty()) {
    *this = AdamState(params);
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps_));
  std::size_t idx = 0;
  params.visit([&](const std::string& name, Tensor& t) {
    if (idx >= first_.size() || first_[idx].shape() != t.shape()) {
      throw DimensionError("adam: state does not match parameter " + name);
    }
    Tensor& m = first_[idx];
    Tensor& v = second_[idx];
    ++idx;
    std::span<double> grad = t.grad();
    if (grad.empty()) {
      return;
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      t[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
    t.zero_grad();
  });
}

double learning_rate(std::int64_t step, int model_dim, int warmup_steps, double factor) {
  if (step < 1) {
    throw ContractError("learning_rate: step is 1-based");
  }
  if (model_dim <= 0 || warmup_steps <= 0) {
    throw ConfigError("learning_rate: model_dim and warmup_steps must be positive");
  }
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return factor / std::sqrt(static_cast<double>(model_dim)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

double clip_grad_norm(ModelParams& params, double max_norm) {
  double sq = 0.0;
  params.visit([&sq](const std::string&, const Tensor& t) {
    for (double g : t.grad()) {
      sq += g * g;
    }
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    params.visit([s](const std::string&, Tensor& t) {
      for (double& g : t.grad()) {
        g *= s;
      }
    });
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Configuration

void ObjectiveConfig::validate(std::size_t students) const {
  if (students == 0) {
    throw ConfigError("objective: at least one student is required");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("objective: lambda must lie in [0, 1]");
  }
  if (!(kd_weight >= 0.0 && kd_weight <= 1.0)) {
    throw ConfigError("objective: kd_weight must lie in [0, 1]");
  }
  if (label_smoothing && !(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("objective: alpha must lie in [0, 1]");
  }
  if (mode == ObjectiveMode::kMutual && students < 2 && lambda > 0.0) {
    throw ConfigError("objective: mutual learning with lambda > 0 needs at least two students");
  }
  if (scheduled_sampling) {
    sampling.validate();
  }
  if (spec_augment) {
    spec.validate();
  }
}

TechniqueSettings ObjectiveConfig::settings_for_epoch(int epoch) const {
  TechniqueSettings s;
  s.alpha = label_smoothing ? alpha : 0.0;
  s.sampling_probability = scheduled_sampling ? sampling_probability(epoch, sampling) : 0.0;
  s.spec_augment = spec_augment;
  s.spec = spec;
  return s;
}

double ObjectiveConfig::mimicry_weight() const noexcept {
  switch (mode) {
    case ObjectiveMode::kMutual:
      return lambda;
    case ObjectiveMode::kDistill:
      return kd_weight;
    case ObjectiveMode::kIndependent:
      break;
  }
  return 0.0;
}

void TrainerConfig::validate() const {
  if (batch_size <= 0) throw ConfigError("trainer: batch_size must be positive");
  if (max_epochs <= 0) throw ConfigError("trainer: max_epochs must be positive");
  if (warmup_steps <= 0) throw ConfigError("trainer: warmup_steps must be positive");
  if (!(lr_factor > 0.0)) throw ConfigError("trainer: lr_factor must be positive");
  if (patience < 0) throw ConfigError("trainer: patience must be non-negative");
  if (!(grad_clip >= 0.0)) throw ConfigError("trainer: grad_clip must be non-negative");
  if (workers <= 0) throw ConfigError("trainer: workers must be positive");
  if (max_steps < 0) throw ConfigError("trainer: max_steps must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
        adam.epsilon > 0.0)) {
    throw ConfigError("trainer: invalid Adam hyper-parameters");
  }
}

std::vector<Student> make_cohort(std::span<const StudentConfig> configs) {
  std::vector<Student> out;
  out.reserve(configs.size());
  for (const StudentConfig& c : configs) {
    c.model.validate();
    Student s{c, ModelParams::initialize(c.model, c.init_seed), {}};
    s.params.set_requires_grad(true);
    s.optimizer = AdamState(s.params);
    out.push_back(std::move(s));
  }
  return out;
}

StreamKey stream_key(const TrainerConfig& trainer, const Student& student, const StepContext& ctx) {
  return StreamKey{trainer.seed, student.config.seed, static_cast<std::uint64_t>(ctx.epoch),
                   static_cast<std::uint64_t>(ctx.batch_index)};
}

// ---------------------------------------------------------------------------
// One step

namespace {

struct Forward {
  Graph graph;
  StudentInputs inputs;
  std::vector<Prediction> preds;
  std::vector<Tensor> snap;
  std::vector<Tensor> teacher;
};

void run_forward(Forward& f, Student& s, const ModelParams* teacher,
                 std::span<const Utterance> utts, const TechniqueSettings& settings,
                 const StreamKey& key) {
  f.inputs = make_student_inputs(s.params, utts, settings, key);
  f.preds = predict(f.graph, s.params, f.inputs, key, true);
  f.snap = snapshot(f.graph, f.preds);
  if (teacher != nullptr) {
    Graph tg;
    f.teacher = snapshot(tg, predict(tg, *teacher, f.inputs, key, false));
  }
}

LossTerms build_loss(Forward& f, std::size_t k, std::span<const Forward> all,
                     const ObjectiveConfig& objective, double alpha) {
  switch (objective.mode) {
    case ObjectiveMode::kDistill:
      return kd_loss(f.graph, f.preds, f.teacher, objective.kd_weight, alpha);
    case ObjectiveMode::kMutual: {
      std::vector<std::vector<Tensor>> peers;
      for (std::size_t i = 0; i < all.size(); ++i) {
        if (i != k) peers.push_back(all[i].snap);
      }
      return mutual_loss(f.graph, f.preds, peers, objective.lambda, alpha);
    }
    case ObjectiveMode::kIndependent:
      break;
  }
  return mutual_loss(f.graph, f.preds, {}, 0.0, alpha);
}

StudentStep finish(Forward& f, const LossTerms& terms, double lr) {
  StudentStep out;
  out.lr = lr;
  out.loss = f.graph.value(terms.total)[0];
  out.truth_term = f.graph.value(terms.truth)[0];
  out.mimicry_term = terms.mimicry.valid() ? f.graph.value(terms.mimicry)[0] : 0.0;
  f.graph.backward(terms.total);
  return out;
}

void apply_update(Student& s, StudentStep& st, const TrainerConfig& trainer) {
  st.grad_norm = clip_grad_norm(s.params, trainer.grad_clip);
  st.clipped = trainer.grad_clip > 0.0 && st.grad_norm > trainer.grad_clip;
  s.optimizer.step(s.params, st.lr, trainer.adam);
}

StepReport sequential_step(std::vector<Student>& students, std::span<const Utterance> utts,
                           const ObjectiveConfig& objective, const TrainerConfig& trainer,
                           const StepContext& ctx, const ModelParams* teacher,
                           const TechniqueSettings& settings) {
  const std::size_t K = students.size();
  StepReport report;
  report.students.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Forward> fw(K);
    parallel_for(K, trainer.workers, [&](std::size_t i) {
      if (i == k || objective.mode == ObjectiveMode::kMutual) {
        run_forward(fw[i], students[i], i == k ? teacher : nullptr, utts, settings,
                    stream_key(trainer, students[i], ctx));
      }
    });
    const double lr = learning_rate(ctx.global_step, students[k].config.model.model_dim,
                                    trainer.warmup_steps, trainer.lr_factor);
    try {
      const LossTerms terms = build_loss(fw[k], k, fw, objective, settings.alpha);
      report.students[k] = finish(fw[k], terms, lr);
      apply_update(students[k], report.students[k], trainer);
    } catch (...) {
      students[k].params.zero_grad();
      throw;
    }
  }
  return report;
}

}  // namespace

StepReport cohort_step(std::vector<Student>& students, const Batch& batch,
                       const ObjectiveConfig& objective, const TrainerConfig& trainer,
                       const StepContext& ctx, const ModelParams* teacher) {
  const std::size_t K = students.size();
  objective.validate(K);
  if (objective.mode == ObjectiveMode::kDistill && teacher == nullptr) {
    throw ConfigError("distillation: no teacher model");
  }
  if (objective.mode != ObjectiveMode::kDistill) {
    teacher = nullptr;
  }
  const std::vector<Utterance> utts = batch.unpack_all();
  const TechniqueSettings settings = objective.settings_for_epoch(ctx.epoch);

  if (trainer.sequential_updates) {
    return sequential_step(students, utts, objective, trainer, ctx, teacher, settings);
  }

  std::vector<Forward> fw(K);
  StepReport report;
  report.students.resize(K);
  try {
    parallel_for(K, trainer.workers, [&](std::size_t k) {
      run_forward(fw[k], students[k], teacher, utts, settings,
                  stream_key(trainer, students[k], ctx));
    });
    parallel_for(K, trainer.workers, [&](std::size_t k) {
      const double lr = learning_rate(ctx.global_step, students[k].config.model.model_dim,
                                      trainer.warmup_steps, trainer.lr_factor);
      const LossTerms terms = build_loss(fw[k], k, fw, objective, settings.alpha);
      report.students[k] = finish(fw[k], terms, lr);
    });
    for (const Student& s : students) {
      bool finite = true;
      s.params.visit([&finite](const std::string&, const Tensor& t) {
        for (double g : t.grad()) finite = finite && std::isfinite(g);
      });
      if (!finite) {
        throw NumericError("cohort step: non-finite gradient");
      }
    }
  } catch (...) {
    for (Student& s : students) s.params.zero_grad();
    throw;
  }
  for (std::size_t k = 0; k < K; ++k) {
    apply_update(students[k], report.students[k], trainer);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Validation

namespace {

constexpr std::size_t kValidChunk = 32;

}  // namespace

ValidationResult validate_cohort(const std::vector<Student>& students, const Corpus& valid,
                                 bool with_cer, int workers) {
  const std::size_t K = students.size();
  if (valid.empty()) {
    throw ConfigError("validation: empty corpus");
  }
  ValidationResult out;
  out.loss.assign(K, 0.0);
  // dists[k][u]: clean distributions of student k on utterance u.
  std::vector<std::vector<Tensor>> dists(K);
  std::vector<std::vector<int>> targets;
  std::size_t tokens = 0;
  for (const Utterance& u : valid.utterances) {
    targets.push_back(decoder_targets(u.tokens));
    tokens += targets.back().size();
  }
  parallel_for(K, workers, [&](std::size_t k) {
    double sum = 0.0;
    for (std::size_t begin = 0; begin < valid.size(); begin += kValidChunk) {
      const std::size_t end = std::min(valid.size(), begin + kValidChunk);
      const std::span<const Utterance> chunk(valid.utterances.data() + begin, end - begin);
      Graph g;
      const StudentInputs in = make_student_inputs(students[k].params, chunk, {}, StreamKey{});
      const std::vector<Prediction> preds = predict(g, students[k].params, in, StreamKey{}, false);
      sum += g.value(mle_loss(g, preds))[0] * static_cast<double>(count_targets(preds));
      for (Tensor& t : snapshot(g, preds)) dists[k].push_back(std::move(t));
    }
    out.loss[k] = sum / static_cast<double>(tokens);
  });
  if (with_cer) {
    out.cer.assign(K, 0.0);
    parallel_for(K, workers, [&](std::size_t k) {
      out.cer[k] = evaluate_corpus(students[k].params, valid, 1, 1).cer();
    });
  }
  if (K > 1) {
    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < K; ++i) {
        if (i == k) continue;
        double sum = 0.0;
        for (std::size_t u = 0; u < valid.size(); ++u) {
          const Tensor& own = dists[k][u];
          const Tensor& peer = dists[i][u];
          for (std::size_t r = 0; r < own.rows(); ++r) {
            for (std::size_t c = 0; c < own.cols(); ++c) {
              const double q = peer.at(r, c);
              if (q != 0.0) {
                sum -= q * std::log(std::max(own.at(r, c), kProbabilityFloor));
              }
            }
          }
        }
        acc += sum / static_cast<double>(tokens);
      }
    }
    out.mimicry = acc / static_cast<double>(K * (K - 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

std::size_t select_model(std::span<const double> valid_losses,
                         std::span<const std::size_t> parameter_counts, SelectionMode mode,
                         int compact_student) {
  const std::size_t K = valid_losses.size();
  if (K == 0 || parameter_counts.size() != K) {
    throw ContractError("select_model: need one loss and one size per student");
  }
  if (mode == SelectionMode::kBest) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (valid_losses[k] < valid_losses[best]) best = k;
    }
    return best;
  }
  if (compact_student >= 0) {
    if (static_cast<std::size_t>(compact_student) >= K) {
      throw ConfigError("select_model: compact_student out of range");
    }
    return static_cast<std::size_t>(compact_student);
  }
  const auto smallest = std::min_element(parameter_counts.begin(), parameter_counts.end());
  if (std::count(parameter_counts.begin(), parameter_counts.end(), *smallest) != 1) {
    throw ConfigError("select_model: no unique smallest student; set compact_student");
  }
  return static_cast<std::size_t>(smallest - parameter_counts.begin());
}

namespace {

using ordered_json = nlohmann::ordered_json;


void write_step_records(std::ostream& out, std::int64_t step, int epoch, const StepReport& r) {
  for (std::size_t k = 0; k < r.students.size(); ++k) {
    const StudentStep& s = r.students[k];
    ordered_json j;
    j["step"] = step;
    j["epoch"] = epoch;
    j["student"] = k;
    j["lr"] = s.lr;
    j["loss"] = s.loss;
    j["mle_term"] = s.truth_term;
    j["mimicry_term"] = s.mimicry_term;
    out << j.dump() << '\n';
  }
}

void write_epoch_records(std::ostream& out, const EpochSummary& e) {
  for (std::size_t k = 0; k < e.valid_loss.size(); ++k) {
    ordered_json j;
    j["epoch"] = e.epoch;
    j["student"] = k;
    j["valid_loss"] = e.valid_loss[k];
    if (e.valid_cer.empty()) {
      j["cer_greedy"] = nullptr;
    } else {
      j["cer_greedy"] = e.valid_cer[k];
    }
    out << j.dump() << '\n';
  }
  out.flush();
}

std::filesystem::path student_checkpoint(const std::filesystem::path& dir, std::size_t k) {
  return dir / ("student_" + std::to_string(k) + ".ckpt");
}

}  // namespace

TrainResult train(std::span<const StudentConfig> students, const ObjectiveConfig& objective,
                  const TrainerConfig& trainer, const Corpus& train_corpus,
                  const Corpus& valid_corpus, const ModelParams* teacher,
                  const TrainOutputs& outputs) {
  trainer.validate();
  objective.validate(students.size());
  if (train_corpus.empty() || valid_corpus.empty()) {
    throw ConfigError("train: training and validation corpora must be non-empty");
  }
  std::vector<Student> cohort = make_cohort(students);
  const std::size_t K = cohort.size();
  if (!outputs.checkpoint_dir.empty()) {
    std::filesystem::create_directories(outputs.checkpoint_dir);
  }

  TrainResult result;
  result.best_valid_loss.assign(K, std::numeric_limits<double>::infinity());
  result.best_params.reserve(K);
  for (const Student& s : cohort) result.best_params.push_back(s.params);

  double best_overall = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < trainer.max_epochs; ++epoch) {
    const std::vector<Batch> batches =
        make_batches(train_corpus, static_cast<std::size_t>(trainer.batch_size),
                     derive_seed({trainer.seed, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(Stream::kShuffle)}));
    bool budget_spent = false;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ++step;
      const StepContext ctx{epoch, static_cast<std::int64_t>(b), step};
      const StepReport report = cohort_step(cohort, batches[b], objective, trainer, ctx, teacher);
      if (outputs.metrics != nullptr) write_step_records(*outputs.metrics, step, epoch, report);
      if (outputs.log != nullptr) {
        for (std::size_t k = 0; k < K; ++k) {
          if (report.students[k].clipped) {
            *outputs.log << "step " << step << " student " << k << ": gradient norm "
                         << report.students[k].grad_norm << " clipped to " << trainer.grad_clip << '\n';
          }
        }
      }
      if (outputs.on_step) outputs.on_step(cohort, report);
      if (trainer.max_steps > 0 && step >= trainer.max_steps) {
        budget_spent = true;
        break;
      }
    }

    const ValidationResult v = validate_cohort(cohort, valid_corpus, trainer.epoch_cer, trainer.workers);
    EpochSummary summary{epoch, v.loss, v.cer, v.mimicry};
    if (outputs.metrics != nullptr) write_epoch_records(*outputs.metrics, summary);
    result.history.push_back(summary);

    for (std::size_t k = 0; k < K; ++k) {
      if (v.loss[k] < result.best_valid_loss[k]) {
        result.best_valid_loss[k] = v.loss[k];
        result.best_params[k] = cohort[k].params;
        if (!outputs.checkpoint_dir.empty()) {
          save_checkpoint(student_checkpoint(outputs.checkpoint_dir, k), cohort[k].params);
        }
      }
    }
    const double epoch_best = *std::min_element(v.loss.begin(), v.loss.end());
    if (epoch_best < best_overall) {
      best_overall = epoch_best;
      stale = 0;
    } else if (++stale > trainer.patience) {
      result.early_stopped = true;
      if (outputs.log != nullptr) {
        *outputs.log << "early stop after epoch " << epoch << ": best validation loss " << best_overall
                     << '\n';
      }
      break;
    }
    if (budget_spent) break;
  }
  result.steps = step;

  std::vector<std::size_t> sizes;
  for (const Student& s : cohort) sizes.push_back(s.params.num_parameters());
  result.selected =
      select_model(result.best_valid_loss, sizes, trainer.selection, trainer.compact_student);
  for (ModelParams& p : result.best_params) p.set_requires_grad(false);

  if (!outputs.checkpoint_dir.empty()) {
    ordered_json j;
    j["selected"] = result.selected;
    j["mode"] = trainer.selection == SelectionMode::kBest ? "best" : "compact";
    j["checkpoint"] = student_checkpoint({}, result.selected).string();
    j["best_valid_loss"] = result.best_valid_loss;
    j["steps"] = result.steps;
    j["early_stopped"] = result.early_stopped;
    std::ofstream f(outputs.checkpoint_dir / "selected.json");
    if (!f) throw IoError("cannot write " + (outputs.checkpoint_dir / "selected.json").string());
    f << j.dump(2) << '\n';
  }
  return result;
}

}  // namespace dmlseq
