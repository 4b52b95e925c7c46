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

#include "dmlseq/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dmlseq/errors.hpp"
#include "dmlseq/objectives.hpp"

namespace dmlseq {

GradcheckResult check_gradient(const std::string& name, ModelParams& params,
                               const LossBuilder& loss, const GradcheckOptions& options) {
  GradcheckResult r;
  r.objective = name;
  params.set_requires_grad(true);
  params.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  // Snapshot the analytic gradient before the probes touch anything.
  std::vector<std::vector<double>> analytic;
  params.visit([&analytic](const std::string&, const Tensor& t) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  });

  auto evaluate = [&loss]() {
    Graph g;
    return g.value(loss(g))[0];
  };

  std::size_t tensor = 0;
  params.visit([&](const std::string& pname, Tensor& t) {
    const std::vector<double>& a = analytic[tensor++];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + options.step;
      const double up = evaluate();
      t[i] = saved - options.step;
      const double down = evaluate();
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double scale = std::max({std::abs(a[i]), std::abs(numeric), options.scale_floor});
      const double rel = std::abs(a[i] - numeric) / scale;
      ++r.checked;
      if (rel > r.max_rel_error || r.worst_parameter.empty()) {
        r.max_rel_error = rel;
        r.worst_parameter = pname + "[" + std::to_string(i) + "]";
        r.analytic = a[i];
        r.numeric = numeric;
      }
    }
  });
  params.zero_grad();
  r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < options.tolerance;
  return r;
}

ModelConfig toy_model_config() {
  ModelConfig m;
  m.encoder_blocks = 1;
  m.decoder_blocks = 1;
  m.model_dim = 8;
  m.ffn_dim = 16;
  m.num_heads = 1;
  m.vocab_size = 5;
  m.feature_dim = 4;
  m.dropout = 0.1;
  m.max_positions = 64;
  return m;
}

SyntheticTaskConfig toy_task_config() {
  SyntheticTaskConfig t;
  t.vocab_size = 5;
  t.feature_dim = 4;
  t.frames_per_token = 4;
  t.noise_std = 0.5;
  t.min_tokens = 2;
  t.max_tokens = 2;
  t.train_size = 2;
  t.valid_size = 1;
  t.test_size = 1;
  return t;
}

std::vector<GradcheckResult> run_gradient_suite(const GradcheckOptions& options) {
  SyntheticTaskConfig task = toy_task_config();
  task.seed = options.seed;
  const std::vector<Utterance> batch = generate_task(task).train.utterances;
  const ModelConfig model = toy_model_config();

  ModelParams own = ModelParams::initialize(model, options.seed);
  ModelParams peer = ModelParams::initialize(model, options.seed + 1);
  ModelParams teacher = ModelParams::initialize(model, options.seed + 2);
  std::vector<ModelParams*> cohort{&own, &peer};
  const std::vector<StreamKey> keys{{options.seed, 11, 3, 0}, {options.seed, 12, 3, 0}};

  SpecAugmentConfig spec;
  spec.num_freq_masks = 1;
  spec.num_time_masks = 1;
  spec.max_freq_width = 2;
  spec.max_time_width = 3;
  const double lambda = 0.4;
  const double alpha = 0.1;
  const double p = 0.5;

  // Teacher-forced, clean predictions of `own`, rebuilt per evaluation.
  auto clean_preds = [&](Graph& g) {
    const StudentInputs in = make_student_inputs(own, batch, {}, keys[0]);
    return predict(g, own, in, keys[0], false);
  };
  const std::vector<std::vector<Tensor>> peers{clean_distributions(peer, batch)};
  const std::vector<Tensor> teacher_probs = clean_distributions(teacher, batch);

  TechniqueSettings all;
  all.alpha = alpha;
  all.sampling_probability = p;
  all.spec_augment = true;
  all.spec = spec;

  const std::vector<std::pair<std::string, LossBuilder>> objectives{
      {"mle", [&](Graph& g) { return mle_loss(g, clean_preds(g)); }},
      {"ls", [&](Graph& g) { return ls_loss(g, clean_preds(g), alpha); }},
      {"ss", [&](Graph& g) { return ss_loss(g, own, batch, p, keys[0]); }},
      {"sa", [&](Graph& g) { return sa_loss(g, own, batch, spec, keys[0]); }},
      {"dml", [&](Graph& g) { return dml_loss(g, clean_preds(g), peers, lambda).total; }},
      {"dml_ls", [&](Graph& g) { return dml_ls_loss(g, clean_preds(g), peers, lambda, alpha).total; }},
      {"dml_ss", [&](Graph& g) { return dml_ss_loss(g, 0, cohort, batch, p, keys, lambda).total; }},
      {"dml_sa", [&](Graph& g) { return dml_sa_loss(g, 0, cohort, batch, spec, keys, lambda).total; }},
      {"kd", [&](Graph& g) { return kd_loss(g, clean_preds(g), teacher_probs, lambda).total; }},
      {"combined", [&](Graph& g) { return combined_loss(g, 0, cohort, batch, all, keys, lambda).total; }},
  };

  std::vector<GradcheckResult> results;
  for (const auto& [name, build] : objectives) {
    results.push_back(check_gradient(name, own, build, options));
  }
  return results;
}

}  // namespace dmlseq
