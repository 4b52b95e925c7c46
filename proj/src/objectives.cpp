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

#include "dmlseq/objectives.hpp"

#include <algorithm>
#include <string>

#include "dmlseq/errors.hpp"

namespace dmlseq {

std::size_t count_targets(std::span<const Prediction> preds) {
  std::size_t n = 0;
  for (const Prediction& p : preds) {
    n += static_cast<std::size_t>(std::count_if(p.targets.begin(), p.targets.end(),
                                                [](int t) { return t != kPad; }));
  }
  return n;
}

Tensor smooth_truth(std::span<const int> targets, double alpha, int vocab) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("label smoothing: alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  const auto v = static_cast<std::size_t>(vocab);
  Tensor out({targets.size(), v});
  const double floor = alpha / static_cast<double>(vocab);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == kPad) {
      continue;
    }
    if (targets[r] < 0 || targets[r] >= vocab) {
      throw ContractError("smooth_truth: target id out of range");
    }
    for (std::size_t c = 0; c < v; ++c) {
      out.at(r, c) = floor;
    }
    out.at(r, static_cast<std::size_t>(targets[r])) = (1.0 - alpha) + floor;
  }
  return out;
}

namespace {

void check_alignment(const Graph& g, const Prediction& p) {
  if (g.value(p.probs).rows() != p.targets.size()) {
    throw DimensionError("loss: prediction has " + std::to_string(g.value(p.probs).rows()) +
                         " rows for " + std::to_string(p.targets.size()) + " targets");
  }
}

/// Sum over utterances of -sum(target .* log p), divided by the number of
/// non-PAD targets. Every objective reduces to this path.
Var token_mean_cross_entropy(Graph& g, std::span<const Prediction> preds,
                             std::span<const Tensor> targets) {
  const std::size_t count = count_targets(preds);
  if (count == 0) {
    throw ContractError("loss: no valid target positions");
  }
  Var total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    Var ce = soft_cross_entropy(g, clamped_log(g, preds[i].probs), targets[i]);
    total = total.valid() ? add(g, total, ce) : ce;
  }
  return scale(g, total, 1.0 / static_cast<double>(count));
}

/// Zeroes the rows of `dist` whose target is PAD.
Tensor mask_rows(Tensor dist, std::span<const int> targets) {
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == kPad) {
      for (double& x : dist.row(r)) {
        x = 0.0;
      }
    }
  }
  return dist;
}

Var truth_loss(Graph& g, std::span<const Prediction> preds, double alpha) {
  std::vector<Tensor> targets;
  targets.reserve(preds.size());
  for (const Prediction& p : preds) {
    check_alignment(g, p);
    targets.push_back(
        smooth_truth(p.targets, alpha, static_cast<int>(g.value(p.probs).cols())));
  }
  return token_mean_cross_entropy(g, preds, targets);
}

}  // namespace

Var mle_loss(Graph& g, std::span<const Prediction> preds) { return truth_loss(g, preds, 0.0); }

Var ls_loss(Graph& g, std::span<const Prediction> preds, double alpha) {
  return truth_loss(g, preds, alpha);
}

Var mimicry_loss(Graph& g, std::span<const Tensor> peer, std::span<const Prediction> own) {
  if (peer.size() != own.size()) {
    throw DimensionError("mimicry: peer and own cover different utterances");
  }
  std::vector<Tensor> targets;
  targets.reserve(own.size());
  for (std::size_t i = 0; i < own.size(); ++i) {
    check_alignment(g, own[i]);
    if (peer[i].shape() != g.value(own[i].probs).shape()) {
      throw DimensionError("mimicry: peer distribution shape differs from own");
    }
    targets.push_back(mask_rows(peer[i], own[i].targets));
  }
  return token_mean_cross_entropy(g, own, targets);
}

std::vector<Tensor> mean_peer_distribution(std::span<const std::vector<Tensor>> peers) {
  if (peers.empty()) {
    throw ContractError("mean_peer_distribution: no peers");
  }
  const std::size_t utts = peers.front().size();
  std::vector<Tensor> out;
  out.reserve(utts);
  std::vector<double> column(peers.size());
  const double inv = 1.0 / static_cast<double>(peers.size());
  for (std::size_t u = 0; u < utts; ++u) {
    Tensor mean(peers.front().at(u).shape());
    for (const auto& peer : peers) {
      if (peer.size() != utts || peer[u].shape() != mean.shape()) {
        throw DimensionError("mean_peer_distribution: peers disagree in shape");
      }
    }
    for (std::size_t i = 0; i < mean.size(); ++i) {
      for (std::size_t p = 0; p < peers.size(); ++p) {
        column[p] = peers[p][u][i];
      }
      std::sort(column.begin(), column.end());
      double acc = 0.0;
      for (double x : column) {
        acc += x;
      }
      mean[i] = peers.size() == 1 ? acc : acc * inv;
    }
    out.push_back(std::move(mean));
  }
  return out;
}

LossTerms mutual_loss(Graph& g, std::span<const Prediction> own,
                      std::span<const std::vector<Tensor>> peers, double lambda, double alpha) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("mutual learning: lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  if (peers.empty() && lambda > 0.0) {
    throw ConfigError("mutual learning: lambda > 0 needs at least two students");
  }
  LossTerms terms;
  terms.truth = truth_loss(g, own, alpha);
  if (lambda == 0.0) {
    terms.total = terms.truth;
    if (!peers.empty()) {
      // Reported for telemetry only; contributes nothing to the objective.
      terms.mimicry = mimicry_loss(g, mean_peer_distribution(peers), own);
    }
    return terms;
  }
  terms.mimicry = mimicry_loss(g, mean_peer_distribution(peers), own);
  terms.total = add(g, scale(g, terms.truth, 1.0 - lambda), scale(g, terms.mimicry, lambda));
  return terms;
}

LossTerms dml_loss(Graph& g, std::span<const Prediction> own,
                   std::span<const std::vector<Tensor>> peers, double lambda) {
  return mutual_loss(g, own, peers, lambda, 0.0);
}

LossTerms dml_ls_loss(Graph& g, std::span<const Prediction> own,
                      std::span<const std::vector<Tensor>> peers, double lambda, double alpha) {
  return mutual_loss(g, own, peers, lambda, alpha);
}

LossTerms kd_loss(Graph& g, std::span<const Prediction> own, std::span<const Tensor> teacher,
                  double weight, double alpha) {
  if (!(weight >= 0.0 && weight <= 1.0)) {
    throw ConfigError("distillation: weight must lie in [0, 1]");
  }
  const std::vector<Tensor> copy(teacher.begin(), teacher.end());
  return mutual_loss(g, own, std::span<const std::vector<Tensor>>(&copy, 1), weight, alpha);
}

// ---------------------------------------------------------------------------
// Student inputs

void TechniqueSettings::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("label smoothing: alpha must lie in [0, 1]");
  }
  if (!(sampling_probability >= 0.0 && sampling_probability <= 1.0)) {
    throw ConfigError("scheduled sampling: probability must lie in [0, 1]");
  }
  spec.validate();
}

Rng StreamKey::rng(std::size_t utterance, Stream stream) const {
  return make_rng({global_seed, student_seed, epoch, batch, static_cast<std::uint64_t>(utterance),
                   static_cast<std::uint64_t>(stream)});
}

std::vector<int> argmax_symbols(const Tensor& probs) {
  std::vector<int> out(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    const auto row = probs.row(r);
    int best = kEos;
    for (std::size_t c = kEos + 1; c < row.size(); ++c) {
      if (row[c] > row[static_cast<std::size_t>(best)]) {
        best = static_cast<int>(c);
      }
    }
    out[r] = best;
  }
  return out;
}

StudentInputs make_student_inputs(const ModelParams& params, std::span<const Utterance> batch,
                                  const TechniqueSettings& settings, const StreamKey& key) {
  settings.validate();
  StudentInputs in;
  in.features.reserve(batch.size());
  in.contexts.reserve(batch.size());
  in.targets.reserve(batch.size());
  const bool deform = settings.spec_augment && !settings.spec.is_identity();
  for (std::size_t u = 0; u < batch.size(); ++u) {
    if (deform) {
      Rng rng = key.rng(u, Stream::kSpecAugment);
      in.features.push_back(spec_augment(batch[u].features, settings.spec, rng));
    } else {
      in.features.push_back(batch[u].features);
    }
    std::vector<int> context = decoder_input(batch[u].tokens);
    if (settings.sampling_probability > 0.0) {
      const Tensor probs = predict_probs(params, in.features.back(), context);
      Rng rng = key.rng(u, Stream::kSampling);
      context = scheduled_sample(context, argmax_symbols(probs), settings.sampling_probability, rng);
    }
    in.contexts.push_back(std::move(context));
    in.targets.push_back(decoder_targets(batch[u].tokens));
  }
  return in;
}

namespace {

template <class Params>
std::vector<Prediction> predict_impl(Graph& g, Params& params, const StudentInputs& inputs,
                                     const StreamKey& key, bool training) {
  std::vector<Prediction> preds;
  preds.reserve(inputs.features.size());
  for (std::size_t u = 0; u < inputs.features.size(); ++u) {
    Rng rng = key.rng(u, Stream::kDropout);
    BoundModel model(g, params, ForwardOptions{training, &rng});
    preds.push_back({model.forward_probs(inputs.features[u], inputs.contexts[u]), inputs.targets[u]});
  }
  return preds;
}

}  // namespace

std::vector<Prediction> predict(Graph& g, ModelParams& params, const StudentInputs& inputs,
                                const StreamKey& key, bool training) {
  return predict_impl(g, params, inputs, key, training);
}

std::vector<Prediction> predict(Graph& g, const ModelParams& params, const StudentInputs& inputs,
                                const StreamKey& key, bool training) {
  return predict_impl(g, params, inputs, key, training);
}

std::vector<Tensor> snapshot(const Graph& g, std::span<const Prediction> preds) {
  std::vector<Tensor> out;
  out.reserve(preds.size());
  for (const Prediction& p : preds) {
    out.push_back(g.value(p.probs));
  }
  return out;
}

std::vector<Tensor> clean_distributions(const ModelParams& params, std::span<const Utterance> batch) {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  for (const Utterance& u : batch) {
    out.push_back(predict_probs(params, u.features, decoder_input(u.tokens)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model-level objectives

Var ss_loss(Graph& g, ModelParams& params, std::span<const Utterance> batch, double p,
            const StreamKey& key) {
  TechniqueSettings settings;
  settings.sampling_probability = p;
  const StudentInputs in = make_student_inputs(params, batch, settings, key);
  return mle_loss(g, predict(g, params, in, key, false));
}

Var sa_loss(Graph& g, ModelParams& params, std::span<const Utterance> batch,
            const SpecAugmentConfig& spec, const StreamKey& key) {
  TechniqueSettings settings;
  settings.spec_augment = true;
  settings.spec = spec;
  const StudentInputs in = make_student_inputs(params, batch, settings, key);
  return mle_loss(g, predict(g, params, in, key, false));
}

LossTerms combined_loss(Graph& g, std::size_t k, std::span<ModelParams* const> cohort,
                        std::span<const Utterance> batch, const TechniqueSettings& settings,
                        std::span<const StreamKey> keys, double lambda) {
  if (k >= cohort.size() || keys.size() != cohort.size()) {
    throw ContractError("combined_loss: student index or key count does not match the cohort");
  }
  std::vector<std::vector<Tensor>> peers;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (i == k) {
      continue;
    }
    const ModelParams& peer = *cohort[i];
    const StudentInputs in = make_student_inputs(peer, batch, settings, keys[i]);
    Graph pg;
    peers.push_back(snapshot(pg, predict(pg, peer, in, keys[i], false)));
  }
  const StudentInputs own_in = make_student_inputs(*cohort[k], batch, settings, keys[k]);
  const std::vector<Prediction> own = predict(g, *cohort[k], own_in, keys[k], false);
  return mutual_loss(g, own, peers, lambda, settings.alpha);
}

LossTerms dml_ss_loss(Graph& g, std::size_t k, std::span<ModelParams* const> cohort,
                      std::span<const Utterance> batch, double p, std::span<const StreamKey> keys,
                      double lambda) {
  TechniqueSettings settings;
  settings.sampling_probability = p;
  return combined_loss(g, k, cohort, batch, settings, keys, lambda);
}

LossTerms dml_sa_loss(Graph& g, std::size_t k, std::span<ModelParams* const> cohort,
                      std::span<const Utterance> batch, const SpecAugmentConfig& spec,
                      std::span<const StreamKey> keys, double lambda) {
  TechniqueSettings settings;
  settings.spec_augment = true;
  settings.spec = spec;
  return combined_loss(g, k, cohort, batch, settings, keys, lambda);
}

}  // namespace dmlseq
