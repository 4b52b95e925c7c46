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
#include <span>
#include <vector>

#include "dmlseq/augment.hpp"
#include "dmlseq/data.hpp"
#include "dmlseq/graph.hpp"
#include "dmlseq/model.hpp"

namespace dmlseq {

/// One utterance's predicted distributions, row-aligned with its targets.
/// Rows whose target is PAD are excluded from every loss.
struct Prediction {
  Var probs;                 // [rows x vocab]
  std::vector<int> targets;  // one reference token per row
};

/// A weighted objective split into its ground-truth and mimicry parts.
/// `mimicry` is invalid when the objective has no mimicry term.
struct LossTerms {
  Var total;
  Var truth;
  Var mimicry;
};

std::size_t count_targets(std::span<const Prediction> preds);

/// (1 - alpha) * one_hot(target) + alpha / vocab per row; PAD rows are zero.
Tensor smooth_truth(std::span<const int> targets, double alpha, int vocab);

/// Token-mean cross-entropy of the predictions under one-hot references.
Var mle_loss(Graph& g, std::span<const Prediction> preds);
/// Token-mean cross-entropy under label-smoothed references.
Var ls_loss(Graph& g, std::span<const Prediction> preds, double alpha);
/// Token-mean cross-entropy of `own` under the constant `peer` distributions
/// (peer[i] aligned with own[i]).
Var mimicry_loss(Graph& g, std::span<const Tensor> peer, std::span<const Prediction> own);

/// Element-wise mean of several peers' distributions. The summation order is
/// independent of the order of `peers`.
std::vector<Tensor> mean_peer_distribution(std::span<const std::vector<Tensor>> peers);

/// (1 - lambda) * truth(alpha) + lambda * mean over peers of mimicry.
/// `peers` holds the other students' detached distributions. alpha = 0 gives
/// the plain mutual-learning objective.
LossTerms mutual_loss(Graph& g, std::span<const Prediction> own,
                      std::span<const std::vector<Tensor>> peers, double lambda, double alpha);

LossTerms dml_loss(Graph& g, std::span<const Prediction> own,
                   std::span<const std::vector<Tensor>> peers, double lambda);
LossTerms dml_ls_loss(Graph& g, std::span<const Prediction> own,
                      std::span<const std::vector<Tensor>> peers, double lambda, double alpha);
/// (1 - weight) * MLE + weight * mimicry toward a frozen teacher.
LossTerms kd_loss(Graph& g, std::span<const Prediction> own, std::span<const Tensor> teacher,
                  double weight, double alpha = 0.0);

// ---------------------------------------------------------------------------
// Stochastic student inputs: the sampled contexts S_k(W) and deformed inputs G_k(X).

/// Technique settings shared by all students for one step.
struct TechniqueSettings {
  double alpha = 0.0;                 // label smoothing weight; 0 disables
  double sampling_probability = 0.0;  // scheduled sampling; 0 is pure teacher forcing
  bool spec_augment = false;
  SpecAugmentConfig spec;

  void validate() const;
};

/// Identifies the random streams of one student in one step. Per-utterance
/// generators are derived from (global, student, epoch, batch, utterance, stream).
struct StreamKey {
  std::uint64_t global_seed = 0;
  std::uint64_t student_seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;

  Rng rng(std::size_t utterance, Stream stream) const;
};

struct StudentInputs {
  std::vector<FeatSeq> features;           // G_k(X), or X
  std::vector<std::vector<int>> contexts;  // S_k(SOS + W), or SOS + W
  std::vector<std::vector<int>> targets;   // W + EOS
};

/// Most probable non-special token per row (EOS allowed).
std::vector<int> argmax_symbols(const Tensor& probs);

/// Draws G_k and S_k for every utterance. The sampled tokens come from a
/// teacher-forced, dropout-free pass of `params` over the deformed input.
StudentInputs make_student_inputs(const ModelParams& params, std::span<const Utterance> batch,
                                  const TechniqueSettings& settings, const StreamKey& key);

/// Forward pass for every utterance; dropout draws from the key's streams.
std::vector<Prediction> predict(Graph& g, ModelParams& params, const StudentInputs& inputs,
                                const StreamKey& key, bool training);
std::vector<Prediction> predict(Graph& g, const ModelParams& params, const StudentInputs& inputs,
                                const StreamKey& key, bool training);

/// Detached copies of the predicted distributions.
std::vector<Tensor> snapshot(const Graph& g, std::span<const Prediction> preds);

/// Teacher-forced, augmentation-free probabilities for each utterance.
std::vector<Tensor> clean_distributions(const ModelParams& params, std::span<const Utterance> batch);

// ---------------------------------------------------------------------------
// Model-level objectives. These run without dropout.

/// MLE with decoder contexts drawn by scheduled sampling with probability p.
Var ss_loss(Graph& g, ModelParams& params, std::span<const Utterance> batch, double p,
            const StreamKey& key);
/// MLE on SpecAugment-deformed features.
Var sa_loss(Graph& g, ModelParams& params, std::span<const Utterance> batch,
            const SpecAugmentConfig& spec, const StreamKey& key);

/// Objective of student k in a cohort where every student i draws its own
/// contexts and deformations from keys[i] and peers are detached. With all
/// techniques switched off this is exactly dml_loss.
LossTerms combined_loss(Graph& g, std::size_t k, std::span<ModelParams* const> cohort,
                        std::span<const Utterance> batch, const TechniqueSettings& settings,
                        std::span<const StreamKey> keys, double lambda);
LossTerms dml_ss_loss(Graph& g, std::size_t k, std::span<ModelParams* const> cohort,
                      std::span<const Utterance> batch, double p, std::span<const StreamKey> keys,
                      double lambda);
LossTerms dml_sa_loss(Graph& g, std::size_t k, std::span<ModelParams* const> cohort,
                      std::span<const Utterance> batch, const SpecAugmentConfig& spec,
                      std::span<const StreamKey> keys, double lambda);

}  // namespace dmlseq
