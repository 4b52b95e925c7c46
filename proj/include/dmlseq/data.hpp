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
#include <span>
#include <string>
#include <vector>

#include "dmlseq/tensor.hpp"
#include "dmlseq/tokens.hpp"

namespace dmlseq {

/// Synthetic token-to-frames transduction task. Every token emits
/// `frames_per_token` copies of its prototype vector plus Gaussian noise.
struct SyntheticTaskConfig {
  int vocab_size = 16;
  int feature_dim = 8;
  int frames_per_token = 4;
  double noise_std = 0.5;
  int min_tokens = 3;
  int max_tokens = 8;
  int train_size = 2000;
  int valid_size = 200;
  int test_size = 200;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const SyntheticTaskConfig&, const SyntheticTaskConfig&) = default;
};

struct Utterance {
  std::vector<int> tokens;  // reference symbols, no SOS/EOS
  FeatSeq features;
};

struct Corpus {
  SyntheticTaskConfig task;
  std::string split;
  std::vector<Utterance> utterances;

  std::size_t size() const noexcept { return utterances.size(); }
  bool empty() const noexcept { return utterances.empty(); }
};

struct TaskCorpora {
  Tensor prototypes;  // [vocab x feature_dim]; special-token rows unused
  Corpus train;
  Corpus valid;
  Corpus test;
};

Tensor task_prototypes(const SyntheticTaskConfig& cfg);
TaskCorpora generate_task(const SyntheticTaskConfig& cfg);
/// `count` test splits of the same task; the first equals generate_task().test.
std::vector<Corpus> generate_test_splits(const SyntheticTaskConfig& cfg, std::size_t count);

/// One padded mini-batch. Row b of every array belongs to utterances[b].
struct Batch {
  Tensor features;                       // [B x max_frames x feature_dim]
  std::vector<std::uint8_t> frame_mask;  // [B x max_frames]
  std::vector<int> tokens;               // [B x max_tokens], PAD beyond length
  std::vector<std::uint8_t> token_mask;  // [B x max_tokens]
  std::vector<std::size_t> utterance_ids;
  std::size_t max_frames = 0;
  std::size_t max_tokens = 0;

  std::size_t size() const noexcept { return utterance_ids.size(); }
  /// The b-th utterance with padding stripped according to the masks.
  Utterance unpack(std::size_t b) const;
  std::vector<Utterance> unpack_all() const;
};

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> ids);
/// Shuffles with `shuffle_seed` and cuts consecutive batches; the last may be short.
std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size,
                                std::uint64_t shuffle_seed);

/// Per-dimension mean/variance normalization fitted on a training split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> inv_std;

  static Standardizer fit(const Corpus& train);
  void apply(Corpus& corpus) const;
};

// Corpus container; layout documented in docs/FORMATS.md.
std::vector<std::uint8_t> encode_corpus(const Corpus& corpus);
Corpus decode_corpus(std::span<const std::uint8_t> bytes);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace dmlseq
