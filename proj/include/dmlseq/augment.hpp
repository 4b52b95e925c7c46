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

#include <span>
#include <vector>

#include "dmlseq/rng.hpp"
#include "dmlseq/tokens.hpp"

namespace dmlseq {

/// Frequency and time masking. Defaults: two masks of each kind, widths up
/// to 20 channels and 100 frames, filled with zero (features are standardized).
struct SpecAugmentConfig {
  int num_freq_masks = 2;
  int num_time_masks = 2;
  int max_freq_width = 20;
  int max_time_width = 100;
  double fill_value = 0.0;

  void validate() const;
  bool is_identity() const noexcept {
    return (num_freq_masks == 0 || max_freq_width == 0) && (num_time_masks == 0 || max_time_width == 0);
  }
};

/// A contiguous masked band [begin, begin + width).
struct MaskBand {
  int begin = 0;
  int width = 0;
  int drawn_width = 0;  // width before clipping to the extent
};

struct SpecAugmentTrace {
  std::vector<MaskBand> freq;
  std::vector<MaskBand> time;
};

/// Applies the configured masks. Cells outside every band are copied
/// unchanged. Each mask draws its own width uniformly from [0, max] and its
/// start uniformly over the positions where the clipped width fits.
FeatSeq spec_augment(const FeatSeq& x, const SpecAugmentConfig& cfg, Rng& rng,
                     SpecAugmentTrace* trace = nullptr);

/// Linear ramp of the sampling probability to `target_probability`, reached
/// at `ramp_epochs` and held afterwards.
struct SamplingSchedule {
  double target_probability = 0.3;
  int ramp_epochs = 20;

  void validate() const;
};

double sampling_probability(int epoch, const SamplingSchedule& schedule);

/// Replaces each conditioning token after position 0 with the aligned
/// prediction with probability `p`. `context` is SOS + reference symbols;
/// `predictions[i]` is the model's choice for position i + 1.
std::vector<int> scheduled_sample(std::span<const int> context, std::span<const int> predictions,
                                  double p, Rng& rng);

}  // namespace dmlseq
