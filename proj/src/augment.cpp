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

#include "dmlseq/augment.hpp"

#include <algorithm>
#include <string>

#include "dmlseq/errors.hpp"

namespace dmlseq {

void SpecAugmentConfig::validate() const {
  if (num_freq_masks < 0 || num_time_masks < 0) {
    throw ConfigError("spec_augment: mask counts must be >= 0");
  }
  if (max_freq_width < 0 || max_time_width < 0) {
    throw ConfigError("spec_augment: mask widths must be >= 0");
  }
}

namespace {

MaskBand draw_band(int max_width, int extent, Rng& rng) {
  MaskBand band;
  band.drawn_width = static_cast<int>(uniform_int(rng, 0, max_width));
  band.width = std::min(band.drawn_width, extent);
  band.begin = static_cast<int>(uniform_int(rng, 0, extent - band.width));
  return band;
}

}  // namespace

FeatSeq spec_augment(const FeatSeq& x, const SpecAugmentConfig& cfg, Rng& rng,
                     SpecAugmentTrace* trace) {
  cfg.validate();
  FeatSeq out{x.features};
  const int frames = static_cast<int>(x.length());
  const int channels = static_cast<int>(x.dim());
  for (int m = 0; m < cfg.num_freq_masks; ++m) {
    const MaskBand band = draw_band(cfg.max_freq_width, channels, rng);
    for (int t = 0; t < frames; ++t) {
      for (int c = band.begin; c < band.begin + band.width; ++c) {
        out.features.at(static_cast<std::size_t>(t), static_cast<std::size_t>(c)) = cfg.fill_value;
      }
    }
    if (trace) {
      trace->freq.push_back(band);
    }
  }
  for (int m = 0; m < cfg.num_time_masks; ++m) {
    const MaskBand band = draw_band(cfg.max_time_width, frames, rng);
    for (int t = band.begin; t < band.begin + band.width; ++t) {
      for (int c = 0; c < channels; ++c) {
        out.features.at(static_cast<std::size_t>(t), static_cast<std::size_t>(c)) = cfg.fill_value;
      }
    }
    if (trace) {
      trace->time.push_back(band);
    }
  }
  return out;
}

void SamplingSchedule::validate() const {
  if (!(target_probability >= 0.0 && target_probability <= 1.0)) {
    throw ConfigError("scheduled sampling: target probability must lie in [0, 1]");
  }
  if (ramp_epochs < 1) {
    throw ConfigError("scheduled sampling: ramp_epochs must be >= 1");
  }
}

double sampling_probability(int epoch, const SamplingSchedule& schedule) {
  if (epoch < 0) {
    throw ContractError("sampling_probability: negative epoch");
  }
  const double ramp = static_cast<double>(epoch) / static_cast<double>(schedule.ramp_epochs);
  return schedule.target_probability * std::min(1.0, ramp);
}

std::vector<int> scheduled_sample(std::span<const int> context, std::span<const int> predictions,
                                  double p, Rng& rng) {
  if (context.empty() ||
      (predictions.size() != context.size() && predictions.size() + 1 != context.size())) {
    throw ContractError("scheduled_sample: predictions not aligned with the context (" +
                        std::to_string(predictions.size()) + " for " +
                        std::to_string(context.size()) + " positions)");
  }
  std::vector<int> out(context.begin(), context.end());
  for (std::size_t i = 1; i < out.size(); ++i) {
    const bool replace = uniform01(rng) < p;
    if (replace && predictions[i - 1] != kPad) {
      out[i] = predictions[i - 1];
    }
  }
  return out;
}

}  // namespace dmlseq
