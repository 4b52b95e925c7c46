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

#include "dmlseq/tensor.hpp"

namespace dmlseq {

inline constexpr int kPad = 0;
inline constexpr int kSos = 1;
inline constexpr int kEos = 2;
/// First id that denotes an output symbol.
inline constexpr int kFirstSymbol = 3;

/// Acoustic-style feature sequence: one row per frame.
struct FeatSeq {
  Tensor features;  // [M x feature_dim]

  std::size_t length() const noexcept { return features.rows(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

/// Decoder input for a reference: SOS followed by the symbols.
std::vector<int> decoder_input(std::span<const int> symbols);
/// Decoder targets for a reference: the symbols followed by EOS.
std::vector<int> decoder_targets(std::span<const int> symbols);

}  // namespace dmlseq
