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
#include <span>
#include <string>
#include <vector>

#include "dmlseq/graph.hpp"
#include "dmlseq/tokens.hpp"

namespace dmlseq {

/// Transformer encoder-decoder hyperparameters. Defaults are the large-scale
/// setup (8 encoder / 6 decoder blocks, 256-d, 4 heads, 2048 FFN).
struct ModelConfig {
  int encoder_blocks = 8;
  int decoder_blocks = 6;
  int model_dim = 256;
  int ffn_dim = 2048;
  int num_heads = 4;
  int vocab_size = 3262;
  int feature_dim = 120;
  double dropout = 0.1;
  int max_positions = 2048;

  /// Throws ConfigError on a violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct NormParams {
  Tensor gain, bias;
};

struct EncoderBlockParams {
  AttentionParams self_attn;
  NormParams norm1;
  FeedForwardParams ffn;
  NormParams norm2;
};

struct DecoderBlockParams {
  AttentionParams self_attn;
  NormParams norm1;
  AttentionParams cross_attn;
  NormParams norm2;
  FeedForwardParams ffn;
  NormParams norm3;
};

/// Two conv(k=3) + ReLU + stride-2 max-pool stages, then a linear projection.
struct SubsamplerParams {
  Tensor conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;
};

/// Full trainable parameter set of one model.
class ModelParams {
 public:
  ModelParams() = default;

  /// Glorot-uniform weights, zero biases, unit norm gains.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  /// Visits every tensor with a stable dotted name, in a fixed order.
  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  std::size_t num_parameters() const;
  void set_requires_grad(bool on);
  void zero_grad();
  bool all_finite() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b);

  SubsamplerParams subsampler;
  std::vector<EncoderBlockParams> encoder;
  std::vector<DecoderBlockParams> decoder;
  Tensor embedding;  // [vocab x model_dim]
  Tensor out_w;      // [model_dim x vocab]
  Tensor out_b;      // [vocab]

 private:
  explicit ModelParams(const ModelConfig& config);
  ModelConfig config_;
};

/// Output length of the subsampler: two stride-2 poolings with ceil.
std::size_t subsampled_length(std::size_t frames);

/// Sinusoidal position table rows [0, length) of width `dim`.
Tensor positional_table(std::size_t length, std::size_t dim);

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
};

/// Binds a ModelParams onto a Graph and runs the forward pass.
///
/// A mutable binding differentiates into the parameters' grad buffers
/// (when requires_grad is set); a const binding is read-only.
class BoundModel {
 public:
  BoundModel(Graph& g, ModelParams& params, ForwardOptions options = {});
  BoundModel(Graph& g, const ModelParams& params, ForwardOptions options = {});

  const ModelConfig& config() const noexcept { return params_->config(); }
  Graph& graph() noexcept { return *g_; }

  /// [M x feature_dim] -> [ceil(ceil(M/2)/2) x model_dim]. Requires M >= 4.
  Var conv_subsample(const FeatSeq& x);
  /// Adds the sinusoidal table; throws CapacityError beyond max_positions.
  Var add_positional_encoding(Var h);
  /// Encoder stack. `valid` (one flag per row, may be empty) hides frames
  /// from attention.
  Var encode(Var h0, std::span<const std::uint8_t> valid = {});
  /// Subsample + positional encoding + encoder.
  Var encode_features(const FeatSeq& x);
  /// Decoder stack over `prefix` (starting with SOS) attending to `memory`.
  /// Returns [prefix.size() x vocab] logits; row n sees prefix[0..n].
  Var decode_logits(std::span<const int> prefix, Var memory,
                    std::span<const std::uint8_t> memory_valid = {});
  /// Per-position next-token distributions, softmax of decode_logits.
  Var forward_probs(const FeatSeq& x, std::span<const int> prefix);

 private:
  Var bind(const Tensor& t);
  Var attention(const AttentionParams& p, Var queries, Var keys,
                std::span<const std::uint8_t> mask);
  Var feed_forward(const FeedForwardParams& p, Var x);
  Var norm(const NormParams& p, Var x);
  Var drop(Var x);

  Graph* g_;
  const ModelParams* params_;
  ModelParams* mutable_params_;
  ForwardOptions options_;
};

/// Probabilities as plain values, computed without recording gradients.
Tensor predict_probs(const ModelParams& params, const FeatSeq& x, std::span<const int> prefix);

// Checkpoint container; layout documented in docs/FORMATS.md.
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace dmlseq
