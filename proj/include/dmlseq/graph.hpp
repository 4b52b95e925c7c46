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

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "dmlseq/rng.hpp"
#include "dmlseq/tensor.hpp"

namespace dmlseq {

/// Handle to a value recorded on a Graph.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

/// Reverse-mode autodiff tape.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and backward() is a single reverse sweep. Leaves
/// bound with param() alias an external tensor; backward() adds into that
/// tensor's grad buffer. A graph must not be shared between threads.
class Graph {
 public:
  /// Called during the reverse sweep with the gradient of the node's output.
  using Backward = std::function<void(Graph&, Var self, std::span<const double> dout)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Owned value that never receives a gradient.
  Var constant(Tensor value);
  /// Owned leaf; its gradient is readable through grad() after backward().
  Var input(Tensor value, bool requires_grad = true);
  /// Aliases `p` without copying. Gradients flow into p.grad() when
  /// p.requires_grad() is set.
  Var param(Tensor& p);
  /// Aliases `p` read-only; never differentiated.
  Var frozen(const Tensor& p);

  /// Records an operation result. Throws NumericError if `value` is not finite.
  Var emit(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var emit(const char* op, Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const;
  /// Gradient buffer of `v`, allocated on first use. Empty when `v` needs no gradient.
  std::span<double> grad_buffer(Var v);
  /// Gradient of an owned input after backward(); empty if none reached it.
  std::span<const double> grad(Var v) const;

  /// Back-propagates from a scalar. Each recorded node is visited at most
  /// once, and parameter gradients accumulate additively.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Number of probabilities raised to the log floor by clamped_log().
  std::size_t clamp_count() const noexcept { return clamp_count_; }
  void note_clamped(std::size_t n) noexcept { clamp_count_ += n; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* alias = nullptr;
    Tensor* param = nullptr;
    std::vector<double> grad;
    Backward backward;
    bool needs_grad = false;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::size_t clamp_count_ = 0;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Unless stated, operands are matrices.

Var matmul(Graph& g, Var a, Var b);
/// a * b^T.
Var matmul_nt(Graph& g, Var a, Var b);
/// x * w + b, with `b` a vector broadcast over rows.
Var linear(Graph& g, Var x, Var w, Var b);
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double s);
Var relu(Graph& g, Var x);
Var sum(Graph& g, Var x);

Var softmax_rows(Graph& g, Var x);
Var log_softmax_rows(Graph& g, Var x);
/// Softmax restricted to entries with mask != 0. Masked entries come out as
/// exactly zero; a fully masked row is all zeros.
Var masked_softmax_rows(Graph& g, Var x, std::span<const std::uint8_t> mask);

Var layer_norm(Graph& g, Var x, Var gain, Var bias, double eps);
/// Inverted dropout. Identity when !training or rate == 0.
Var dropout(Graph& g, Var x, double rate, Rng& rng, bool training);

Var slice_cols(Graph& g, Var x, std::size_t begin, std::size_t count);
Var concat_cols(Graph& g, std::span<const Var> parts);
Var gather_rows(Graph& g, Var table, std::span<const int> ids);

/// [T x F] -> [T x kernel*F]: row t holds frames t-k/2 .. t+k/2, zero-padded.
Var unfold_time(Graph& g, Var x, std::size_t kernel);
/// Stride-2 max pooling over rows with a window of 2; an odd tail row pools alone.
Var maxpool_time(Graph& g, Var x);

inline constexpr double kProbabilityFloor = 1e-12;
/// log(max(p, floor)); clamped entries get zero gradient and are counted.
Var clamped_log(Graph& g, Var p, double floor = kProbabilityFloor);
/// -sum(target .* logp) over all entries; `target` is a constant.
Var soft_cross_entropy(Graph& g, Var logp, const Tensor& target);

Var detach(Graph& g, Var x);

}  // namespace dmlseq
