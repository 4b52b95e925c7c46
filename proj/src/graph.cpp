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

#include "dmlseq/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dmlseq/errors.hpp"

namespace dmlseq {

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got rank " +
                         std::to_string(t.rank()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": operand shapes differ");
  }
}

std::string dims(const Tensor& t) {
  std::string s;
  for (std::size_t i = 0; i < t.rank(); ++i) {
    s += (i ? "x" : "") + std::to_string(t.shape()[i]);
  }
  return s.empty() ? "scalar" : s;
}

// C[MxN] += A[MxK] * B[KxN]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) {
        continue;
      }
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// C[MxN] += A[MxK] * B[NxK]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += arow[p] * brow[p];
      }
      c[i * n + j] += acc;
    }
  }
}

// C[MxN] += A[KxM]^T * B[KxN]
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) {
        continue;
      }
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph

Graph::Node& Graph::node(Var v) {
  if (v.id >= nodes_.size()) {
    throw ContractError("graph: variable does not belong to this graph");
  }
  return nodes_[v.id];
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) {
    throw ContractError("graph: variable does not belong to this graph");
  }
  return nodes_[v.id];
}

Var Graph::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::param(Tensor& p) {
  Node n;
  n.alias = &p;
  if (p.requires_grad()) {
    n.param = &p;
    n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::frozen(const Tensor& p) {
  Node n;
  n.alias = &p;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::emit(const char* op, Tensor value, std::initializer_list<Var> inputs,
                Backward backward) {
  return emit(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
              std::move(backward));
}

Var Graph::emit(const char* op, Tensor value, std::span<const Var> inputs, Backward backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.owned = std::move(value);
  for (Var in : inputs) {
    if (node(in).needs_grad) {
      n.needs_grad = true;
      break;
    }
  }
  if (n.needs_grad) {
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.alias ? *n.alias : n.owned;
}

bool Graph::needs_grad(Var v) const { return node(v).needs_grad; }

std::span<double> Graph::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.needs_grad) {
    return {};
  }
  if (n.grad.empty()) {
    n.grad.assign(value(v).size(), 0.0);
  }
  return n.grad;
}

std::span<const double> Graph::grad(Var v) const { return node(v).grad; }

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + dims(value(loss)));
  }
  if (!node(loss).needs_grad) {
    return;
  }
  grad_buffer(loss)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) {
      continue;
    }
    for (double d : n.grad) {
      if (!std::isfinite(d)) {
        throw NumericError("non-finite gradient during backward");
      }
    }
    if (n.backward) {
      n.backward(*this, Var{static_cast<std::uint32_t>(i)}, n.grad);
    } else if (n.param != nullptr) {
      auto dst = n.param->grad();
      for (std::size_t j = 0; j < dst.size(); ++j) {
        dst[j] += n.grad[j];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

Var matmul(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_matrix(A, "matmul");
  require_matrix(B, "matmul");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree (" + dims(A) + " * " + dims(B) + ")");
  }
  Tensor out({m, n});
  gemm_nn(A.data(), B.data(), out.data(), m, k, n);
  return g.emit("matmul", std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var, std::span<const double> dc) {
    if (auto da = g.grad_buffer(a); !da.empty()) {
      gemm_nt(dc.data(), g.value(b).data(), da.data(), m, n, k);
    }
    if (auto db = g.grad_buffer(b); !db.empty()) {
      gemm_tn(g.value(a).data(), dc.data(), db.data(), m, k, n);
    }
  });
}

Var matmul_nt(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_matrix(A, "matmul_nt");
  require_matrix(B, "matmul_nt");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  if (B.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree (" + dims(A) + " * " + dims(B) +
                         "^T)");
  }
  Tensor out({m, n});
  gemm_nt(A.data(), B.data(), out.data(), m, k, n);
  return g.emit("matmul_nt", std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var, std::span<const double> dc) {
    if (auto da = g.grad_buffer(a); !da.empty()) {
      gemm_nn(dc.data(), g.value(b).data(), da.data(), m, n, k);
    }
    if (auto db = g.grad_buffer(b); !db.empty()) {
      gemm_tn(dc.data(), g.value(a).data(), db.data(), m, n, k);
    }
  });
}

Var linear(Graph& g, Var x, Var w, Var b) {
  const Tensor& X = g.value(x);
  const Tensor& W = g.value(w);
  const Tensor& B = g.value(b);
  require_matrix(X, "linear");
  require_matrix(W, "linear");
  const std::size_t r = X.rows(), in = X.cols(), o = W.cols();
  if (W.rows() != in || B.size() != o) {
    throw DimensionError("linear: " + dims(X) + " * " + dims(W) + " + " + dims(B));
  }
  Tensor out({r, o});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy(B.data(), B.data() + o, out.data() + i * o);
  }
  gemm_nn(X.data(), W.data(), out.data(), r, in, o);
  return g.emit("linear", std::move(out), {x, w, b}, [x, w, b, r, in, o](Graph& g, Var, std::span<const double> dy) {
    if (auto dx = g.grad_buffer(x); !dx.empty()) {
      gemm_nt(dy.data(), g.value(w).data(), dx.data(), r, o, in);
    }
    if (auto dw = g.grad_buffer(w); !dw.empty()) {
      gemm_tn(g.value(x).data(), dy.data(), dw.data(), r, in, o);
    }
    if (auto db = g.grad_buffer(b); !db.empty()) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < o; ++j) {
          db[j] += dy[i * o + j];
        }
      }
    }
  });
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_same_shape(A, B, "add");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = A[i] + B[i];
  }
  return g.emit("add", std::move(out), {a, b}, [a, b](Graph& g, Var, std::span<const double> dy) {
    for (Var v : {a, b}) {
      if (auto d = g.grad_buffer(v); !d.empty()) {
        for (std::size_t i = 0; i < d.size(); ++i) {
          d[i] += dy[i];
        }
      }
    }
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_same_shape(A, B, "sub");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = A[i] - B[i];
  }
  return g.emit("sub", std::move(out), {a, b}, [a, b](Graph& g, Var, std::span<const double> dy) {
    if (auto d = g.grad_buffer(a); !d.empty()) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += dy[i];
      }
    }
    if (auto d = g.grad_buffer(b); !d.empty()) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] -= dy[i];
      }
    }
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_same_shape(A, B, "mul");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = A[i] * B[i];
  }
  return g.emit("mul", std::move(out), {a, b}, [a, b](Graph& g, Var, std::span<const double> dy) {
    if (auto d = g.grad_buffer(a); !d.empty()) {
      const Tensor& B = g.value(b);
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += dy[i] * B[i];
      }
    }
    if (auto d = g.grad_buffer(b); !d.empty()) {
      const Tensor& A = g.value(a);
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += dy[i] * A[i];
      }
    }
  });
}

Var scale(Graph& g, Var x, double s) {
  const Tensor& X = g.value(x);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = X[i] * s;
  }
  return g.emit("scale", std::move(out), {x}, [x, s](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] += dy[i] * s;
    }
  });
}

Var relu(Graph& g, Var x) {
  const Tensor& X = g.value(x);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = X[i] > 0.0 ? X[i] : 0.0;
  }
  return g.emit("relu", std::move(out), {x}, [x](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    const Tensor& X = g.value(x);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (X[i] > 0.0) {
        d[i] += dy[i];
      }
    }
  });
}

Var sum(Graph& g, Var x) {
  const Tensor& X = g.value(x);
  double acc = 0.0;
  for (double v : X.values()) {
    acc += v;
  }
  return g.emit("sum", Tensor({}, acc), {x}, [x](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    for (double& v : d) {
      v += dy[0];
    }
  });
}

namespace {

Tensor softmax_values(const Tensor& X, std::span<const std::uint8_t> mask, const char* op) {
  const std::size_t r = X.rows(), c = X.cols();
  if (c == 0 || X.size() == 0) {
    throw DimensionError(std::string(op) + ": empty last dimension");
  }
  if (!mask.empty() && mask.size() != X.size()) {
    throw DimensionError(std::string(op) + ": mask size does not match input");
  }
  Tensor out(X.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = X.data() + i * c;
    const std::uint8_t* m = mask.empty() ? nullptr : mask.data() + i * c;
    double* y = out.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (!m || m[j]) {
        mx = std::max(mx, x[j]);
      }
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      continue;  // fully masked row stays zero
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!m || m[j]) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      y[j] /= z;
    }
  }
  return out;
}

Graph::Backward softmax_backward(Var x) {
  return [x](Graph& g, Var self, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    const Tensor& Y = g.value(self);
    const std::size_t r = Y.rows(), c = Y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = Y.data() + i * c;
      const double* dyr = dy.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        dot += dyr[j] * y[j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        d[i * c + j] += y[j] * (dyr[j] - dot);
      }
    }
  };
}

}  // namespace

Var softmax_rows(Graph& g, Var x) {
  return g.emit("softmax_rows", softmax_values(g.value(x), {}, "softmax_rows"), {x},
                softmax_backward(x));
}

Var masked_softmax_rows(Graph& g, Var x, std::span<const std::uint8_t> mask) {
  return g.emit("masked_softmax_rows", softmax_values(g.value(x), mask, "masked_softmax_rows"),
                {x}, softmax_backward(x));
}

Var log_softmax_rows(Graph& g, Var x) {
  const Tensor& X = g.value(x);
  const std::size_t r = X.rows(), c = X.cols();
  if (c == 0 || X.size() == 0) {
    throw DimensionError("log_softmax_rows: empty last dimension");
  }
  Tensor out(X.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = X.data() + i * c;
    const double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      z += std::exp(xr[j] - mx);
    }
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      out.at(i, j) = xr[j] - lse;
    }
  }
  return g.emit("log_softmax_rows", std::move(out), {x}, [x](Graph& g, Var self, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    const Tensor& Y = g.value(self);
    const std::size_t r = Y.rows(), c = Y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        total += dy[i * c + j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        d[i * c + j] += dy[i * c + j] - std::exp(Y.at(i, j)) * total;
      }
    }
  });
}

Var layer_norm(Graph& g, Var x, Var gain, Var bias, double eps) {
  const Tensor& X = g.value(x);
  const Tensor& G = g.value(gain);
  const Tensor& B = g.value(bias);
  const std::size_t r = X.rows(), c = X.cols();
  if (c == 0 || G.size() != c || B.size() != c) {
    throw DimensionError("layer_norm: gain/bias must match the last dimension of " + dims(X));
  }
  if (!(eps > 0.0)) {
    throw ContractError("layer_norm: eps must be positive");
  }
  Tensor out(X.shape());
  std::vector<double> xhat(X.size());
  std::vector<double> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = X.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      mean += xr[j];
    }
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      var += (xr[j] - mean) * (xr[j] - mean);
    }
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xr[j] - mean) * rstd[i];
      out.at(i, j) = G[j] * xhat[i * c + j] + B[j];
    }
  }
  return g.emit("layer_norm", std::move(out), {x, gain, bias},
                [x, gain, bias, r, c, xhat = std::move(xhat), rstd = std::move(rstd)](
                    Graph& g, Var, std::span<const double> dy) {
                  const Tensor& G = g.value(gain);
                  if (auto dg = g.grad_buffer(gain); !dg.empty()) {
                    for (std::size_t i = 0; i < r; ++i) {
                      for (std::size_t j = 0; j < c; ++j) {
                        dg[j] += dy[i * c + j] * xhat[i * c + j];
                      }
                    }
                  }
                  if (auto db = g.grad_buffer(bias); !db.empty()) {
                    for (std::size_t i = 0; i < r; ++i) {
                      for (std::size_t j = 0; j < c; ++j) {
                        db[j] += dy[i * c + j];
                      }
                    }
                  }
                  if (auto dx = g.grad_buffer(x); !dx.empty()) {
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t i = 0; i < r; ++i) {
                      double mean_d = 0.0;
                      double mean_dx = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double dh = dy[i * c + j] * G[j];
                        mean_d += dh;
                        mean_dx += dh * xhat[i * c + j];
                      }
                      mean_d *= inv_c;
                      mean_dx *= inv_c;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double dh = dy[i * c + j] * G[j];
                        dx[i * c + j] += rstd[i] * (dh - mean_d - xhat[i * c + j] * mean_dx);
                      }
                    }
                  }
                });
}

Var dropout(Graph& g, Var x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) {
    return x;
  }
  const Tensor& X = g.value(x);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(X.size());
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    mask[i] = uniform01(rng) < rate ? 0.0 : keep_scale;
    out[i] = X[i] * mask[i];
  }
  return g.emit("dropout", std::move(out), {x}, [x, mask = std::move(mask)](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] += dy[i] * mask[i];
    }
  });
}

Var slice_cols(Graph& g, Var x, std::size_t begin, std::size_t count) {
  const Tensor& X = g.value(x);
  require_matrix(X, "slice_cols");
  const std::size_t r = X.rows(), c = X.cols();
  if (begin + count > c) {
    throw DimensionError("slice_cols: range exceeds " + std::to_string(c) + " columns");
  }
  Tensor out({r, count});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(X.data() + i * c + begin, count, out.data() + i * count);
  }
  return g.emit("slice_cols", std::move(out), {x}, [x, r, c, begin, count](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < count; ++j) {
        d[i * c + begin + j] += dy[i * count + j];
      }
    }
  });
}

Var concat_cols(Graph& g, std::span<const Var> parts) {
  if (parts.empty()) {
    throw ContractError("concat_cols: no inputs");
  }
  const std::size_t r = g.value(parts[0]).rows();
  std::size_t total = 0;
  for (Var p : parts) {
    require_matrix(g.value(p), "concat_cols");
    if (g.value(p).rows() != r) {
      throw DimensionError("concat_cols: row counts differ");
    }
    total += g.value(p).cols();
  }
  Tensor out({r, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& P = g.value(p);
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(P.data() + i * P.cols(), P.cols(), out.data() + i * total + offset);
    }
    offset += P.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.emit("concat_cols", std::move(out), std::span<const Var>(inputs), [inputs, r, total](Graph& g, Var, std::span<const double> dy) {
    std::size_t offset = 0;
    for (Var p : inputs) {
      const std::size_t pc = g.value(p).cols();
      if (auto d = g.grad_buffer(p); !d.empty()) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < pc; ++j) {
            d[i * pc + j] += dy[i * total + offset + j];
          }
        }
      }
      offset += pc;
    }
  });
}

Var gather_rows(Graph& g, Var table, std::span<const int> ids) {
  const Tensor& T = g.value(table);
  require_matrix(T, "gather_rows");
  const std::size_t v = T.rows(), c = T.cols();
  Tensor out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(v) + " rows");
    }
    std::copy_n(T.data() + static_cast<std::size_t>(ids[i]) * c, c, out.data() + i * c);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return g.emit("gather_rows", std::move(out), {table}, [table, c, idx = std::move(idx)](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = d.data() + static_cast<std::size_t>(idx[i]) * c;
      for (std::size_t j = 0; j < c; ++j) {
        dst[j] += dy[i * c + j];
      }
    }
  });
}

Var unfold_time(Graph& g, Var x, std::size_t kernel) {
  const Tensor& X = g.value(x);
  require_matrix(X, "unfold_time");
  if (kernel % 2 == 0) {
    throw ContractError("unfold_time: kernel must be odd");
  }
  const std::size_t t = X.rows(), f = X.cols();
  const std::size_t half = kernel / 2;
  Tensor out({t, kernel * f});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + k) - static_cast<std::ptrdiff_t>(half);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) {
        continue;
      }
      std::copy_n(X.data() + static_cast<std::size_t>(src) * f, f, out.data() + i * kernel * f + k * f);
    }
  }
  return g.emit("unfold_time", std::move(out), {x}, [x, t, f, kernel, half](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + k) - static_cast<std::ptrdiff_t>(half);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) {
          continue;
        }
        for (std::size_t j = 0; j < f; ++j) {
          d[static_cast<std::size_t>(src) * f + j] += dy[i * kernel * f + k * f + j];
        }
      }
    }
  });
}

Var maxpool_time(Graph& g, Var x) {
  const Tensor& X = g.value(x);
  require_matrix(X, "maxpool_time");
  const std::size_t t = X.rows(), c = X.cols();
  const std::size_t out_rows = (t + 1) / 2;
  Tensor out({out_rows, c});
  std::vector<std::uint32_t> arg(out_rows * c);
  for (std::size_t i = 0; i < out_rows; ++i) {
    const std::size_t a = 2 * i;
    const std::size_t b = std::min(2 * i + 1, t - 1);
    for (std::size_t j = 0; j < c; ++j) {
      const bool second = X.at(b, j) > X.at(a, j);
      arg[i * c + j] = static_cast<std::uint32_t>(second ? b : a);
      out.at(i, j) = second ? X.at(b, j) : X.at(a, j);
    }
  }
  return g.emit("maxpool_time", std::move(out), {x}, [x, c, arg = std::move(arg)](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(x);
    for (std::size_t i = 0; i < arg.size(); ++i) {
      d[arg[i] * c + i % c] += dy[i];
    }
  });
}

Var clamped_log(Graph& g, Var p, double floor) {
  const Tensor& P = g.value(p);
  Tensor out(P.shape());
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    if (P[i] < floor) {
      ++clamped;
      out[i] = std::log(floor);
    } else {
      out[i] = std::log(P[i]);
    }
  }
  g.note_clamped(clamped);
  return g.emit("clamped_log", std::move(out), {p}, [p, floor](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(p);
    const Tensor& P = g.value(p);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (P[i] >= floor) {
        d[i] += dy[i] / P[i];
      }
    }
  });
}

Var soft_cross_entropy(Graph& g, Var logp, const Tensor& target) {
  const Tensor& L = g.value(logp);
  if (L.size() != target.size() || L.cols() != target.cols()) {
    throw DimensionError("soft_cross_entropy: target " + dims(target) + " vs log-probs " + dims(L));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    if (target[i] != 0.0) {
      acc -= target[i] * L[i];
    }
  }
  return g.emit("soft_cross_entropy", Tensor({}, acc), {logp}, [logp, target](Graph& g, Var, std::span<const double> dy) {
    auto d = g.grad_buffer(logp);
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] -= target[i] * dy[0];
    }
  });
}

Var detach(Graph& g, Var x) { return g.constant(g.value(x)); }

}  // namespace dmlseq
