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

#include "dmlseq/model.hpp"

#include <cmath>
#include <fstream>
#include <unordered_map>

#include "dmlseq/binary_io.hpp"
#include "dmlseq/errors.hpp"

namespace dmlseq {

std::vector<int> decoder_input(std::span<const int> symbols) {
  std::vector<int> out;
  out.reserve(symbols.size() + 1);
  out.push_back(kSos);
  out.insert(out.end(), symbols.begin(), symbols.end());
  return out;
}

std::vector<int> decoder_targets(std::span<const int> symbols) {
  std::vector<int> out(symbols.begin(), symbols.end());
  out.push_back(kEos);
  return out;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
  if (encoder_blocks < 1 || decoder_blocks < 1) {
    fail("encoder_blocks and decoder_blocks must be >= 1");
  }
  if (model_dim < 1 || ffn_dim < 1 || feature_dim < 1 || max_positions < 1) {
    fail("dimensions must be positive");
  }
  if (num_heads < 1 || model_dim % num_heads != 0) {
    fail("model_dim (" + std::to_string(model_dim) + ") must be divisible by num_heads (" +
         std::to_string(num_heads) + ")");
  }
  if (vocab_size < 4) {
    fail("vocab_size must be >= 4 to hold PAD, SOS, EOS and one symbol");
  }
  if (!(dropout >= 0.0) || dropout >= 1.0) {
    fail("dropout must lie in [0, 1)");
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

template <class Params, class Fn>
void visit_params(Params& p, Fn&& fn) {
  auto attn = [&](const std::string& prefix, auto& a) {
    fn(prefix + ".wq", a.wq);
    fn(prefix + ".bq", a.bq);
    fn(prefix + ".wk", a.wk);
    fn(prefix + ".bk", a.bk);
    fn(prefix + ".wv", a.wv);
    fn(prefix + ".bv", a.bv);
    fn(prefix + ".wo", a.wo);
    fn(prefix + ".bo", a.bo);
  };
  auto ffn = [&](const std::string& prefix, auto& f) {
    fn(prefix + ".w1", f.w1);
    fn(prefix + ".b1", f.b1);
    fn(prefix + ".w2", f.w2);
    fn(prefix + ".b2", f.b2);
  };
  auto norm = [&](const std::string& prefix, auto& n) {
    fn(prefix + ".gain", n.gain);
    fn(prefix + ".bias", n.bias);
  };
  fn("sub.conv1.w", p.subsampler.conv1_w);
  fn("sub.conv1.b", p.subsampler.conv1_b);
  fn("sub.conv2.w", p.subsampler.conv2_w);
  fn("sub.conv2.b", p.subsampler.conv2_b);
  fn("sub.proj.w", p.subsampler.proj_w);
  fn("sub.proj.b", p.subsampler.proj_b);
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    const std::string prefix = "enc." + std::to_string(i);
    attn(prefix + ".self_attn", p.encoder[i].self_attn);
    norm(prefix + ".norm1", p.encoder[i].norm1);
    ffn(prefix + ".ffn", p.encoder[i].ffn);
    norm(prefix + ".norm2", p.encoder[i].norm2);
  }
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    const std::string prefix = "dec." + std::to_string(i);
    attn(prefix + ".self_attn", p.decoder[i].self_attn);
    norm(prefix + ".norm1", p.decoder[i].norm1);
    attn(prefix + ".cross_attn", p.decoder[i].cross_attn);
    norm(prefix + ".norm2", p.decoder[i].norm2);
    ffn(prefix + ".ffn", p.decoder[i].ffn);
    norm(prefix + ".norm3", p.decoder[i].norm3);
  }
  fn("embedding", p.embedding);
  fn("out.w", p.out_w);
  fn("out.b", p.out_b);
}

AttentionParams make_attention(std::size_t d) {
  return {Tensor({d, d}), Tensor({d}), Tensor({d, d}), Tensor({d}),
          Tensor({d, d}), Tensor({d}), Tensor({d, d}), Tensor({d})};
}

FeedForwardParams make_ffn(std::size_t d, std::size_t f) {
  return {Tensor({d, f}), Tensor({f}), Tensor({f, d}), Tensor({d})};
}

NormParams make_norm(std::size_t d) { return {Tensor({d}, 1.0), Tensor({d}, 0.0)}; }

}  // namespace

ModelParams::ModelParams(const ModelConfig& config) : config_(config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.model_dim);
  const auto f = static_cast<std::size_t>(config.ffn_dim);
  const auto feat = static_cast<std::size_t>(config.feature_dim);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  subsampler = {Tensor({3 * feat, d}), Tensor({d}), Tensor({3 * d, d}),
                Tensor({d}),           Tensor({d, d}), Tensor({d})};
  for (int i = 0; i < config.encoder_blocks; ++i) {
    encoder.push_back({make_attention(d), make_norm(d), make_ffn(d, f), make_norm(d)});
  }
  for (int i = 0; i < config.decoder_blocks; ++i) {
    decoder.push_back({make_attention(d), make_norm(d), make_attention(d), make_norm(d),
                       make_ffn(d, f), make_norm(d)});
  }
  embedding = Tensor({v, d});
  out_w = Tensor({d, v});
  out_b = Tensor({v});
}

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p(config);
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(Stream::kInit)});
  p.visit([&](const std::string&, Tensor& t) {
    if (t.rank() != 2) {
      return;  // biases and norm parameters keep their constant init
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(t.shape()[0] + t.shape()[1]));
    for (double& x : t.values()) {
      x = (2.0 * uniform01(rng) - 1.0) * limit;
    }
  });
  return p;
}

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_params(*this, fn);
}

void ModelParams::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_params(*this, fn);
}

std::size_t ModelParams::num_parameters() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

void ModelParams::set_requires_grad(bool on) {
  visit([&](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

void ModelParams::zero_grad() {
  visit([](const std::string&, Tensor& t) { t.zero_grad(); });
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (!(a.config_ == b.config_)) {
    return false;
  }
  std::vector<const Tensor*> lhs;
  std::vector<const Tensor*> rhs;
  a.visit([&](const std::string&, const Tensor& t) { lhs.push_back(&t); });
  b.visit([&](const std::string&, const Tensor& t) { rhs.push_back(&t); });
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    if (!(*lhs[i] == *rhs[i])) {
      return false;
    }
  }
  return lhs.size() == rhs.size();
}

// ---------------------------------------------------------------------------
// Forward pass

std::size_t subsampled_length(std::size_t frames) { return ((frames + 1) / 2 + 1) / 2; }

Tensor positional_table(std::size_t length, std::size_t dim) {
  Tensor table({length, dim});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      table.at(pos, i) = std::sin(angle);
      if (i + 1 < dim) {
        table.at(pos, i + 1) = std::cos(angle);
      }
    }
  }
  return table;
}

BoundModel::BoundModel(Graph& g, ModelParams& params, ForwardOptions options)
    : g_(&g), params_(&params), mutable_params_(&params), options_(options) {}

BoundModel::BoundModel(Graph& g, const ModelParams& params, ForwardOptions options)
    : g_(&g), params_(&params), mutable_params_(nullptr), options_(options) {}

Var BoundModel::bind(const Tensor& t) {
  // The tensor lives inside *mutable_params_ when that is set.
  return mutable_params_ ? g_->param(const_cast<Tensor&>(t)) : g_->frozen(t);
}

Var BoundModel::drop(Var x) {
  const double rate = params_->config().dropout;
  if (!options_.training || rate == 0.0) {
    return x;
  }
  if (options_.dropout_rng == nullptr) {
    throw ContractError("training forward with dropout needs a generator");
  }
  return dropout(*g_, x, rate, *options_.dropout_rng, true);
}

Var BoundModel::norm(const NormParams& p, Var x) {
  return layer_norm(*g_, x, bind(p.gain), bind(p.bias), 1e-5);
}

Var BoundModel::feed_forward(const FeedForwardParams& p, Var x) {
  Var h = relu(*g_, linear(*g_, x, bind(p.w1), bind(p.b1)));
  return linear(*g_, h, bind(p.w2), bind(p.b2));
}

Var BoundModel::attention(const AttentionParams& p, Var queries, Var keys,
                          std::span<const std::uint8_t> mask) {
  Graph& g = *g_;
  const auto d = static_cast<std::size_t>(config().model_dim);
  const auto heads = static_cast<std::size_t>(config().num_heads);
  const std::size_t dk = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Var q = linear(g, queries, bind(p.wq), bind(p.bq));
  Var k = linear(g, keys, bind(p.wk), bind(p.bk));
  Var v = linear(g, keys, bind(p.wv), bind(p.bv));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : slice_cols(g, q, h * dk, dk);
    Var kh = heads == 1 ? k : slice_cols(g, k, h * dk, dk);
    Var vh = heads == 1 ? v : slice_cols(g, v, h * dk, dk);
    Var scores = scale(g, matmul_nt(g, qh, kh), inv_sqrt_dk);
    Var weights = masked_softmax_rows(g, scores, mask);
    outs.push_back(matmul(g, weights, vh));
  }
  Var joined = heads == 1 ? outs[0] : concat_cols(g, outs);
  return linear(g, joined, bind(p.wo), bind(p.bo));
}

Var BoundModel::conv_subsample(const FeatSeq& x) {
  if (x.features.rank() != 2 || x.dim() != static_cast<std::size_t>(config().feature_dim)) {
    throw DimensionError("conv_subsample: expected [M x " + std::to_string(config().feature_dim) +
                         "] features");
  }
  if (x.length() < 4) {
    throw ContractError("conv_subsample: input too short (" + std::to_string(x.length()) +
                        " frames, need at least 4)");
  }
  Graph& g = *g_;
  const SubsamplerParams& p = params_->subsampler;
  Var h = g.frozen(x.features);
  h = relu(g, linear(g, unfold_time(g, h, 3), bind(p.conv1_w), bind(p.conv1_b)));
  h = maxpool_time(g, h);
  h = relu(g, linear(g, unfold_time(g, h, 3), bind(p.conv2_w), bind(p.conv2_b)));
  h = maxpool_time(g, h);
  return linear(g, h, bind(p.proj_w), bind(p.proj_b));
}

Var BoundModel::add_positional_encoding(Var h) {
  const Tensor& value = g_->value(h);
  const std::size_t length = value.rows();
  if (length > static_cast<std::size_t>(config().max_positions)) {
    throw CapacityError("positional encoding: " + std::to_string(length) +
                        " positions exceed max_positions " + std::to_string(config().max_positions));
  }
  return add(*g_, h, g_->constant(positional_table(length, value.cols())));
}

Var BoundModel::encode(Var h0, std::span<const std::uint8_t> valid) {
  const std::size_t length = g_->value(h0).rows();
  if (!valid.empty() && valid.size() != length) {
    throw DimensionError("encode: validity mask length differs from sequence length");
  }
  std::vector<std::uint8_t> mask(length * length, 1);
  if (!valid.empty()) {
    for (std::size_t i = 0; i < length; ++i) {
      std::copy(valid.begin(), valid.end(), mask.begin() + static_cast<std::ptrdiff_t>(i * length));
    }
  }
  Var h = h0;
  for (const EncoderBlockParams& block : params_->encoder) {
    Var a = attention(block.self_attn, h, h, mask);
    h = norm(block.norm1, add(*g_, h, drop(a)));
    Var f = feed_forward(block.ffn, h);
    h = norm(block.norm2, add(*g_, h, drop(f)));
  }
  return h;
}

Var BoundModel::encode_features(const FeatSeq& x) {
  Var h = add_positional_encoding(conv_subsample(x));
  return encode(drop(h));
}

Var BoundModel::decode_logits(std::span<const int> prefix, Var memory,
                              std::span<const std::uint8_t> memory_valid) {
  if (prefix.empty()) {
    throw ContractError("decode: empty prefix");
  }
  if (prefix.front() != kSos) {
    throw ContractError("decode: prefix must begin with SOS");
  }
  Graph& g = *g_;
  const std::size_t length = prefix.size();
  const std::size_t mem_length = g.value(memory).rows();
  if (!memory_valid.empty() && memory_valid.size() != mem_length) {
    throw DimensionError("decode: memory mask length differs from memory length");
  }
  std::vector<std::uint8_t> causal(length * length, 0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      causal[i * length + j] = 1;
    }
  }
  std::vector<std::uint8_t> cross(length * mem_length, 1);
  if (!memory_valid.empty()) {
    for (std::size_t i = 0; i < length; ++i) {
      std::copy(memory_valid.begin(), memory_valid.end(),
                cross.begin() + static_cast<std::ptrdiff_t>(i * mem_length));
    }
  }
  const double emb_scale = std::sqrt(static_cast<double>(config().model_dim));
  Var u = scale(g, gather_rows(g, bind(params_->embedding), prefix), emb_scale);
  u = drop(add_positional_encoding(u));
  for (const DecoderBlockParams& block : params_->decoder) {
    Var a = attention(block.self_attn, u, u, causal);
    u = norm(block.norm1, add(g, u, drop(a)));
    Var c = attention(block.cross_attn, u, memory, cross);
    u = norm(block.norm2, add(g, u, drop(c)));
    Var f = feed_forward(block.ffn, u);
    u = norm(block.norm3, add(g, u, drop(f)));
  }
  return linear(g, u, bind(params_->out_w), bind(params_->out_b));
}

Var BoundModel::forward_probs(const FeatSeq& x, std::span<const int> prefix) {
  Var memory = encode_features(x);
  return softmax_rows(*g_, decode_logits(prefix, memory));
}

Tensor predict_probs(const ModelParams& params, const FeatSeq& x, std::span<const int> prefix) {
  Graph g;
  BoundModel model(g, params);
  return g.value(model.forward_probs(x, prefix));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCheckpointMagic = "DMLSCKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const ModelConfig& c = params.config();
  w.i32(c.encoder_blocks);
  w.i32(c.decoder_blocks);
  w.i32(c.model_dim);
  w.i32(c.ffn_dim);
  w.i32(c.num_heads);
  w.i32(c.vocab_size);
  w.i32(c.feature_dim);
  w.i32(c.max_positions);
  w.f64(c.dropout);
  std::uint32_t count = 0;
  params.visit([&](const std::string&, const Tensor&) { ++count; });
  w.u32(count);
  params.visit([&](const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
      w.u64(d);
    }
    for (double v : t.values()) {
      w.f64(v);
    }
  });
  return w.take();
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    r.fail("not a checkpoint (bad magic)", 0);
  }
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kCheckpointVersion) {
    r.fail("unsupported checkpoint version", version_at);
  }
  ModelConfig c;
  const std::size_t config_at = r.offset();
  c.encoder_blocks = r.i32("config");
  c.decoder_blocks = r.i32("config");
  c.model_dim = r.i32("config");
  c.ffn_dim = r.i32("config");
  c.num_heads = r.i32("config");
  c.vocab_size = r.i32("config");
  c.feature_dim = r.i32("config");
  c.max_positions = r.i32("config");
  c.dropout = r.f64("config");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid config record: ") + e.what(), config_at);
  }
  ModelParams params = ModelParams::initialize(c, 0);
  std::uint32_t expected = 0;
  params.visit([&](const std::string&, const Tensor&) { ++expected; });
  const std::size_t count_at = r.offset();
  if (r.u32("tensor count") != expected) {
    r.fail("tensor count does not match config", count_at);
  }
  params.visit([&](const std::string& name, Tensor& t) {
    const std::size_t at = r.offset();
    if (r.str("tensor name") != name) {
      r.fail("expected tensor '" + name + "'", at);
    }
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank && i < 8; ++i) {
      shape.push_back(static_cast<std::size_t>(r.u64("tensor shape")));
    }
    if (shape != t.shape()) {
      r.fail("shape mismatch for tensor '" + name + "'", rank_at);
    }
    for (double& v : t.values()) {
      v = r.f64("tensor data");
    }
  });
  if (!r.done()) {
    r.fail("trailing bytes after checkpoint", r.offset());
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  write_file_bytes(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write failed for " + path.string());
  }
}

}  // namespace dmlseq
