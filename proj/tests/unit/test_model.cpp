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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dmlseq/errors.hpp"
#include "dmlseq/gradcheck.hpp"
#include "dmlseq/model.hpp"
#include "dmlseq/tokens.hpp"
#include "test_support.hpp"

namespace dmlseq {
namespace {

using Mat = std::vector<std::vector<double>>;

ModelConfig tiny_config() {
  ModelConfig c = toy_model_config();
  c.dropout = 0.0;
  return c;
}

FeatSeq random_features(std::size_t frames, std::size_t dim, std::uint64_t seed) {
  Rng rng = make_rng({seed});
  return FeatSeq{testing::random_tensor({frames, dim}, rng)};
}

// ---------------------------------------------------------------------------
// Plain-loop reference implementation of one attention block.

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

Mat affine(const Mat& x, const Tensor& w, const Tensor& b) {
  Mat y(x.size(), std::vector<double>(w.cols()));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) {
      double acc = b[c];
      for (std::size_t k = 0; k < w.rows(); ++k) acc += x[r][k] * w.at(k, c);
      y[r][c] = acc;
    }
  return y;
}

Mat single_head_attention(const AttentionParams& p, const Mat& queries, const Mat& keys, bool causal) {
  const Mat q = affine(queries, p.wq, p.bq);
  const Mat k = affine(keys, p.wk, p.bk);
  const Mat v = affine(keys, p.wv, p.bv);
  const double s = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    const std::size_t visible = causal ? i + 1 : k.size();
    std::vector<double> w(visible);
    double mx = -1e300;
    for (std::size_t j = 0; j < visible; ++j) {
      w[j] = s * std::inner_product(q[i].begin(), q[i].end(), k[j].begin(), 0.0);
      mx = std::max(mx, w[j]);
    }
    double z = 0;
    for (double& e : w) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < visible; ++j)
      for (std::size_t c = 0; c < v[j].size(); ++c) out[i][c] += w[j] / z * v[j][c];
  }
  return affine(out, p.wo, p.bo);
}

Mat add_norm(const Mat& x, const Mat& y, const NormParams& p) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const std::size_t d = x[r].size();
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mean += (out[r][c] += y[r][c]);
    mean /= d;
    for (double v : out[r]) var += (v - mean) * (v - mean);
    var /= d;
    for (std::size_t c = 0; c < d; ++c) out[r][c] = (out[r][c] - mean) / std::sqrt(var + 1e-5) * p.gain[c] + p.bias[c];
  }
  return out;
}

Mat ffn(const Mat& x, const FeedForwardParams& p) {
  Mat h = affine(x, p.w1, p.b1);
  for (auto& row : h)
    for (double& v : row) v = std::max(v, 0.0);
  return affine(h, p.w2, p.b2);
}

void expect_near(const Tensor& got, const Mat& want, double tol) {
  ASSERT_EQ(got.rows(), want.size());
  for (std::size_t r = 0; r < want.size(); ++r)
    for (std::size_t c = 0; c < want[r].size(); ++c) EXPECT_NEAR(got.at(r, c), want[r][c], tol) << r << "," << c;
}

TEST(ModelConfig, Invariants) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.encoder_blocks = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelParams, ShapesAndInitialization) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 3);
  EXPECT_EQ(p.embedding.shape(), (Shape{5, 8}));
  EXPECT_EQ(p.out_w.shape(), (Shape{8, 5}));
  EXPECT_TRUE(p.all_finite());
  const double limit = std::sqrt(6.0 / (8 + 8));
  for (double v : p.encoder[0].self_attn.wq.values()) EXPECT_LE(std::abs(v), limit);
  EXPECT_EQ(p, ModelParams::initialize(tiny_config(), 3));
  EXPECT_FALSE(p == ModelParams::initialize(tiny_config(), 4));
}

TEST(Subsampler, OutputLength) {
  EXPECT_EQ(subsampled_length(16), 4u);
  EXPECT_EQ(subsampled_length(4), 1u);
  EXPECT_EQ(subsampled_length(10), 3u);
  const ModelParams p = ModelParams::initialize(tiny_config(), 1);
  for (std::size_t m : {4u, 5u, 10u, 16u, 17u}) {
    Graph g;
    BoundModel model(g, p);
    const Tensor& h = g.value(model.conv_subsample(random_features(m, 4, m)));
    EXPECT_EQ(h.rows(), subsampled_length(m));
    EXPECT_EQ(h.cols(), 8u);
  }
}

TEST(Subsampler, RejectsShortOrMisshapedInput) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 1);
  Graph g;
  BoundModel model(g, p);
  EXPECT_THROW(model.conv_subsample(random_features(3, 4, 1)), ContractError);
  EXPECT_THROW(model.conv_subsample(random_features(8, 5, 1)), DimensionError);
}

TEST(PositionalEncoding, ClosedFormTable) {
  const Tensor t = positional_table(50, 8);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(t.at(0, c), c % 2 == 0 ? 0.0 : 1.0);
  for (std::size_t pos = 0; pos < 50; ++pos) {
    for (std::size_t i = 0; i < 4; ++i) {
      const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / 8.0);
      EXPECT_NEAR(t.at(pos, 2 * i), std::sin(pos * freq), 1e-12);
      EXPECT_NEAR(t.at(pos, 2 * i + 1), std::cos(pos * freq), 1e-12);
    }
  }
}

TEST(PositionalEncoding, ZeroInputYieldsTableAndCapacityIsEnforced) {
  ModelConfig c = tiny_config();
  c.max_positions = 6;
  const ModelParams p = ModelParams::initialize(c, 1);
  Graph g;
  BoundModel model(g, p);
  EXPECT_EQ(g.value(model.add_positional_encoding(g.constant(Tensor({6, 8})))), positional_table(6, 8));
  EXPECT_THROW(model.add_positional_encoding(g.constant(Tensor({7, 8}))), CapacityError);
}

TEST(Encoder, MatchesHandRolledBlock) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 5);
  Rng rng = make_rng({10});
  const Tensor h0 = testing::random_tensor({2, 8}, rng);
  Graph g;
  BoundModel model(g, p);
  const Tensor got = g.value(model.encode(g.constant(h0)));

  const EncoderBlockParams& b = p.encoder[0];
  const Mat x = to_mat(h0);
  const Mat h1 = add_norm(x, single_head_attention(b.self_attn, x, x, false), b.norm1);
  const Mat h2 = add_norm(h1, ffn(h1, b.ffn), b.norm2);
  expect_near(got, h2, 1e-12);
}

TEST(Decoder, MatchesHandRolledBlock) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 6);
  Rng rng = make_rng({11});
  const Tensor memory = testing::random_tensor({3, 8}, rng);
  const std::vector<int> prefix{kSos, 4, 3};
  Graph g;
  BoundModel model(g, p);
  const Tensor got = g.value(model.decode_logits(prefix, g.constant(memory)));

  Mat u(prefix.size(), std::vector<double>(8));
  const Tensor pe = positional_table(prefix.size(), 8);
  for (std::size_t n = 0; n < prefix.size(); ++n)
    for (std::size_t c = 0; c < 8; ++c)
      u[n][c] = p.embedding.at(static_cast<std::size_t>(prefix[n]), c) * std::sqrt(8.0) + pe.at(n, c);
  const DecoderBlockParams& b = p.decoder[0];
  const Mat mem = to_mat(memory);
  u = add_norm(u, single_head_attention(b.self_attn, u, u, true), b.norm1);
  u = add_norm(u, single_head_attention(b.cross_attn, u, mem, false), b.norm2);
  u = add_norm(u, ffn(u, b.ffn), b.norm3);
  expect_near(got, affine(u, p.out_w, p.out_b), 1e-12);
}

TEST(Encoder, PaddedFramesDoNotLeak) {
  ModelConfig c = tiny_config();
  c.num_heads = 2;
  c.encoder_blocks = 2;
  const ModelParams p = ModelParams::initialize(c, 7);
  Rng rng = make_rng({12});
  Tensor h0 = testing::random_tensor({5, 8}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 0};
  auto run = [&](const Tensor& x) {
    Graph g;
    BoundModel model(g, p);
    return g.value(model.encode(g.constant(x), valid));
  };
  const Tensor a = run(h0);
  for (std::size_t r = 3; r < 5; ++r)
    for (double& v : h0.row(r)) v = 100.0 * standard_normal(rng);
  const Tensor b = run(h0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t col = 0; col < 8; ++col) EXPECT_EQ(a.at(r, col), b.at(r, col));
}

TEST(Decoder, IsCausal) {
  ModelConfig c = tiny_config();
  c.decoder_blocks = 2;
  c.num_heads = 2;
  const ModelParams p = ModelParams::initialize(c, 8);
  const FeatSeq x = random_features(12, 4, 9);
  const std::vector<int> a{kSos, 3, 4, 3, 4};
  for (std::size_t n = 1; n < a.size(); ++n) {
    std::vector<int> b = a;
    for (std::size_t m = n; m < b.size(); ++m) b[m] = b[m] == 3 ? 4 : 3;
    const Tensor pa = predict_probs(p, x, a);
    const Tensor pb = predict_probs(p, x, b);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t col = 0; col < 5; ++col) EXPECT_EQ(pa.at(r, col), pb.at(r, col));
  }
}

TEST(Decoder, RejectsBadPrefix) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 1);
  Graph g;
  BoundModel model(g, p);
  const Var mem = g.constant(Tensor({2, 8}));
  EXPECT_THROW(model.decode_logits(std::vector<int>{}, mem), ContractError);
  EXPECT_THROW(model.decode_logits(std::vector<int>{3, 4}, mem), ContractError);
}

TEST(Decoder, FullyMaskedMemoryStillGivesFiniteLogits) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 1);
  Graph g;
  BoundModel model(g, p);
  const std::vector<std::uint8_t> none{0, 0};
  const Tensor logits = g.value(model.decode_logits(std::vector<int>{kSos, 3}, g.constant(Tensor({2, 8})), none));
  EXPECT_TRUE(logits.all_finite());
}

TEST(ForwardProbs, NormalizedReproducibleAndChainConsistent) {
  const ModelParams p = ModelParams::initialize(tiny_config(), 2);
  const FeatSeq x = random_features(9, 4, 3);
  const std::vector<int> tokens{3, 4, 4};
  const std::vector<int> prefix = decoder_input(tokens);
  const std::vector<int> targets = decoder_targets(tokens);
  EXPECT_EQ(prefix, (std::vector<int>{kSos, 3, 4, 4}));
  EXPECT_EQ(targets, (std::vector<int>{3, 4, 4, kEos}));
  const Tensor probs = predict_probs(p, x, prefix);
  EXPECT_EQ(probs, predict_probs(p, x, prefix));
  double product = 1.0, log_sum = 0.0;
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    const auto row = probs.row(r);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
    product *= row[static_cast<std::size_t>(targets[r])];
    log_sum += std::log(row[static_cast<std::size_t>(targets[r])]);
  }
  EXPECT_NEAR(product, std::exp(log_sum), 1e-9);
}

TEST(ForwardProbs, DropoutOnlyInTraining) {
  ModelConfig c = tiny_config();
  c.dropout = 0.3;
  const ModelParams p = ModelParams::initialize(c, 2);
  const FeatSeq x = random_features(9, 4, 3);
  const std::vector<int> prefix{kSos, 3};
  auto run = [&](bool training, std::uint64_t seed) {
    Rng rng = make_rng({seed});
    Graph g;
    BoundModel model(g, p, ForwardOptions{training, &rng});
    return g.value(model.forward_probs(x, prefix));
  };
  EXPECT_EQ(run(false, 1), predict_probs(p, x, prefix));
  EXPECT_EQ(run(true, 1), run(true, 1));
  EXPECT_FALSE(run(true, 1) == run(true, 2));
}

TEST(Model, FullGradientCheckOnToyConfig) {
  ModelParams p = ModelParams::initialize(toy_model_config(), 4);
  const FeatSeq x = random_features(8, 4, 5);
  const std::vector<int> prefix{kSos, 3, 4};
  const GradcheckResult r = check_gradient("model", p, [&](Graph& g) {
    BoundModel model(g, p);
    Tensor w({3, 5});
    Rng rng = make_rng({77});
    for (double& v : w.values()) v = uniform01(rng);
    return soft_cross_entropy(g, clamped_log(g, model.forward_probs(x, prefix)), w);
  });
  EXPECT_TRUE(r.passed) << r.worst_parameter << " " << r.max_rel_error;
  EXPECT_EQ(r.checked, p.num_parameters());
}

TEST(Checkpoint, RoundTripIsExact) {
  ModelConfig c = tiny_config();
  c.num_heads = 2;
  const ModelParams p = ModelParams::initialize(c, 9);
  const std::vector<std::uint8_t> bytes = encode_checkpoint(p);
  const ModelParams q = decode_checkpoint(bytes);
  EXPECT_EQ(q.config(), p.config());
  EXPECT_EQ(q, p);
  EXPECT_EQ(encode_checkpoint(q), bytes);

  const auto path = std::filesystem::temp_directory_path() / "dmlseq_model_roundtrip.ckpt";
  save_checkpoint(path, p);
  EXPECT_EQ(load_checkpoint(path), p);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionReportsOffset) {
  const std::vector<std::uint8_t> bytes = encode_checkpoint(ModelParams::initialize(tiny_config(), 9));
  std::vector<std::uint8_t> bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 3);
  try {
    decode_checkpoint(truncated);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), bytes.size() - 8);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}

}  // namespace
}  // namespace dmlseq
