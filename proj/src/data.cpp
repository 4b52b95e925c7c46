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

#include "dmlseq/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmlseq/binary_io.hpp"
#include "dmlseq/errors.hpp"
#include "dmlseq/rng.hpp"

namespace dmlseq {

void SyntheticTaskConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("task: " + msg); };
  if (vocab_size < 4) {
    fail("vocab_size must be >= 4 (PAD, SOS, EOS and at least one symbol)");
  }
  if (feature_dim < 1) {
    fail("feature_dim must be >= 1");
  }
  if (frames_per_token < 4) {
    fail("frames_per_token must be >= 4");
  }
  if (!(noise_std >= 0.0)) {
    fail("noise_std must be >= 0");
  }
  if (min_tokens < 1 || max_tokens < min_tokens) {
    fail("token length range must satisfy 1 <= min_tokens <= max_tokens");
  }
  if (train_size < 0 || valid_size < 0 || test_size < 0) {
    fail("corpus sizes must be >= 0");
  }
}

Tensor task_prototypes(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(Stream::kCorpus), 0});
  Tensor protos({static_cast<std::size_t>(cfg.vocab_size), static_cast<std::size_t>(cfg.feature_dim)});
  for (std::size_t v = kFirstSymbol; v < protos.rows(); ++v) {
    for (double& x : protos.row(v)) {
      x = standard_normal(rng);
    }
  }
  return protos;
}

namespace {

Corpus generate_split(const SyntheticTaskConfig& cfg, const Tensor& protos, const std::string& split,
                      std::uint64_t stream, int count) {
  Corpus corpus{cfg, split, {}};
  Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(Stream::kCorpus), stream});
  const auto dim = static_cast<std::size_t>(cfg.feature_dim);
  const auto fpt = static_cast<std::size_t>(cfg.frames_per_token);
  corpus.utterances.reserve(static_cast<std::size_t>(count));
  for (int u = 0; u < count; ++u) {
    const auto n = static_cast<std::size_t>(uniform_int(rng, cfg.min_tokens, cfg.max_tokens));
    Utterance utt;
    utt.tokens.resize(n);
    for (int& t : utt.tokens) {
      t = static_cast<int>(uniform_int(rng, kFirstSymbol, cfg.vocab_size - 1));
    }
    utt.features.features = Tensor({n * fpt, dim});
    for (std::size_t i = 0; i < n; ++i) {
      const auto proto = protos.row(static_cast<std::size_t>(utt.tokens[i]));
      for (std::size_t f = 0; f < fpt; ++f) {
        auto frame = utt.features.features.row(i * fpt + f);
        for (std::size_t d = 0; d < dim; ++d) {
          frame[d] = proto[d] + (cfg.noise_std > 0.0 ? cfg.noise_std * standard_normal(rng) : 0.0);
        }
      }
    }
    corpus.utterances.push_back(std::move(utt));
  }
  return corpus;
}

}  // namespace

TaskCorpora generate_task(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  TaskCorpora out;
  out.prototypes = task_prototypes(cfg);
  out.train = generate_split(cfg, out.prototypes, "train", 1, cfg.train_size);
  out.valid = generate_split(cfg, out.prototypes, "valid", 2, cfg.valid_size);
  out.test = generate_split(cfg, out.prototypes, "test", 3, cfg.test_size);
  return out;
}

std::vector<Corpus> generate_test_splits(const SyntheticTaskConfig& cfg, std::size_t count) {
  cfg.validate();
  const Tensor prototypes = task_prototypes(cfg);
  std::vector<Corpus> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = i == 0 ? "test" : "test" + std::to_string(i + 1);
    out.push_back(generate_split(cfg, prototypes, name, 3 + i, cfg.test_size));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> ids) {
  Batch b;
  b.utterance_ids.assign(ids.begin(), ids.end());
  std::size_t dim = 0;
  for (std::size_t id : ids) {
    const Utterance& u = corpus.utterances.at(id);
    b.max_frames = std::max(b.max_frames, u.features.length());
    b.max_tokens = std::max(b.max_tokens, u.tokens.size());
    dim = u.features.dim();
  }
  const std::size_t n = ids.size();
  b.features = Tensor({n, b.max_frames, dim});
  b.frame_mask.assign(n * b.max_frames, 0);
  b.tokens.assign(n * b.max_tokens, kPad);
  b.token_mask.assign(n * b.max_tokens, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Utterance& u = corpus.utterances[ids[i]];
    const auto src = u.features.features.values();
    std::copy(src.begin(), src.end(), b.features.data() + i * b.max_frames * dim);
    std::fill_n(b.frame_mask.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames),
                u.features.length(), 1);
    std::copy(u.tokens.begin(), u.tokens.end(),
              b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.max_tokens));
    std::fill_n(b.token_mask.begin() + static_cast<std::ptrdiff_t>(i * b.max_tokens),
                u.tokens.size(), 1);
  }
  return b;
}

Utterance Batch::unpack(std::size_t b) const {
  const std::size_t dim = features.rank() == 3 ? features.shape()[2] : 0;
  std::size_t frames = 0;
  while (frames < max_frames && frame_mask[b * max_frames + frames]) {
    ++frames;
  }
  std::size_t count = 0;
  while (count < max_tokens && token_mask[b * max_tokens + count]) {
    ++count;
  }
  Utterance u;
  const double* src = features.data() + b * max_frames * dim;
  u.features.features = Tensor({frames, dim}, std::vector<double>(src, src + frames * dim));
  const auto first = tokens.begin() + static_cast<std::ptrdiff_t>(b * max_tokens);
  u.tokens.assign(first, first + static_cast<std::ptrdiff_t>(count));
  return u;
}

std::vector<Utterance> Batch::unpack_all() const {
  std::vector<Utterance> out;
  out.reserve(size());
  for (std::size_t b = 0; b < size(); ++b) {
    out.push_back(unpack(b));
  }
  return out;
}

std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size,
                                std::uint64_t shuffle_seed) {
  if (batch_size == 0) {
    throw ConfigError("make_batches: batch_size must be >= 1");
  }
  if (corpus.empty()) {
    throw ConfigError("make_batches: corpus '" + corpus.split + "' is empty");
  }
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng({shuffle_seed, static_cast<std::uint64_t>(Stream::kShuffle)});
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.push_back(make_batch(corpus, std::span(order).subspan(start, end - start)));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Standardization

Standardizer Standardizer::fit(const Corpus& train) {
  if (train.empty()) {
    throw ConfigError("standardizer: empty training corpus");
  }
  const std::size_t dim = train.utterances.front().features.dim();
  std::vector<double> sum(dim, 0.0);
  std::vector<double> sq(dim, 0.0);
  double frames = 0.0;
  for (const Utterance& u : train.utterances) {
    for (std::size_t t = 0; t < u.features.length(); ++t) {
      const auto row = u.features.features.row(t);
      for (std::size_t d = 0; d < dim; ++d) {
        sum[d] += row[d];
        sq[d] += row[d] * row[d];
      }
    }
    frames += static_cast<double>(u.features.length());
  }
  Standardizer s;
  s.mean.resize(dim);
  s.inv_std.resize(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    s.mean[d] = sum[d] / frames;
    const double var = std::max(0.0, sq[d] / frames - s.mean[d] * s.mean[d]);
    s.inv_std[d] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
  }
  return s;
}

void Standardizer::apply(Corpus& corpus) const {
  for (Utterance& u : corpus.utterances) {
    if (u.features.dim() != mean.size()) {
      throw DimensionError("standardizer: feature dimension mismatch");
    }
    for (std::size_t t = 0; t < u.features.length(); ++t) {
      auto row = u.features.features.row(t);
      for (std::size_t d = 0; d < row.size(); ++d) {
        row[d] = (row[d] - mean[d]) * inv_std[d];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Corpus container

namespace {

constexpr std::string_view kCorpusMagic = "DMLSCORP";
constexpr std::uint32_t kCorpusVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_corpus(const Corpus& corpus) {
  ByteWriter w;
  w.raw(kCorpusMagic);
  w.u32(kCorpusVersion);
  const SyntheticTaskConfig& c = corpus.task;
  w.i32(c.vocab_size);
  w.i32(c.feature_dim);
  w.i32(c.frames_per_token);
  w.f64(c.noise_std);
  w.i32(c.min_tokens);
  w.i32(c.max_tokens);
  w.i32(c.train_size);
  w.i32(c.valid_size);
  w.i32(c.test_size);
  w.u64(c.seed);
  w.str(corpus.split);
  w.u32(static_cast<std::uint32_t>(corpus.size()));
  for (const Utterance& u : corpus.utterances) {
    w.u32(static_cast<std::uint32_t>(u.tokens.size()));
    for (int t : u.tokens) {
      w.i32(t);
    }
    w.u32(static_cast<std::uint32_t>(u.features.length()));
    for (double v : u.features.features.values()) {
      w.f64(v);
    }
  }
  return w.take();
}

Corpus decode_corpus(std::span<const std::uint8_t> bytes) {
  Corpus corpus;
  if (bytes.empty()) {
    return corpus;  // a zero-length file is an empty corpus
  }
  ByteReader r(bytes);
  if (r.raw(kCorpusMagic.size(), "magic") != kCorpusMagic) {
    r.fail("not a corpus file (bad magic)", 0);
  }
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kCorpusVersion) {
    r.fail("unsupported corpus version", version_at);
  }
  SyntheticTaskConfig& c = corpus.task;
  const std::size_t config_at = r.offset();
  c.vocab_size = r.i32("config");
  c.feature_dim = r.i32("config");
  c.frames_per_token = r.i32("config");
  c.noise_std = r.f64("config");
  c.min_tokens = r.i32("config");
  c.max_tokens = r.i32("config");
  c.train_size = r.i32("config");
  c.valid_size = r.i32("config");
  c.test_size = r.i32("config");
  c.seed = r.u64("config");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid config record: ") + e.what(), config_at);
  }
  corpus.split = r.str("split name");
  const std::uint32_t count = r.u32("utterance count");
  const auto dim = static_cast<std::size_t>(c.feature_dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    Utterance u;
    const std::size_t record_at = r.offset();
    const std::uint32_t n = r.u32("token count");
    if (static_cast<std::size_t>(n) * 4 > r.remaining()) {
      r.fail("truncated utterance record " + std::to_string(i), record_at);
    }
    u.tokens.resize(n);
    for (int& t : u.tokens) {
      const std::size_t at = r.offset();
      t = r.i32("token id");
      if (t < 0 || t >= c.vocab_size) {
        r.fail("token id out of range", at);
      }
    }
    const std::size_t frames_at = r.offset();
    const std::uint32_t frames = r.u32("frame count");
    if (static_cast<std::size_t>(frames) * dim * 8 > r.remaining()) {
      r.fail("truncated features in utterance record " + std::to_string(i), frames_at);
    }
    std::vector<double> values(static_cast<std::size_t>(frames) * dim);
    for (double& v : values) {
      v = r.f64("feature");
    }
    u.features.features = Tensor({frames, dim}, std::move(values));
    corpus.utterances.push_back(std::move(u));
  }
  if (!r.done()) {
    r.fail("trailing bytes after corpus", r.offset());
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  write_file_bytes(path, encode_corpus(corpus));
}

Corpus read_corpus(const std::filesystem::path& path) { return decode_corpus(read_file_bytes(path)); }

}  // namespace dmlseq
