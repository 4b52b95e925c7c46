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

#include "dmlseq/decode.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <utility>

#include "dmlseq/errors.hpp"
#include "dmlseq/parallel.hpp"

namespace dmlseq {

int default_max_len(std::size_t frames) {
  return 2 * (static_cast<int>(subsampled_length(frames)) + 2);
}

namespace {

/// Encoder output computed once, then reused for every prefix.
class IncrementalScorer {
 public:
  IncrementalScorer(const ModelParams& params, const FeatSeq& x) : params_(params) {
    Graph g;
    BoundModel model(g, params);
    memory_ = g.value(model.encode_features(x));
  }

  /// log P(. | prefix) for the next position.
  std::vector<double> next(std::span<const int> symbols) const {
    Graph g;
    BoundModel model(g, params_);
    const std::vector<int> prefix = decoder_input(symbols);
    Var logits = model.decode_logits(prefix, g.frozen(memory_));
    const Tensor& logp = g.value(log_softmax_rows(g, logits));
    const auto last = logp.row(logp.rows() - 1);
    return {last.begin(), last.end()};
  }

 private:
  const ModelParams& params_;
  Tensor memory_;
};

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) {
    return a.log_prob > b.log_prob;
  }
  const std::size_t n = std::min(a.tokens.size(), b.tokens.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (a.tokens[i] != b.tokens[i]) {
      return a.tokens[i] < b.tokens[i];
    }
  }
  return a.tokens.size() < b.tokens.size();
}

void check_limits(int beam, int max_len) {
  if (beam < 1) {
    throw ContractError("decode: beam must be >= 1");
  }
  if (max_len < 1) {
    throw ContractError("decode: max_len must be >= 1");
  }
}

}  // namespace

std::vector<int> hypothesis_symbols(const Hypothesis& h) {
  std::vector<int> out = h.tokens;
  if (!out.empty() && out.back() == kEos) {
    out.pop_back();
  }
  return out;
}

Hypothesis greedy_decode(const ModelParams& params, const FeatSeq& x, int max_len) {
  check_limits(1, max_len);
  const IncrementalScorer scorer(params, x);
  Hypothesis h;
  std::vector<int> symbols;
  for (int step = 1; step <= max_len; ++step) {
    const std::vector<double> logp = scorer.next(symbols);
    int best = kEos;
    if (step < max_len) {
      for (int t = kFirstSymbol; t < static_cast<int>(logp.size()); ++t) {
        if (logp[static_cast<std::size_t>(t)] > logp[static_cast<std::size_t>(best)]) {
          best = t;
        }
      }
    }
    h.tokens.push_back(best);
    h.log_prob += logp[static_cast<std::size_t>(best)];
    if (best == kEos) {
      break;
    }
    symbols.push_back(best);
  }
  h.finished = true;
  return h;
}

Hypothesis beam_search(const ModelParams& params, const FeatSeq& x, int beam, int max_len) {
  check_limits(beam, max_len);
  const IncrementalScorer scorer(params, x);
  const int vocab = params.config().vocab_size;
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> pool;
  for (int step = 1; step <= max_len && !live.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& h : live) {
      const std::vector<double> logp = scorer.next(h.tokens);
      auto extend = [&](int t) {
        Hypothesis c = h;
        c.tokens.push_back(t);
        c.log_prob += logp[static_cast<std::size_t>(t)];
        c.finished = t == kEos;
        candidates.push_back(std::move(c));
      };
      extend(kEos);
      if (step < max_len) {
        for (int t = kFirstSymbol; t < vocab; ++t) {
          extend(t);
        }
      }
    }
    const std::size_t keep = std::min(candidates.size(), static_cast<std::size_t>(beam));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), ranks_before);
    candidates.resize(keep);
    live.clear();
    for (Hypothesis& c : candidates) {
      (c.finished ? pool : live).push_back(std::move(c));
    }
    if (!pool.empty() && !live.empty()) {
      const auto best_pool = std::min_element(pool.begin(), pool.end(), ranks_before);
      const auto best_live = std::min_element(live.begin(), live.end(), ranks_before);
      // Scores never increase, so no live hypothesis can overtake the pool.
      if (best_pool->log_prob >= best_live->log_prob) {
        break;
      }
    }
  }
  return *std::min_element(pool.begin(), pool.end(), ranks_before);
}

CerReport edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  if (ref.empty()) {
    throw ContractError("edit_distance: empty reference");
  }
  // Cost is (errors, insertions + deletions), compared lexicographically.
  using Cost = std::pair<int, int>;
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  std::vector<Cost> prev(m + 1);
  std::vector<Cost> cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) {
    prev[j] = {static_cast<int>(j), static_cast<int>(j)};
  }
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = {static_cast<int>(i), static_cast<int>(i)};
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      Cost best{prev[j - 1].first + sub, prev[j - 1].second};
      best = std::min(best, Cost{prev[j].first + 1, prev[j].second + 1});
      best = std::min(best, Cost{cur[j - 1].first + 1, cur[j - 1].second + 1});
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  const auto [errors, indels] = prev[m];
  const int diff = static_cast<int>(m) - static_cast<int>(n);  // insertions - deletions
  CerReport r;
  r.insertions = (indels + diff) / 2;
  r.deletions = (indels - diff) / 2;
  r.substitutions = errors - indels;
  r.ref_length = static_cast<int>(n);
  return r;
}

CorpusEvaluation evaluate_corpus(const ModelParams& params, const Corpus& corpus, int beam,
                                 int workers) {
  if (corpus.empty()) {
    throw ContractError("evaluate: corpus '" + corpus.split + "' is empty");
  }
  check_limits(beam, 1);
  CorpusEvaluation eval;
  eval.utterances.resize(corpus.size());
  parallel_for(corpus.size(), workers, [&](std::size_t i) {
    const Utterance& u = corpus.utterances[i];
    const int max_len = default_max_len(u.features.length());
    const Hypothesis h = beam == 1 ? greedy_decode(params, u.features, max_len)
                                   : beam_search(params, u.features, beam, max_len);
    UtteranceReport& r = eval.utterances[i];
    r.id = corpus.split + "-" + std::to_string(i);
    r.ref = u.tokens;
    r.hyp = hypothesis_symbols(h);
    r.score = edit_distance(r.ref, r.hyp);
  });
  for (const UtteranceReport& r : eval.utterances) {
    eval.total.substitutions += r.score.substitutions;
    eval.total.insertions += r.score.insertions;
    eval.total.deletions += r.score.deletions;
    eval.total.ref_length += r.score.ref_length;
  }
  return eval;
}

namespace {

std::string join_tokens(const std::vector<int>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    s += (i ? " " : "") + std::to_string(tokens[i]);
  }
  return s;
}

}  // namespace

void write_cer_csv(std::ostream& out, const CorpusEvaluation& eval) {
  out << "utterance_id,ref,hyp,S,I,D,cer\n";
  char cer[32];
  for (const UtteranceReport& r : eval.utterances) {
    std::snprintf(cer, sizeof(cer), "%.6f", r.score.cer());
    out << r.id << ',' << join_tokens(r.ref) << ',' << join_tokens(r.hyp) << ','
        << r.score.substitutions << ',' << r.score.insertions << ',' << r.score.deletions << ','
        << cer << '\n';
  }
}

}  // namespace dmlseq
