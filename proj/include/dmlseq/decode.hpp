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

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dmlseq/data.hpp"
#include "dmlseq/model.hpp"

namespace dmlseq {

struct Hypothesis {
  std::vector<int> tokens;  // emitted tokens, EOS included once finished
  double log_prob = 0.0;
  bool finished = false;
};

/// Default generation bound: 2 * (M' + 2) for M input frames.
int default_max_len(std::size_t frames);

/// Greedy argmax decoding over symbols and EOS; ties go to the smaller id.
/// At step max_len only EOS may be emitted. Returns the symbols without EOS.
Hypothesis greedy_decode(const ModelParams& params, const FeatSeq& x, int max_len);

/// Beam search over summed log-probabilities without length normalization.
/// Candidates are ranked by score, then lexicographically smaller tokens,
/// then shorter length. Finished hypotheses retire to a pool; the search
/// stops when no live hypothesis can still beat the best retired one. PAD
/// and SOS are never emitted, and EOS is forced at max_len.
Hypothesis beam_search(const ModelParams& params, const FeatSeq& x, int beam, int max_len);

/// Symbols of a hypothesis, i.e. tokens without the trailing EOS.
std::vector<int> hypothesis_symbols(const Hypothesis& h);

struct CerReport {
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  int ref_length = 0;

  int errors() const noexcept { return substitutions + insertions + deletions; }
  double cer() const noexcept { return static_cast<double>(errors()) / ref_length; }
};

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the one
/// with the most substitutions (fewest insertions + deletions) is reported.
/// Throws ContractError on an empty reference.
CerReport edit_distance(std::span<const int> ref, std::span<const int> hyp);

struct UtteranceReport {
  std::string id;
  std::vector<int> ref;
  std::vector<int> hyp;
  CerReport score;
};

struct CorpusEvaluation {
  std::vector<UtteranceReport> utterances;
  CerReport total;  // summed counts; total.cer() is the micro-average

  double cer() const noexcept { return total.cer(); }
};

/// Decodes every utterance (beam == 1 uses greedy decoding) and scores it.
CorpusEvaluation evaluate_corpus(const ModelParams& params, const Corpus& corpus, int beam,
                                 int workers = 1);

/// CSV with header `utterance_id,ref,hyp,S,I,D,cer`; token ids space-separated.
void write_cer_csv(std::ostream& out, const CorpusEvaluation& eval);

}  // namespace dmlseq
