/* Copyright 2026 The AVFusion Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Beam search over any step function that maps a prefix (starting with the
// start symbol) to log-probabilities of the next token.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "avfusion/errors.hpp"
#include "avfusion/model.hpp"

namespace avf {

struct Hypothesis {
  std::vector<int> tokens;  // emitted tokens, without start and end symbols
  double score = 0;         // sum of per-step log-probabilities
  bool finished = false;    // ended with the end symbol
};

struct BeamOptions {
  std::size_t width = 6;
  std::size_t max_len = 32;
  bool length_norm = false;  // rank finished hypotheses by score / (length + 1)
  int start = Vocabulary::kSos;
  int end = Vocabulary::kEos;
  std::vector<int> banned{Vocabulary::kPad, Vocabulary::kSos};
};

namespace detail {

struct Candidate {
  std::size_t parent;
  int token;
  double score;
};

inline double rank_score(const Hypothesis& h, const BeamOptions& opt) {
  if (!opt.length_norm) return h.score;
  return h.score / static_cast<double>(h.tokens.size() + 1);
}

// Higher score first; ties go to the earlier parent, then the smaller token.
inline bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.parent != b.parent) return a.parent < b.parent;
  return a.token < b.token;
}

}  // namespace detail

template <class StepFn>
Hypothesis beam_search(StepFn&& step, const BeamOptions& opt) {
  if (opt.width == 0) throw UsageError("beam width must be at least 1");
  if (opt.max_len == 0) throw UsageError("max_len must be at least 1");
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  std::vector<int> prefix;
  for (std::size_t t = 0; t < opt.max_len && !live.empty(); ++t) {
    std::vector<detail::Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      prefix.assign(1, opt.start);
      prefix.insert(prefix.end(), live[h].tokens.begin(), live[h].tokens.end());
      const std::vector<double> logp = step(std::span<const int>(prefix));
      for (std::size_t v = 0; v < logp.size(); ++v) {
        const int tok = static_cast<int>(v);
        if (std::find(opt.banned.begin(), opt.banned.end(), tok) != opt.banned.end()) continue;
        cands.push_back({h, tok, live[h].score + logp[v]});
      }
    }
    const std::size_t keep = std::min(opt.width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      detail::better);
    std::vector<Hypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      Hypothesis h{live[cands[c].parent].tokens, cands[c].score, false};
      if (cands[c].token == opt.end) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[c].token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    // Scores never increase, so no live beam can overtake the best finished one.
    if (!finished.empty() && !live.empty() && !opt.length_norm) {
      double best_done = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_done = std::max(best_done, f.score);
      if (best_done >= live.front().score) break;
    }
  }
  const std::vector<Hypothesis>& pool = finished.empty() ? live : finished;
  if (pool.empty()) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i)
    if (detail::rank_score(pool[i], opt) > detail::rank_score(pool[best], opt)) best = i;
  return pool[best];
}

// Takes the most probable token at every step (smallest id on ties).
template <class StepFn>
Hypothesis greedy_search(StepFn&& step, const BeamOptions& opt) {
  if (opt.max_len == 0) throw UsageError("max_len must be at least 1");
  Hypothesis h;
  std::vector<int> prefix{opt.start};
  for (std::size_t t = 0; t < opt.max_len; ++t) {
    const std::vector<double> logp = step(std::span<const int>(prefix));
    int arg = -1;
    for (std::size_t v = 0; v < logp.size(); ++v) {
      const int tok = static_cast<int>(v);
      if (std::find(opt.banned.begin(), opt.banned.end(), tok) != opt.banned.end()) continue;
      if (arg < 0 || logp[v] > logp[static_cast<std::size_t>(arg)]) arg = tok;
    }
    if (arg < 0) break;
    h.score += logp[static_cast<std::size_t>(arg)];
    if (arg == opt.end) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(arg);
    prefix.push_back(arg);
  }
  return h;
}

inline std::vector<double> log_softmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  std::vector<double> out(v);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < v; ++k) mx = std::max(mx, static_cast<double>(logits.at(row, k)));
  double z = 0;
  for (std::size_t k = 0; k < v; ++k) z += std::exp(static_cast<double>(logits.at(row, k)) - mx);
  const double lz = mx + std::log(z);
  for (std::size_t k = 0; k < v; ++k) out[k] = static_cast<double>(logits.at(row, k)) - lz;
  return out;
}

// Step function decoding with a model over a fixed encoder memory.
inline auto model_step(const ModelParams& m, const EncoderMemory& mem) {
  return [&m, &mem](std::span<const int> prefix) {
    NoGradScope ng;
    const Tensor logits = decode_forward(mem, prefix, m, RunMode{});
    return log_softmax_row(logits, prefix.size() - 1);
  };
}

inline Hypothesis decode_sample(const ModelParams& m, const FeaturePair& s, const BeamOptions& opt) {
  NoGradScope ng;
  const EncoderMemory mem = encode(s.audio, s.video, s.frames(), m, RunMode{});
  return beam_search(model_step(m, mem), opt);
}

}  // namespace avf
