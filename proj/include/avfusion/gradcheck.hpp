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

// Finite-difference verification of the reverse-mode gradients of a whole
// model, one report line per parameter tensor.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "avfusion/model.hpp"

namespace avf {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-4;  // denominator floor for near-zero gradients
  Real label_smoothing = Real(0.1);
  std::uint64_t seed = 0;
};

struct GroupCheck {
  std::string path;
  std::size_t elements = 0;
  double max_rel_error = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::string name;
  std::vector<GroupCheck> groups;

  bool passed() const {
    return std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.passed; });
  }
  double worst() const {
    double w = 0;
    for (const auto& g : groups) w = std::max(w, g.max_rel_error);
    return w;
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& g : groups)
      if (!g.passed) out.push_back(g.path);
    return out;
  }
};

// Small enough to difference every parameter in well under a second.
inline ModelConfig gradcheck_config() {
  ModelConfig c;
  c.attention = {8, 2};
  c.d_ff = 16;
  c.n_premix_blocks = 1;
  c.n_shared_blocks = 1;
  c.n_decoder_blocks = 1;
  c.vocab_size = 7;
  c.d_audio_in = 6;
  c.d_video_in = 5;
  return c;
}

// Two random samples of different lengths so that padding is exercised.
inline std::vector<FeaturePair> gradcheck_samples(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed, "gradcheck.samples");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> token(Vocabulary::kFirstSymbol,
                                           static_cast<int>(cfg.vocab_size) - 1);
  std::vector<FeaturePair> out;
  const std::size_t frames[] = {5, 3};
  const std::size_t tokens[] = {2, 3};
  for (std::size_t i = 0; i < 2; ++i) {
    FeaturePair p;
    p.id = "gc" + std::to_string(i);
    p.audio = Tensor({frames[i], cfg.d_audio_in});
    p.video = Tensor({frames[i], cfg.d_video_in});
    for (Real& v : p.audio.mutable_data()) v = normal(rng);
    for (Real& v : p.video.mutable_data()) v = normal(rng);
    for (std::size_t k = 0; k < tokens[i]; ++k) p.transcript.push_back(token(rng));
    out.push_back(std::move(p));
  }
  return out;
}

using ModelLoss = std::function<Tensor(const ModelParams&)>;

// Compares the tape gradient of `loss` against central differences for every
// element of every parameter tensor of `m`.
inline GradcheckReport check_gradients(const ModelParams& m, const ModelLoss& loss,
                                       const GradcheckOptions& opt = {}) {
  GradcheckReport report;
  report.name = m.spec.name();
  {
    Tape tape;
    TapeScope scope(tape);
    for (const auto& e : m.store.entries()) {
      Tensor t = e.tensor;
      t.zero_grad();
    }
    Tensor l = loss(m);
    tape.backward(l);
  }
  auto evaluate = [&] {
    NoGradScope scope;
    return static_cast<double>(loss(m).item());
  };
  for (const auto& entry : m.store.entries()) {
    Tensor t = entry.tensor;
    GroupCheck g;
    g.path = entry.path;
    g.elements = t.size();
    const std::vector<Real> analytic = t.has_grad()
                                           ? std::vector<Real>(t.grad().begin(), t.grad().end())
                                           : std::vector<Real>(t.size(), Real{0});
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Real saved = data[i];
      data[i] = saved + static_cast<Real>(opt.step);
      const double up = evaluate();
      data[i] = saved - static_cast<Real>(opt.step);
      const double down = evaluate();
      data[i] = saved;
      const double numeric = (up - down) / (2 * opt.step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      g.max_rel_error = std::max(g.max_rel_error, std::abs(a - numeric) / denom);
    }
    g.passed = g.max_rel_error < opt.tolerance;
    report.groups.push_back(std::move(g));
  }
  return report;
}

// Tiny model of the given variant, label-smoothed loss over a padded batch.
inline GradcheckReport gradcheck_spec(FusionSpec spec, const GradcheckOptions& opt = {},
                                      const ModelConfig& cfg = gradcheck_config()) {
  ModelParams m = build_model(cfg, spec, opt.seed);
  const std::vector<FeaturePair> samples = gradcheck_samples(cfg, opt.seed);
  const Batch batch = make_batch(samples);
  const Real eps = opt.label_smoothing;
  return check_gradients(
      m, [&](const ModelParams& p) { return forward_loss(batch, p, eps, RunMode{}); }, opt);
}

}  // namespace avf
