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

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "avfusion/tensor.hpp"

namespace avf {

struct LossSum {
  Tensor total;       // scalar sum of per-position losses
  std::size_t count;  // number of positions summed
};

// Label-smoothed cross-entropy summed over rows [0, valid_rows) of
// logits[t x V]:
//   -(1 - eps) log p(target) - eps / (V - 1) * sum_{k != target} log p(k)
// Rows at or beyond valid_rows (padding) contribute nothing.
inline LossSum label_smoothed_ce_sum(const Tensor& logits, std::span<const int> targets,
                                     Real eps, std::size_t valid_rows) {
  detail::require_rank2(logits, "label_smoothed_ce");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (!(eps >= Real{0} && eps < Real{1})) {
    throw UsageError("label smoothing must lie in [0, 1), got " + std::to_string(eps));
  }
  if (vocab < 2) throw UsageError("label smoothing needs at least two classes");
  if (valid_rows > rows || targets.size() < valid_rows) {
    throw DimensionError("loss over " + std::to_string(valid_rows) + " rows of " +
                         std::to_string(rows) + " with " + std::to_string(targets.size()) +
                         " targets");
  }
  for (std::size_t r = 0; r < valid_rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw UsageError("target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  const Real off = eps / static_cast<Real>(vocab - 1);
  const Real on = Real{1} - eps;
  std::vector<Real> probs(valid_rows * vocab);
  std::vector<int> tgt(targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(valid_rows));
  Real total = 0;
  auto x = logits.data();
  for (std::size_t r = 0; r < valid_rows; ++r) {
    const Real* row = x.data() + r * vocab;
    Real mx = row[0];
    for (std::size_t k = 1; k < vocab; ++k) mx = std::max(mx, row[k]);
    Real z = 0;
    for (std::size_t k = 0; k < vocab; ++k) z += std::exp(row[k] - mx);
    const Real log_z = mx + std::log(z);
    Real loss = 0;
    for (std::size_t k = 0; k < vocab; ++k) {
      const Real logp = row[k] - log_z;
      probs[r * vocab + k] = std::exp(logp);
      loss -= (static_cast<int>(k) == tgt[r] ? on : off) * logp;
    }
    total += loss;
  }
  Tensor out = Tensor::scalar(total);
  if (detail::tracking({&logits})) {
    TensorNode* ln = logits.node().get();
    TensorNode* on_node = out.node().get();
    detail::record({&logits}, out, [=, probs = std::move(probs), tgt = std::move(tgt)] {
      auto g = ln->ensure_grad();
      const Real up = on_node->grad[0];
      for (std::size_t r = 0; r < valid_rows; ++r) {
        for (std::size_t k = 0; k < vocab; ++k) {
          const Real q = static_cast<int>(k) == tgt[r] ? on : off;
          g[r * vocab + k] += up * (probs[r * vocab + k] - q);
        }
      }
    });
  }
  return {out, valid_rows};
}

// Mean label-smoothed cross-entropy over the non-padded rows.
inline Tensor label_smoothed_ce(const Tensor& logits, std::span<const int> targets, Real eps,
                                std::size_t valid_rows) {
  if (valid_rows == 0) throw UsageError("loss over zero positions");
  LossSum s = label_smoothed_ce_sum(logits, targets, eps, valid_rows);
  return scale(s.total, Real{1} / static_cast<Real>(s.count));
}

inline Tensor label_smoothed_ce(const Tensor& logits, std::span<const int> targets, Real eps) {
  return label_smoothed_ce(logits, targets, eps, logits.rows());
}

// Minimum attainable smoothed loss: reached when the predicted distribution
// equals the smoothed target distribution.
inline double label_smoothing_floor(double eps, std::size_t vocab) {
  const double off = eps / static_cast<double>(vocab - 1);
  double h = 0;
  if (eps < 1.0) h -= (1.0 - eps) * std::log(1.0 - eps);
  if (eps > 0.0) h -= eps * std::log(off);
  return h;
}

}  // namespace avf
