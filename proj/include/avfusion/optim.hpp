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
#include <vector>

#include "avfusion/params.hpp"

namespace avf {

struct AdamConfig {
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.98);
  Real eps = Real(1e-9);
};

// Adam with bias correction. Moment buffers mirror the parameter store entry
// by entry; parameters without a gradient buffer contribute a zero gradient.
class Adam {
 public:
  explicit Adam(const ParamStore& params, AdamConfig config = {}) : config_(config) {
    for (const auto& e : params.entries()) {
      paths_.push_back(e.path);
      first_.emplace_back(e.tensor.size(), Real{0});
      second_.emplace_back(e.tensor.size(), Real{0});
    }
  }

  void step(ParamStore& params, Real lr) {
    check_layout(params);
    ++steps_;
    const Real t = static_cast<Real>(steps_);
    const Real c1 = Real{1} - std::pow(config_.beta1, t);
    const Real c2 = Real{1} - std::pow(config_.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor w = params.entries()[k].tensor;
      auto value = w.mutable_data();
      const bool has_grad = w.has_grad();
      auto grad = w.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const Real g = has_grad ? grad[i] : Real{0};
        m[i] = config_.beta1 * m[i] + (Real{1} - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (Real{1} - config_.beta2) * g * g;
        const Real m_hat = m[i] / c1;
        const Real v_hat = v[i] / c2;
        value[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }

  // Raw state access for training-state snapshots.
  std::vector<std::vector<Real>>& first_moments() { return first_; }
  std::vector<std::vector<Real>>& second_moments() { return second_; }
  void set_steps(std::size_t n) { steps_ = n; }

 private:
  void check_layout(const ParamStore& params) const {
    if (params.size() != paths_.size()) {
      throw StateError("optimizer state tracks " + std::to_string(paths_.size()) +
                       " tensors, store has " + std::to_string(params.size()));
    }
    for (std::size_t k = 0; k < paths_.size(); ++k) {
      const auto& e = params.entries()[k];
      if (e.path != paths_[k] || e.tensor.size() != first_[k].size() ||
          second_[k].size() != first_[k].size()) {
        throw StateError("optimizer state does not match parameter " + e.path);
      }
    }
  }

  AdamConfig config_;
  std::size_t steps_ = 0;
  std::vector<std::string> paths_;
  std::vector<std::vector<Real>> first_;
  std::vector<std::vector<Real>> second_;
};

// Scales all gradients so that their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
inline Real clip_grad_norm(ParamStore& params, Real max_norm) {
  Real total = 0;
  for (const auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (Real g : e.tensor.grad()) total += g * g;
  }
  const Real norm = std::sqrt(total);
  if (max_norm > Real{0} && norm > max_norm) {
    const Real f = max_norm / norm;
    for (const auto& e : params.entries()) {
      Tensor t = e.tensor;
      if (!t.has_grad()) continue;
      for (Real& g : t.mutable_grad()) g *= f;
    }
  }
  return norm;
}

}  // namespace avf
