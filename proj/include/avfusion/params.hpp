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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "avfusion/tensor.hpp"

namespace avf {

// Ordered collection of named learnable tensors. Paths are unique dotted
// layer names ("encoder.audio.0.self_attn.query.weight"); registration order
// fixes the on-disk and optimizer order.
class ParamStore {
 public:
  struct Entry {
    std::string path;
    Tensor tensor;
  };

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Tensor add(const std::string& path, Shape shape) {
    if (index_.count(path)) throw UsageError("duplicate parameter path " + path);
    Tensor t(std::move(shape), /*requires_grad=*/true);
    index_.emplace(path, entries_.size());
    entries_.push_back({path, t});
    return t;
  }

  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  const Tensor& get(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw UsageError("unknown parameter path " + path);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  std::size_t parameter_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.path.rfind(prefix, 0) == 0) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Copies values from another store with identical paths and shapes.
  void copy_values_from(const ParamStore& other) {
    if (other.size() != size()) throw StateError("parameter stores differ in size");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries_[i];
      auto& dst = entries_[i];
      if (src.path != dst.path || src.tensor.shape() != dst.tensor.shape()) {
        throw StateError("parameter mismatch at " + dst.path);
      }
      std::copy(src.tensor.data().begin(), src.tensor.data().end(),
                dst.tensor.mutable_data().begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <class Rng>
void xavier_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  for (Real& v : t.mutable_data()) v = static_cast<Real>(dist(rng));
}

inline void fill(Tensor& t, Real value) {
  std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
}

}  // namespace avf
