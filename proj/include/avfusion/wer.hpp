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
#include <cstddef>
#include <span>
#include <vector>

#include "avfusion/errors.hpp"

namespace avf {

// Minimum number of unit-cost substitutions, deletions and insertions
// turning `ref` into `hyp`.
template <class T>
std::size_t edit_distance(std::span<const T> ref, std::span<const T> hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

template <class T>
double wer(std::span<const T> ref, std::span<const T> hyp) {
  if (ref.empty()) throw UsageError("word error rate needs a nonempty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

inline double wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  return wer(std::span<const int>(ref), std::span<const int>(hyp));
}

}  // namespace avf
