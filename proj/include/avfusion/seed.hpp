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

// Labeled seed derivation. Every random stream in the project is obtained as
// make_rng(root, "component", index...), so there is no global generator and
// parallel work reproduces serial results bit-exactly.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace avf {

using Rng = std::mt19937_64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

inline std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                 std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t s = detail::splitmix64(root ^ detail::splitmix64(hash_label(label)));
  for (std::uint64_t i : indices) s = detail::splitmix64(s ^ detail::splitmix64(i + 1));
  return s;
}

inline Rng make_rng(std::uint64_t root, std::string_view label,
                    std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(derive_seed(root, label, indices));
}

// Signed values (SNRs) enter derivations through this mapping.
inline std::uint64_t seed_index(long long v) { return static_cast<std::uint64_t>(v); }

}  // namespace avf
