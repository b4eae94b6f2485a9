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

#include <span>
#include <string>
#include <vector>

#include "avfusion/errors.hpp"

namespace avf {

// Character vocabulary: ids 0..2 are pad/sos/eos, the alphabet follows.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kFirstSymbol = 3;

  Vocabulary() = default;
  explicit Vocabulary(std::string alphabet) : alphabet_(std::move(alphabet)) {
    if (alphabet_.size() < 2) throw ConfigError("alphabet needs at least two symbols");
    for (std::size_t i = 0; i < alphabet_.size(); ++i)
      for (std::size_t j = i + 1; j < alphabet_.size(); ++j)
        if (alphabet_[i] == alphabet_[j]) throw ConfigError("alphabet repeats '" + std::string(1, alphabet_[i]) + "'");
  }

  const std::string& alphabet() const { return alphabet_; }
  std::size_t size() const { return alphabet_.size() + kFirstSymbol; }
  std::size_t symbols() const { return alphabet_.size(); }

  int id(char c) const {
    auto pos = alphabet_.find(c);
    if (pos == std::string::npos) throw UsageError(std::string("symbol '") + c + "' not in alphabet");
    return static_cast<int>(pos) + kFirstSymbol;
  }
  char symbol(int id) const {
    if (id < kFirstSymbol || static_cast<std::size_t>(id - kFirstSymbol) >= alphabet_.size()) {
      throw UsageError("id " + std::to_string(id) + " is not an alphabet symbol");
    }
    return alphabet_[static_cast<std::size_t>(id - kFirstSymbol)];
  }
  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (char c : text) ids.push_back(id(c));
    return ids;
  }
  std::string decode(std::span<const int> ids) const {
    std::string s;
    for (int i : ids) s += symbol(i);
    return s;
  }

 private:
  std::string alphabet_ = "abcdefgh";
};

}  // namespace avf
