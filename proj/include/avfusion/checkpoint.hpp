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

// Model checkpoints and resumable training state.
//
// Checkpoint (.ckpt), all integers little-endian:
//   "AVFCKPT1\n"
//   header lines "key=value\n" describing the variant and every dimension,
//   terminated by "end\n"
//   u32 tensor count, then per tensor:
//     u32 path length, path bytes, u8 rank, u32 extent per axis,
//     float32 values in row-major order
//
// Training state (.state) stores the same tensors in float64 together with
// the Adam moments, the step counter and the number of completed epochs, so
// that a resumed run continues bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "avfusion/corpus.hpp"
#include "avfusion/model.hpp"
#include "avfusion/optim.hpp"

namespace avf {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string to_string(DualCombiner c) {
  return c == DualCombiner::Sum ? "sum" : "concat";
}

inline DualCombiner parse_dual_combiner(const std::string& s) {
  if (s == "sum") return DualCombiner::Sum;
  if (s == "concat") return DualCombiner::ConcatProjection;
  throw ConfigError("late combiner '" + s + "' is not one of sum|concat");
}

inline KeyValues describe_model(const ModelConfig& c, FusionSpec spec) {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto n = [](std::size_t v) { return std::to_string(v); };
  return {{"model.stage", to_string(spec.stage)},
          {"model.block", to_string(spec.block)},
          {"model.d_model", n(c.attention.d_model)},
          {"model.n_heads", n(c.attention.n_heads)},
          {"model.d_ff", n(c.d_ff)},
          {"model.n_premix_blocks", n(c.n_premix_blocks)},
          {"model.n_shared_blocks", n(c.n_shared_blocks)},
          {"model.n_separate_blocks", n(c.n_separate_blocks)},
          {"model.n_decoder_blocks", n(c.n_decoder_blocks)},
          {"model.vocab_size", n(c.vocab_size)},
          {"model.d_audio_in", n(c.d_audio_in)},
          {"model.d_video_in", n(c.d_video_in)},
          {"model.late_combiner", to_string(c.late_combiner)},
          {"model.late_audio_only", b(c.late_audio_only)},
          {"model.audio_only", b(c.audio_only)}};
}

namespace detail {

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || v.front() == '-') {
    throw ConfigError(key + " must be a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + " must be true or false, got '" + v + "'");
}

}  // namespace detail

// Inverse of describe_model for the keys present in `kv`; absent keys keep
// their current values.
inline void apply_model_keys(const std::map<std::string, std::string>& kv, ModelConfig& c,
                             FusionSpec& spec) {
  auto get = [&](const char* key, auto&& fn) {
    auto it = kv.find(key);
    if (it != kv.end()) fn(it->first, it->second);
  };
  using detail::parse_bool;
  using detail::parse_count;
  get("model.stage", [&](auto&, auto& v) { spec.stage = parse_fusion_stage(v); });
  get("model.block", [&](auto&, auto& v) { spec.block = parse_fusion_block(v); });
  get("model.d_model", [&](auto& k, auto& v) { c.attention.d_model = parse_count(k, v); });
  get("model.n_heads", [&](auto& k, auto& v) { c.attention.n_heads = parse_count(k, v); });
  get("model.d_ff", [&](auto& k, auto& v) { c.d_ff = parse_count(k, v); });
  get("model.n_premix_blocks", [&](auto& k, auto& v) { c.n_premix_blocks = parse_count(k, v); });
  get("model.n_shared_blocks", [&](auto& k, auto& v) { c.n_shared_blocks = parse_count(k, v); });
  get("model.n_separate_blocks", [&](auto& k, auto& v) { c.n_separate_blocks = parse_count(k, v); });
  get("model.n_decoder_blocks", [&](auto& k, auto& v) { c.n_decoder_blocks = parse_count(k, v); });
  get("model.vocab_size", [&](auto& k, auto& v) { c.vocab_size = parse_count(k, v); });
  get("model.d_audio_in", [&](auto& k, auto& v) { c.d_audio_in = parse_count(k, v); });
  get("model.d_video_in", [&](auto& k, auto& v) { c.d_video_in = parse_count(k, v); });
  get("model.late_combiner", [&](auto&, auto& v) { c.late_combiner = parse_dual_combiner(v); });
  get("model.late_audio_only", [&](auto& k, auto& v) { c.late_audio_only = parse_bool(k, v); });
  get("model.audio_only", [&](auto& k, auto& v) { c.audio_only = parse_bool(k, v); });
}

// The model plus what it needs from the data it was trained on: the
// output alphabet and the video codebook.
struct Checkpoint {
  ModelParams model;
  std::string alphabet;
  std::uint64_t codebook_seed = 1;
};

namespace detail {

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  std::string take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated");
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::string line() {
    auto end = bytes_.find('\n', pos_);
    if (end == std::string::npos) throw IoError(what_ + ": truncated header");
    std::string out = bytes_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return out;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    const std::string b = take(4);
    return get_u32(reinterpret_cast<const unsigned char*>(b.data()));
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (static_cast<std::uint64_t>(u32()) << 32);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& what() const { return what_; }

 private:
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void put_u64(std::string& buf, std::uint64_t v) {
  put_u32(buf, static_cast<std::uint32_t>(v));
  put_u32(buf, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "AVFCKPT1";
inline constexpr const char* kStateMagic = "AVFSTAT1";

inline std::string encode_checkpoint(const ModelParams& m, const CorpusConfig& data) {
  std::string buf = std::string(kCheckpointMagic) + "\n";
  for (const auto& [k, v] : describe_model(m.config, m.spec)) buf += k + "=" + v + "\n";
  buf += "corpus.alphabet=" + data.alphabet + "\n";
  buf += "corpus.codebook_seed=" + std::to_string(data.codebook_seed) + "\n";
  buf += "end\n";
  detail::put_u32(buf, static_cast<std::uint32_t>(m.store.size()));
  for (const auto& e : m.store.entries()) {
    detail::put_u32(buf, static_cast<std::uint32_t>(e.path.size()));
    buf += e.path;
    buf.push_back(static_cast<char>(e.tensor.rank()));
    for (std::size_t ext : e.tensor.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(ext));
    for (Real v : e.tensor.data())
      detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return buf;
}

inline Checkpoint decode_checkpoint(std::string bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(std::move(bytes), what);
  if (r.line() != kCheckpointMagic) throw IoError(what + ": not a checkpoint");
  std::map<std::string, std::string> kv;
  for (std::string line = r.line(); line != "end"; line = r.line()) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(what + ": malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ModelConfig cfg;
  FusionSpec spec;
  try {
    apply_model_keys(kv, cfg, spec);
  } catch (const ConfigError& e) {
    throw IoError(what + ": " + e.what());
  }
  Checkpoint ck;
  try {
    ck.alphabet = kv.at("corpus.alphabet");
    ck.codebook_seed = std::stoull(kv.at("corpus.codebook_seed"));
  } catch (const std::logic_error&) {
    throw IoError(what + ": missing or unparsable corpus keys");
  }
  ck.model = build_model(cfg, spec, 0);
  const std::uint32_t count = r.u32();
  if (count != ck.model.store.size()) {
    throw IoError(what + ": holds " + std::to_string(count) + " tensors, model has " +
                  std::to_string(ck.model.store.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string path = r.take(r.u32());
    if (!ck.model.store.contains(path)) throw IoError(what + ": unknown tensor '" + path + "'");
    Tensor t = ck.model.store.get(path);
    const unsigned rank = r.u8();
    Shape shape;
    for (unsigned a = 0; a < rank; ++a) shape.push_back(r.u32());
    if (shape != t.shape()) throw IoError(what + ": shape mismatch for '" + path + "'");
    for (Real& v : t.mutable_data()) v = static_cast<Real>(r.f32());
  }
  if (!r.done()) throw IoError(what + ": trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& m,
                            const CorpusConfig& data) {
  detail::write_file(path, encode_checkpoint(m, data));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

inline void save_train_state(const std::filesystem::path& path, const ModelParams& m, Adam& adam,
                             std::size_t epochs_done) {
  std::string buf = std::string(kStateMagic) + "\n";
  detail::put_u64(buf, epochs_done);
  detail::put_u64(buf, adam.steps());
  detail::put_u64(buf, m.store.size());
  for (std::size_t k = 0; k < m.store.size(); ++k) {
    const auto& e = m.store.entries()[k];
    detail::put_u32(buf, static_cast<std::uint32_t>(e.path.size()));
    buf += e.path;
    detail::put_u64(buf, e.tensor.size());
    for (Real v : e.tensor.data()) detail::put_f64(buf, v);
    for (Real v : adam.first_moments()[k]) detail::put_f64(buf, v);
    for (Real v : adam.second_moments()[k]) detail::put_f64(buf, v);
  }
  detail::write_file(path, buf);
}

// Restores parameters and optimizer moments into an already built model;
// returns the number of completed epochs.
inline std::size_t load_train_state(const std::filesystem::path& path, ModelParams& m, Adam& adam) {
  detail::ByteReader r(detail::read_file(path), path.string());
  if (r.line() != kStateMagic) throw IoError(path.string() + ": not a training state");
  const std::size_t epochs_done = r.u64();
  const std::size_t steps = r.u64();
  if (r.u64() != m.store.size()) throw StateError(path.string() + ": tensor count differs");
  for (std::size_t k = 0; k < m.store.size(); ++k) {
    Tensor t = m.store.entries()[k].tensor;
    const std::string p = r.take(r.u32());
    if (p != m.store.entries()[k].path || r.u64() != t.size()) {
      throw StateError(path.string() + ": layout differs at '" + m.store.entries()[k].path + "'");
    }
    for (Real& v : t.mutable_data()) v = static_cast<Real>(r.f64());
    for (Real& v : adam.first_moments()[k]) v = static_cast<Real>(r.f64());
    for (Real& v : adam.second_moments()[k]) v = static_cast<Real>(r.f64());
  }
  if (!r.done()) throw IoError(path.string() + ": trailing bytes");
  adam.set_steps(steps);
  return epochs_done;
}

}  // namespace avf
