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
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "avfusion/params.hpp"
#include "avfusion/seed.hpp"
#include "avfusion/tensor.hpp"

namespace avf {

struct AttentionConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw DimensionError("d_model (" + std::to_string(d_model) +
                           ") must be a positive multiple of n_heads (" +
                           std::to_string(n_heads) + ")");
    }
  }
};

// Boolean [queries x keys] matrix; true means attending is allowed.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t queries, std::size_t keys, bool allowed = true)
      : queries_(queries), keys_(keys), allowed_(queries * keys, allowed ? 1 : 0) {}

  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }
  bool allowed(std::size_t q, std::size_t k) const { return allowed_[q * keys_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool value) { allowed_[q * keys_ + k] = value ? 1 : 0; }
  std::span<const std::uint8_t> bytes() const { return allowed_; }

  Mask operator&(const Mask& other) const {
    if (other.queries_ != queries_ || other.keys_ != keys_) {
      throw DimensionError("cannot combine masks of different shapes");
    }
    Mask out(queries_, keys_);
    for (std::size_t i = 0; i < allowed_.size(); ++i)
      out.allowed_[i] = allowed_[i] & other.allowed_[i];
    return out;
  }

  bool operator==(const Mask&) const = default;

 private:
  std::size_t queries_ = 0;
  std::size_t keys_ = 0;
  std::vector<std::uint8_t> allowed_;
};

inline Mask make_causal_mask(std::size_t t) {
  if (t == 0) throw DimensionError("causal mask needs t >= 1");
  Mask m(t, t, false);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

// Every query may attend only to the first `valid_keys` keys.
inline Mask key_padding_mask(std::size_t queries, std::size_t keys, std::size_t valid_keys) {
  if (valid_keys > keys) {
    throw DimensionError("length " + std::to_string(valid_keys) + " exceeds " +
                         std::to_string(keys) + " positions");
  }
  Mask m(queries, keys, false);
  for (std::size_t q = 0; q < queries; ++q)
    for (std::size_t k = 0; k < valid_keys; ++k) m.set(q, k, true);
  return m;
}

// One square [max_len x max_len] self-attention mask per sequence length.
inline std::vector<Mask> make_padding_mask(std::span<const std::size_t> lengths,
                                           std::size_t max_len) {
  std::vector<Mask> masks;
  masks.reserve(lengths.size());
  for (std::size_t len : lengths) masks.push_back(key_padding_mask(max_len, max_len, len));
  return masks;
}

struct AttentionResult {
  Tensor out;
  Tensor weights;
};

// weights = softmax(Q K^T / sqrt(d)) restricted to the mask; out = weights V.
inline AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const Mask* mask = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention operands must be matrices");
  }
  if (q.cols() != k.cols()) {
    throw DimensionError("query width " + std::to_string(q.cols()) +
                         " differs from key width " + std::to_string(k.cols()));
  }
  if (k.rows() != v.rows()) throw DimensionError("key and value row counts differ");
  const std::size_t tq = q.rows(), tk = k.rows();
  Mask full;
  if (mask == nullptr) {
    full = Mask(tq, tk, true);
    mask = &full;
  }
  if (mask->queries() != tq || mask->keys() != tk) {
    throw DimensionError("mask is " + std::to_string(mask->queries()) + "x" +
                         std::to_string(mask->keys()) + ", scores are " +
                         std::to_string(tq) + "x" + std::to_string(tk));
  }
  for (std::size_t i = 0; i < tq; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < tk && !any; ++j) any = mask->allowed(i, j);
    if (!any) throw MaskingError("query row " + std::to_string(i) + " has no allowed key");
  }
  const Real inv_sqrt_d = Real{1} / std::sqrt(static_cast<Real>(q.cols()));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Tensor weights = masked_softmax(scores, mask->bytes());
  return {matmul(weights, v), weights};
}

struct LinearParams {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct MhaParams {
  LinearParams query, key, value, output;
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  LinearParams in, out;
};

struct EncoderBlockParams {
  MhaParams self_attn;
  LayerNormParams norm1;
  FeedForwardParams ffn;
  LayerNormParams norm2;
};

inline Tensor apply(const LinearParams& p, const Tensor& x) {
  return linear(x, p.weight, p.bias);
}

inline LinearParams make_linear(ParamStore& store, const std::string& prefix,
                                std::size_t in, std::size_t out, Rng& rng) {
  LinearParams p{store.add(prefix + ".weight", {in, out}), store.add(prefix + ".bias", {out})};
  xavier_uniform(p.weight, in, out, rng);
  return p;
}

inline MhaParams make_mha(ParamStore& store, const std::string& prefix, std::size_t d_model,
                          Rng& rng) {
  MhaParams p;
  p.query = make_linear(store, prefix + ".query", d_model, d_model, rng);
  p.key = make_linear(store, prefix + ".key", d_model, d_model, rng);
  p.value = make_linear(store, prefix + ".value", d_model, d_model, rng);
  p.output = make_linear(store, prefix + ".output", d_model, d_model, rng);
  return p;
}

inline LayerNormParams make_layer_norm(ParamStore& store, const std::string& prefix,
                                       std::size_t d) {
  LayerNormParams p{store.add(prefix + ".gain", {d}), store.add(prefix + ".bias", {d})};
  fill(p.gain, Real{1});
  return p;
}

inline FeedForwardParams make_ffn(ParamStore& store, const std::string& prefix,
                                  std::size_t d_model, std::size_t d_ff, Rng& rng) {
  return {make_linear(store, prefix + ".in", d_model, d_ff, rng),
          make_linear(store, prefix + ".out", d_ff, d_model, rng)};
}

inline EncoderBlockParams make_encoder_block(ParamStore& store, const std::string& prefix,
                                             std::size_t d_model, std::size_t d_ff, Rng& rng) {
  EncoderBlockParams p;
  p.self_attn = make_mha(store, prefix + ".self_attn", d_model, rng);
  p.norm1 = make_layer_norm(store, prefix + ".norm1", d_model);
  p.ffn = make_ffn(store, prefix + ".ffn", d_model, d_ff, rng);
  p.norm2 = make_layer_norm(store, prefix + ".norm2", d_model);
  return p;
}

// Per-forward settings shared by every block: dropout is active only when
// `training` is set and an RNG is supplied.
struct RunMode {
  bool training = false;
  Real dropout = Real{0};
  Rng* rng = nullptr;
  Real layer_norm_eps = Real(1e-5);

  Tensor drop(const Tensor& x) const {
    if (!training || rng == nullptr) return x;
    return avf::dropout(x, dropout, true, *rng);
  }
};

// Per-head attention over column slices of the projected inputs, heads
// concatenated, then the output projection.
inline Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const MhaParams& p,
                                   const AttentionConfig& cfg, const Mask* mask = nullptr) {
  cfg.validate();
  if (x_q.cols() != cfg.d_model || x_kv.cols() != cfg.d_model ||
      p.query.weight.shape() != Shape{cfg.d_model, cfg.d_model}) {
    throw DimensionError("multi-head attention expects width " + std::to_string(cfg.d_model));
  }
  const Tensor q = apply(p.query, x_q);
  const Tensor k = apply(p.key, x_kv);
  const Tensor v = apply(p.value, x_kv);
  const std::size_t dh = cfg.d_head();
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t b = h * dh, e = b + dh;
    if (cfg.n_heads == 1) {
      heads.push_back(scaled_dot_attention(q, k, v, mask).out);
    } else {
      heads.push_back(scaled_dot_attention(slice_cols(q, b, e), slice_cols(k, b, e),
                                           slice_cols(v, b, e), mask)
                          .out);
    }
  }
  const Tensor merged = cfg.n_heads == 1 ? heads.front() : concat_cols(heads);
  return apply(p.output, merged);
}

inline Tensor feed_forward(const FeedForwardParams& p, const Tensor& x) {
  return apply(p.out, relu(apply(p.in, x)));
}

// Post-norm block: LN(x + MHA(x)) then LN(h + FFN(h)).
inline Tensor encoder_block(const Tensor& x, const EncoderBlockParams& p,
                            const AttentionConfig& cfg, const Mask& pad_mask,
                            const RunMode& mode) {
  Tensor h = add(x, mode.drop(multi_head_attention(x, x, p.self_attn, cfg, &pad_mask)));
  h = layer_norm(h, p.norm1.gain, p.norm1.bias, mode.layer_norm_eps);
  Tensor y = add(h, mode.drop(feed_forward(p.ffn, h)));
  return layer_norm(y, p.norm2.gain, p.norm2.bias, mode.layer_norm_eps);
}

// Fixed sinusoidal position table [t x d].
inline Tensor sinusoidal_positions(std::size_t t, std::size_t d) {
  Tensor pe({t, d});
  for (std::size_t pos = 0; pos < t; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe.at(pos, i) = static_cast<Real>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

}  // namespace avf
