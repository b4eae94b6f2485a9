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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "avfusion/attention.hpp"
#include "test_util.hpp"

namespace avf {
namespace {

using testing::eval_no_grad;
using testing::finite_difference;
using testing::max_relative_error;
using testing::random_tensor;
using testing::run_backward;

// Plain-loop reference: softmax(q k^T / sqrt(d)) v with masked keys skipped.
std::vector<double> attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const Mask* mask = nullptr) {
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols(), dv = v.cols();
  std::vector<double> out(tq * dv, 0.0);
  for (std::size_t i = 0; i < tq; ++i) {
    std::vector<double> w(tk, 0.0);
    double mx = -1e300;
    for (std::size_t j = 0; j < tk; ++j) {
      if (mask && !mask->allowed(i, j)) continue;
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += q.at(i, c) * k.at(j, c);
      w[j] = s / std::sqrt(double(d));
      mx = std::max(mx, w[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < tk; ++j) {
      if (mask && !mask->allowed(i, j)) {
        w[j] = 0;
        continue;
      }
      w[j] = std::exp(w[j] - mx);
      z += w[j];
    }
    for (std::size_t j = 0; j < tk; ++j)
      for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += w[j] / z * v.at(j, c);
  }
  return out;
}

std::vector<double> linear_oracle(const Tensor& x, const LinearParams& p) {
  const std::size_t m = x.rows(), k = x.cols(), n = p.weight.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = p.bias[j];
      for (std::size_t c = 0; c < k; ++c) acc += x.at(i, c) * p.weight.at(c, j);
      out[i * n + j] = acc;
    }
  return out;
}

Tensor to_tensor(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return Tensor({rows, cols}, std::vector<Real>(v.begin(), v.end()));
}

void randomize(ParamStore& store, std::mt19937_64& rng, double lo = -0.5, double hi = 0.5) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (const auto& e : store.entries()) {
    Tensor t = e.tensor;
    for (Real& v : t.mutable_data()) v = u(rng);
  }
}

TEST(ScaledDotAttention, IdenticalKeysGiveUniformWeights) {
  std::mt19937_64 rng(1);
  Tensor q = random_tensor({2, 4}, rng);
  Tensor k = Tensor::filled({3, 4}, 0.3);
  Tensor v = random_tensor({3, 2}, rng);
  auto r = scaled_dot_attention(q, k, v);
  for (Real w : r.weights.data()) EXPECT_NEAR(w, 1.0 / 3.0, 1e-15);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 2; ++c)
      EXPECT_NEAR(r.out.at(i, c), (v.at(0, c) + v.at(1, c) + v.at(2, c)) / 3.0, 1e-15);
}

TEST(ScaledDotAttention, MaskedKeyHasExactlyZeroWeight) {
  std::mt19937_64 rng(2);
  Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
  Mask m(3, 3, true);
  for (std::size_t i = 0; i < 3; ++i) m.set(i, 1, false);
  auto r = scaled_dot_attention(q, k, v, &m);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.weights.at(i, 1), 0.0);
}

TEST(ScaledDotAttention, RandomMatchesLoopOracle) {
  std::mt19937_64 rng(3);
  Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
  auto r = scaled_dot_attention(q, k, v);
  auto expect = attention_oracle(q, k, v);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(r.out[i], expect[i], 1e-12);

  Mask causal = make_causal_mask(3);
  auto rm = scaled_dot_attention(q, k, v, &causal);
  auto em = attention_oracle(q, k, v, &causal);
  for (std::size_t i = 0; i < em.size(); ++i) EXPECT_NEAR(rm.out[i], em[i], 1e-12);
}

TEST(ScaledDotAttention, FullyMaskedRowIsMaskingError) {
  Tensor q({2, 4}), k({2, 4}), v({2, 4});
  Mask m(2, 2, true);
  m.set(1, 0, false);
  m.set(1, 1, false);
  EXPECT_THROW(scaled_dot_attention(q, k, v, &m), MaskingError);
  EXPECT_THROW(scaled_dot_attention(q, Tensor({2, 3}), v), DimensionError);
}

TEST(ScaledDotAttention, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  Tensor q = random_tensor({3, 4}, rng, true), k = random_tensor({5, 4}, rng, true),
         v = random_tensor({5, 2}, rng, true), w = random_tensor({3, 2}, rng);
  Mask m = key_padding_mask(3, 5, 4);
  auto loss = [&] { return sum(mul(scaled_dot_attention(q, k, v, &m).out, w)); };
  run_backward(loss);
  auto f = [&] { return eval_no_grad(loss); };
  for (Tensor* t : {&q, &k, &v}) EXPECT_LT(max_relative_error(t->grad(), finite_difference(*t, f)), 1e-6);
  // keys beyond the valid length receive exactly zero gradient
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(k.grad()[4 * 4 + c], 0.0);
}

TEST(Masks, PaddingMaskAllowsOnlyValidKeys) {
  const std::size_t lengths[] = {2};
  auto masks = make_padding_mask(lengths, 3);
  ASSERT_EQ(masks.size(), 1u);
  for (std::size_t q = 0; q < 3; ++q) {
    EXPECT_TRUE(masks[0].allowed(q, 0));
    EXPECT_TRUE(masks[0].allowed(q, 1));
    EXPECT_FALSE(masks[0].allowed(q, 2));
  }
  const std::size_t too_long[] = {4};
  EXPECT_THROW(make_padding_mask(too_long, 3), DimensionError);
}

TEST(Masks, CausalIsLowerTriangular) {
  Mask m = make_causal_mask(3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.allowed(i, j), j <= i);
  EXPECT_THROW(make_causal_mask(0), DimensionError);
}

TEST(Masks, CausalAndPaddingCompositionMatchesEnumeration) {
  for (std::size_t t = 1; t <= 6; ++t) {
    for (std::size_t len = 1; len <= t; ++len) {
      Mask m = make_causal_mask(t) & key_padding_mask(t, t, len);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) EXPECT_EQ(m.allowed(i, j), j <= i && j < len);
    }
  }
}

TEST(MultiHeadAttention, ParameterCount) {
  for (std::size_t d : {8u, 16u, 64u}) {
    ParamStore store;
    Rng rng(0);
    make_mha(store, "mha", d, rng);
    EXPECT_EQ(store.parameter_count(), 4 * d * d + 4 * d);
  }
}

TEST(MultiHeadAttention, SingleHeadEqualsProjectedAttention) {
  std::mt19937_64 rng(5);
  ParamStore store;
  Rng init(1);
  MhaParams p = make_mha(store, "mha", 6, init);
  randomize(store, rng);
  Tensor xq = random_tensor({3, 6}, rng), xkv = random_tensor({4, 6}, rng);
  Tensor out = multi_head_attention(xq, xkv, p, {6, 1});
  Tensor q = to_tensor(linear_oracle(xq, p.query), 3, 6);
  Tensor k = to_tensor(linear_oracle(xkv, p.key), 4, 6);
  Tensor v = to_tensor(linear_oracle(xkv, p.value), 4, 6);
  Tensor heads = to_tensor(attention_oracle(q, k, v), 3, 6);
  auto expect = linear_oracle(heads, p.output);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(MultiHeadAttention, ZeroValuesGiveZeroOutput) {
  std::mt19937_64 rng(6);
  ParamStore store;
  Rng init(2);
  MhaParams p = make_mha(store, "mha", 8, init);
  Tensor xq = random_tensor({3, 8}, rng);
  Tensor out = multi_head_attention(xq, Tensor({5, 8}), p, {8, 2});
  for (Real v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(MultiHeadAttention, TwoHeadsMatchPerHeadLoopOracle) {
  std::mt19937_64 rng(7);
  ParamStore store;
  Rng init(3);
  MhaParams p = make_mha(store, "mha", 4, init);
  randomize(store, rng);
  Tensor xq = random_tensor({3, 4}, rng), xkv = random_tensor({3, 4}, rng);
  Mask m = key_padding_mask(3, 3, 2);
  Tensor out = multi_head_attention(xq, xkv, p, {4, 2}, &m);

  auto q = linear_oracle(xq, p.query), k = linear_oracle(xkv, p.key), v = linear_oracle(xkv, p.value);
  std::vector<double> merged(3 * 4);
  for (std::size_t h = 0; h < 2; ++h) {
    Tensor qh({3, 2}), kh({3, 2}), vh({3, 2});
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 2; ++c) {
        qh.at(r, c) = q[r * 4 + h * 2 + c];
        kh.at(r, c) = k[r * 4 + h * 2 + c];
        vh.at(r, c) = v[r * 4 + h * 2 + c];
      }
    auto oh = attention_oracle(qh, kh, vh, &m);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 2; ++c) merged[r * 4 + h * 2 + c] = oh[r * 2 + c];
  }
  auto expect = linear_oracle(to_tensor(merged, 3, 4), p.output);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(MultiHeadAttention, ConfigMismatchIsDimensionError) {
  ParamStore store;
  Rng init(0);
  MhaParams p = make_mha(store, "mha", 8, init);
  EXPECT_THROW(multi_head_attention(Tensor({2, 8}), Tensor({2, 8}), p, {8, 3}), DimensionError);
  EXPECT_THROW(multi_head_attention(Tensor({2, 6}), Tensor({2, 8}), p, {8, 2}), DimensionError);
}

TEST(EncoderBlock, PreservesShape) {
  ParamStore store;
  Rng init(4);
  auto p = make_encoder_block(store, "block", 8, 16, init);
  for (std::size_t t : {1u, 2u, 7u}) {
    Tensor x({t, 8});
    Tensor y = encoder_block(x, p, {8, 2}, key_padding_mask(t, t, t), RunMode{});
    EXPECT_EQ(y.shape(), x.shape());
  }
}

TEST(EncoderBlock, ZeroWeightsReduceToDoubleLayerNorm) {
  ParamStore store;
  Rng init(5);
  auto p = make_encoder_block(store, "block", 6, 12, init);
  for (const auto& e : store.entries()) {
    if (e.path.find(".gain") != std::string::npos) continue;
    Tensor t = e.tensor;
    fill(t, 0);
  }
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({4, 6}, rng, false, -2, 2);
  RunMode mode;
  Tensor y = encoder_block(x, p, {6, 2}, key_padding_mask(4, 4, 4), mode);
  auto normalize = [&](std::vector<double> row) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= row.size();
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (double& v : row) v = (v - mu) / std::sqrt(var + mode.layer_norm_eps);
    return row;
  };
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> row(x.data().begin() + r * 6, x.data().begin() + (r + 1) * 6);
    auto expect = normalize(normalize(row));
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(y.at(r, c), expect[c], 1e-12);
  }
}

TEST(EncoderBlock, GradientsMatchFiniteDifferences) {
  ParamStore store;
  Rng init(6);
  auto p = make_encoder_block(store, "block", 8, 12, init);
  std::mt19937_64 rng(9);
  randomize(store, rng, -0.4, 0.4);
  Tensor x = random_tensor({5, 8}, rng, true);
  Tensor w = random_tensor({5, 8}, rng);
  Mask m = key_padding_mask(5, 5, 4);
  auto loss = [&] { return sum(mul(encoder_block(x, p, {8, 2}, m, RunMode{}), w)); };
  run_backward(loss);
  auto f = [&] { return eval_no_grad(loss); };
  for (const auto& e : store.entries()) {
    EXPECT_LT(max_relative_error(e.tensor.grad(), finite_difference(e.tensor, f)), 1e-4) << e.path;
  }
  EXPECT_LT(max_relative_error(x.grad(), finite_difference(x, f)), 1e-4);
}

TEST(EncoderBlock, PaddingInvariance) {
  ParamStore store;
  Rng init(7);
  auto p = make_encoder_block(store, "block", 8, 16, init);
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({4, 8}, rng);
  Tensor y = encoder_block(x, p, {8, 2}, key_padding_mask(4, 4, 4), RunMode{});
  Tensor padded = random_tensor({9, 8}, rng, false, -5, 5);
  std::copy(x.data().begin(), x.data().end(), padded.mutable_data().begin());
  Tensor yp = encoder_block(padded, p, {8, 2}, key_padding_mask(9, 9, 4), RunMode{});
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], yp[i], 1e-6);
}

TEST(Causality, GradientToFuturePositionsIsExactlyZero) {
  ParamStore store;
  Rng init(8);
  auto b0 = make_encoder_block(store, "b0", 8, 16, init);
  auto b1 = make_encoder_block(store, "b1", 8, 16, init);
  std::mt19937_64 rng(11);
  const std::size_t t = 6;
  Mask causal = make_causal_mask(t);
  for (std::size_t pos = 0; pos < t; ++pos) {
    Tensor x = random_tensor({t, 8}, rng, true);
    Tensor cot({t, 8});
    for (std::size_t c = 0; c < 8; ++c) cot.at(pos, c) = 1.0;
    run_backward([&] {
      Tensor h = encoder_block(x, b0, {8, 2}, causal, RunMode{});
      return sum(mul(encoder_block(h, b1, {8, 2}, causal, RunMode{}), cot));
    });
    for (std::size_t later = pos + 1; later < t; ++later)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(x.grad()[later * 8 + c], 0.0);
    double earlier = 0;
    for (std::size_t c = 0; c < 8; ++c) earlier += std::abs(x.grad()[pos * 8 + c]);
    EXPECT_GT(earlier, 0.0);
  }
}

}  // namespace
}  // namespace avf
