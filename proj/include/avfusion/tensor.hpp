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

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tape records every differentiable operation executed while it is the
// active tape of the calling thread (see TapeScope). Operations only record
// when at least one input requires a gradient, so inference code that runs
// without a tape pays nothing for autodiff.
//
//   Tape tape;
//   TapeScope scope(tape);
//   Tensor loss = sum(relu(matmul(x, w)));
//   tape.backward(loss);   // w.grad() now holds dloss/dw

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "avfusion/errors.hpp"

namespace avf {

#ifdef AVF_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace detail

struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  std::span<Real> ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real{0});
    return grad;
  }
};

// Shared handle onto a TensorNode. Copies alias the same storage; use
// clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    check_shape(shape);
    node_->data.assign(detail::numel(shape), Real{0});
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    check_shape(shape);
    if (detail::numel(shape) != values.size()) {
      throw DimensionError("shape " + detail::shape_str(shape) + " holds " +
                           std::to_string(detail::numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<Real> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows,
                       bool requires_grad = false) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Real> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values), requires_grad);
  }

  static Tensor filled(Shape shape, Real value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.front(); }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const Real> data() const { return node_->data; }
  std::span<Real> mutable_data() { return node_->data; }

  Real operator[](std::size_t i) const { return node_->data[i]; }
  Real at(std::size_t r, std::size_t c) const {
    return node_->data[r * cols() + c];
  }
  Real& at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }

  Real item() const {
    if (size() != 1) {
      throw UsageError("item() on tensor of shape " + detail::shape_str(shape()));
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    return Tensor(node_->shape, node_->data, node_->requires_grad);
  }
  Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
    for (std::size_t e : shape) {
      if (e == 0) {
        throw DimensionError("non-positive extent in " + detail::shape_str(shape));
      }
    }
  }

  std::shared_ptr<TensorNode> node_;
};

class Tape;

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

// Ordered log of executed operations. Records are appended as operations run,
// so every record's inputs are leaves or outputs of earlier records.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Record {
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape(); }

  void record(std::vector<std::shared_ptr<TensorNode>> inputs,
              std::shared_ptr<TensorNode> output, BackwardFn backward) {
    records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  // Seeds dloss/dloss = 1 and runs every record's backward rule once, in
  // reverse order. Gradients accumulate additively into existing buffers.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw UsageError("backward() needs a scalar loss, got " +
                       (loss.defined() ? detail::shape_str(loss.shape())
                                       : std::string("undefined tensor")));
    }
    if (!loss.requires_grad()) {
      throw UsageError("loss does not depend on any tensor that requires grad");
    }
    loss.node()->ensure_grad()[0] += Real{1};
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
  }

 private:
  std::vector<Record> records_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape()) {
    detail::active_tape() = &tape;
  }
  ~TapeScope() { detail::active_tape() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording on this thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradScope() { detail::active_tape() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <class Fn>
void record(std::initializer_list<const Tensor*> inputs, Tensor& out, Fn&& fn) {
  std::vector<std::shared_ptr<TensorNode>> nodes;
  nodes.reserve(inputs.size());
  for (const Tensor* t : inputs) {
    if (t->defined()) nodes.push_back(t->node());
  }
  out.set_requires_grad(true);
  Tape::active()->record(std::move(nodes), out.node(), std::forward<Fn>(fn));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " +
                         shape_str(t.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* ci = c + i * n;
    const Real* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real s = ai[p];
      if (s == Real{0}) continue;
      const Real* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const Real* g, const Real* b, Real* c, std::size_t m,
                    std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* gi = g + i * n;
    Real* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real* bp = b + p * n;
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const Real* a, const Real* g, Real* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    const Real* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real s = ai[p];
      if (s == Real{0}) continue;
      Real* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += s * gi[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner extents differ: " +
                         detail::shape_str(a.shape()) + " x " +
                         detail::shape_str(b.shape()));
  }
  Tensor out({m, n});
  detail::gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (detail::tracking({&a, &b})) {
    TensorNode* an = a.node().get();
    TensorNode* bn = b.node().get();
    TensorNode* on = out.node().get();
    detail::record({&a, &b}, out, [=] {
      const Real* g = on->grad.data();
      if (an->requires_grad) {
        detail::gemm_nt(g, bn->data.data(), an->ensure_grad().data(), m, n, k);
      }
      if (bn->requires_grad) {
        detail::gemm_tn(an->data.data(), g, bn->ensure_grad().data(), m, k, n);
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  if (detail::tracking({&a})) {
    TensorNode* an = a.node().get();
    TensorNode* on = out.node().get();
    detail::record({&a}, out, [=] {
      auto ga = an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += on->grad[j * r + i];
    });
  }
  return out;
}

// x[t x in] * weight[in x out] + bias[out]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(weight, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (weight.dim(0) != k) {
    throw DimensionError("linear input width " + std::to_string(k) +
                         " does not match weight " + detail::shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw DimensionError("linear bias " + detail::shape_str(bias.shape()) +
                         " does not match output width " + std::to_string(n));
  }
  Tensor out({m, n});
  Real* o = out.mutable_data().data();
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.data().data(), n, o + i * n);
  }
  detail::gemm_nn(x.data().data(), weight.data().data(), o, m, k, n);
  if (detail::tracking({&x, &weight, &bias})) {
    TensorNode* xn = x.node().get();
    TensorNode* wn = weight.node().get();
    TensorNode* bn = bias.defined() ? bias.node().get() : nullptr;
    TensorNode* on = out.node().get();
    detail::record({&x, &weight, &bias}, out, [=] {
      const Real* g = on->grad.data();
      if (xn->requires_grad) {
        detail::gemm_nt(g, wn->data.data(), xn->ensure_grad().data(), m, n, k);
      }
      if (wn->requires_grad) {
        detail::gemm_tn(xn->data.data(), g, wn->ensure_grad().data(), m, k, n);
      }
      if (bn != nullptr && bn->requires_grad) {
        auto gb = bn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

// a + b where b's shape equals a's shape or a trailing suffix of it
// (broadcast over a's leading axes). The operands are swapped when a is the
// smaller one.
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.rank() < b.rank()) return add(b, a);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (!std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    throw DimensionError("cannot broadcast " + detail::shape_str(sb) + " onto " +
                         detail::shape_str(sa));
  }
  const std::size_t n = a.size(), inner = b.size();
  Tensor out(sa);
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < n; ++i) o[i] = x[i] + y[i % inner];
  if (detail::tracking({&a, &b})) {
    TensorNode* an = a.node().get();
    TensorNode* bn = b.node().get();
    TensorNode* on = out.node().get();
    detail::record({&a, &b}, out, [=] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto ga = an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto gb = bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i % inner] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shapes differ: " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
  if (detail::tracking({&a, &b})) {
    TensorNode* an = a.node().get();
    TensorNode* bn = b.node().get();
    TensorNode* on = out.node().get();
    detail::record({&a, &b}, out, [=] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto ga = an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto gb = bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * an->data[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, Real factor) {
  const std::size_t n = a.size();
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = a[i] * factor;
  if (detail::tracking({&a})) {
    TensorNode* an = a.node().get();
    TensorNode* on = out.node().get();
    detail::record({&a}, out, [=] {
      auto ga = an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i] * factor;
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  const std::size_t n = a.size();
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = a[i] > Real{0} ? a[i] : Real{0};
  if (detail::tracking({&a})) {
    TensorNode* an = a.node().get();
    TensorNode* on = out.node().get();
    detail::record({&a}, out, [=] {
      auto ga = an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        if (an->data[i] > Real{0}) ga[i] += on->grad[i];
    });
  }
  return out;
}

// Inverted dropout: survivors are scaled by 1/(1-p) in training mode, eval
// mode is the identity (and returns the input handle itself).
template <class Rng>
Tensor dropout(const Tensor& x, Real p, bool training, Rng& rng) {
  if (!(p >= Real{0} && p < Real{1})) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == Real{0}) return x;
  const std::size_t n = x.size();
  const Real keep_scale = Real{1} / (Real{1} - p);
  std::vector<Real> factor(n);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) factor[i] = uniform(rng) < p ? Real{0} : keep_scale;
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * factor[i];
  if (detail::tracking({&x})) {
    TensorNode* xn = x.node().get();
    TensorNode* on = out.node().get();
    detail::record({&x}, out, [=, factor = std::move(factor)] {
      auto gx = xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gx[i] += on->grad[i] * factor[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and normalization

inline Tensor sum(const Tensor& a) {
  Tensor out({1});
  Real acc = 0;
  for (Real v : a.data()) acc += v;
  out.mutable_data()[0] = acc;
  if (detail::tracking({&a})) {
    TensorNode* an = a.node().get();
    TensorNode* on = out.node().get();
    detail::record({&a}, out, [=] {
      auto ga = an->ensure_grad();
      const Real g = on->grad[0];
      for (Real& v : ga) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), Real{1} / static_cast<Real>(a.size()));
}

// Softmax along `axis`, computed with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " +
                         detail::shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor out(s);
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      Real mx = in[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
      Real total = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const Real e = std::exp(in[base + i * inner] - mx);
        o[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= total;
    }
  }
  if (detail::tracking({&x})) {
    TensorNode* xn = x.node().get();
    TensorNode* on = out.node().get();
    detail::record({&x}, out, [=] {
      auto gx = xn->ensure_grad();
      const auto& y = on->data;
      const auto& g = on->grad;
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * len * inner + c;
          Real dot = 0;
          for (std::size_t i = 0; i < len; ++i) dot += y[base + i * inner] * g[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = base + i * inner;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Row-wise softmax of x[t_q x t_k] restricted to allowed[i * t_k + j] != 0.
// Disallowed scores receive a -1e9 surrogate before normalization and their
// weights are then forced to exactly zero.
inline Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allowed) {
  detail::require_rank2(x, "masked_softmax");
  const std::size_t rows = x.dim(0), len = x.dim(1);
  if (allowed.size() != x.size()) {
    throw DimensionError("mask has " + std::to_string(allowed.size()) +
                         " entries for scores " + detail::shape_str(x.shape()));
  }
  constexpr Real kMasked = Real(-1e9);
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * len;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t i = 0; i < len; ++i) {
      const Real s = allowed[base + i] ? in[base + i] : in[base + i] + kMasked;
      o[base + i] = s;
      mx = std::max(mx, s);
    }
    Real total = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const Real e = std::exp(o[base + i] - mx);
      o[base + i] = e;
      total += e;
    }
    for (std::size_t i = 0; i < len; ++i) {
      o[base + i] = allowed[base + i] ? o[base + i] / total : Real{0};
    }
  }
  if (detail::tracking({&x})) {
    TensorNode* xn = x.node().get();
    TensorNode* on = out.node().get();
    detail::record({&x}, out, [=] {
      auto gx = xn->ensure_grad();
      const auto& y = on->data;
      const auto& g = on->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * len;
        Real dot = 0;
        for (std::size_t i = 0; i < len; ++i) dot += y[base + i] * g[base + i];
        for (std::size_t i = 0; i < len; ++i) {
          gx[base + i] += y[base + i] * (g[base + i] - dot);
        }
      }
    });
  }
  return out;
}

// Normalizes over the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         Real eps) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm affine parameters must have width " + std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  Tensor out(x.shape());
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv_std(rows);
  auto in = x.data();
  auto o = out.mutable_data();
  auto gn = gain.data();
  auto bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = in.data() + r * d;
    Real mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<Real>(d);
    const Real inv = Real{1} / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t i = 0; i < d; ++i) {
      const Real h = (row[i] - mu) * inv;
      xhat[r * d + i] = h;
      o[r * d + i] = gn[i] * h + bs[i];
    }
  }
  if (detail::tracking({&x, &gain, &bias})) {
    TensorNode* xn = x.node().get();
    TensorNode* gnode = gain.node().get();
    TensorNode* bnode = bias.node().get();
    TensorNode* on = out.node().get();
    detail::record({&x, &gain, &bias}, out,
                   [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const auto& g = on->grad;
      if (gnode->requires_grad) {
        auto gg = gnode->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
      }
      if (bnode->requires_grad) {
        auto gb = bnode->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
      }
      if (xn->requires_grad) {
        auto gx = xn->ensure_grad();
        const auto& gain_v = gnode->data;
        for (std::size_t r = 0; r < rows; ++r) {
          Real mean_dh = 0, mean_dh_h = 0;
          for (std::size_t i = 0; i < d; ++i) {
            const Real dh = g[r * d + i] * gain_v[i];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + i];
          }
          mean_dh /= static_cast<Real>(d);
          mean_dh_h /= static_cast<Real>(d);
          for (std::size_t i = 0; i < d; ++i) {
            const Real dh = g[r * d + i] * gain_v[i];
            gx[r * d + i] += inv_std[r] * (dh - mean_dh - xhat[r * d + i] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t rows = parts.front().rows();
  std::size_t width = 0;
  for (const Tensor& p : parts) {
    detail::require_rank2(p, "concat");
    if (p.rows() != rows) {
      throw DimensionError("concat row counts differ: " + std::to_string(rows) + " vs " +
                           std::to_string(p.rows()));
    }
    width += p.cols();
  }
  Tensor out({rows, width});
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * w, w, o.data() + r * width + offset);
    offset += w;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || detail::tracking({&p});
  if (any) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<TensorNode*> raw;
    for (const Tensor& p : parts) {
      nodes.push_back(p.node());
      raw.push_back(p.node().get());
    }
    TensorNode* on = out.node().get();
    out.set_requires_grad(true);
    Tape::active()->record(std::move(nodes), out.node(), [=] {
      std::size_t off = 0;
      for (TensorNode* pn : raw) {
        const std::size_t w = pn->shape.back();
        if (pn->requires_grad) {
          auto gp = pn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += on->grad[r * width + off + c];
        }
        off += w;
      }
    });
  }
  return out;
}

inline Tensor concat_last_axis(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_cols(parts);
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank2(x, "slice_cols");
  const std::size_t rows = x.rows(), width = x.cols();
  if (begin >= end || end > width) {
    throw DimensionError("column slice [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") of width " + std::to_string(width));
  }
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * width + begin, w, o.data() + r * w);
  if (detail::tracking({&x})) {
    TensorNode* xn = x.node().get();
    TensorNode* on = out.node().get();
    detail::record({&x}, out, [=] {
      auto gx = xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) gx[r * width + begin + c] += on->grad[r * w + c];
    });
  }
  return out;
}

// Gathers rows of table[v x d] for each id.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw UsageError("embedding lookup of an empty id sequence");
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw UsageError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  Tensor out({idx.size(), d});
  auto o = out.mutable_data();
  for (std::size_t t = 0; t < idx.size(); ++t)
    std::copy_n(table.data().data() + static_cast<std::size_t>(idx[t]) * d, d, o.data() + t * d);
  if (detail::tracking({&table})) {
    TensorNode* tn = table.node().get();
    TensorNode* on = out.node().get();
    detail::record({&table}, out, [=, idx = std::move(idx)] {
      auto gt = tn->ensure_grad();
      for (std::size_t t = 0; t < idx.size(); ++t)
        for (std::size_t c = 0; c < d; ++c)
          gt[static_cast<std::size_t>(idx[t]) * d + c] += on->grad[t * d + c];
    });
  }
  return out;
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](Real v) { return std::isfinite(v); });
}

}  // namespace avf
