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

// Thin wrapper over FFTW's real-to-complex transforms. Plans are created once
// per size under a mutex (the planner is not thread-safe) and executed with
// the new-array interface, which is.

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include <fftw3.h>

namespace avf::fft {

namespace detail {

struct FftwBuffer {
  explicit FftwBuffer(std::size_t bytes) : ptr(fftw_malloc(bytes)) {}
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  void* ptr;
};

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

inline const PlanPair& plans_for(std::size_t n) {
  static std::map<std::size_t, PlanPair> cache;
  std::lock_guard<std::mutex> lock(planner_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  FftwBuffer real(sizeof(double) * n);
  FftwBuffer cplx(sizeof(fftw_complex) * (n / 2 + 1));
  PlanPair p;
  const int len = static_cast<int>(n);
  p.forward = fftw_plan_dft_r2c_1d(len, static_cast<double*>(real.ptr),
                                   static_cast<fftw_complex*>(cplx.ptr), FFTW_ESTIMATE);
  p.inverse = fftw_plan_dft_c2r_1d(len, static_cast<fftw_complex*>(cplx.ptr),
                                   static_cast<double*>(real.ptr), FFTW_ESTIMATE);
  return cache.emplace(n, p).first->second;
}

}  // namespace detail

// Non-negative frequency half of the DFT of x (n/2 + 1 bins).
inline std::vector<std::complex<double>> rfft(std::span<const double> x) {
  const std::size_t n = x.size();
  const auto& plan = detail::plans_for(n);
  detail::FftwBuffer in(sizeof(double) * n), out(sizeof(fftw_complex) * (n / 2 + 1));
  auto* src = static_cast<double*>(in.ptr);
  std::copy(x.begin(), x.end(), src);
  auto* dst = static_cast<fftw_complex*>(out.ptr);
  fftw_execute_dft_r2c(plan.forward, src, dst);
  std::vector<std::complex<double>> result(n / 2 + 1);
  for (std::size_t k = 0; k < result.size(); ++k) result[k] = {dst[k][0], dst[k][1]};
  return result;
}

// Inverse of rfft, normalized so that irfft(rfft(x), n) == x.
inline std::vector<double> irfft(std::span<const std::complex<double>> spectrum, std::size_t n) {
  const auto& plan = detail::plans_for(n);
  detail::FftwBuffer in(sizeof(fftw_complex) * (n / 2 + 1)), out(sizeof(double) * n);
  auto* src = static_cast<fftw_complex*>(in.ptr);
  for (std::size_t k = 0; k < n / 2 + 1; ++k) {
    src[k][0] = spectrum[k].real();
    src[k][1] = spectrum[k].imag();
  }
  auto* dst = static_cast<double*>(out.ptr);
  fftw_execute_dft_c2r(plan.inverse, src, dst);
  std::vector<double> result(dst, dst + n);
  for (double& v : result) v /= static_cast<double>(n);
  return result;
}

}  // namespace avf::fft
