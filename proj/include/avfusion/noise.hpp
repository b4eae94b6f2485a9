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

// Synthetic noise families, SNR-exact mixing and the multi-condition
// training sampler.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "avfusion/errors.hpp"
#include "avfusion/fft.hpp"
#include "avfusion/sample.hpp"
#include "avfusion/seed.hpp"

namespace avf {

enum class NoiseKind { White, Pink, Babble, Hum };

inline constexpr std::array<NoiseKind, 4> kAllNoiseKinds{NoiseKind::White, NoiseKind::Pink,
                                                         NoiseKind::Babble, NoiseKind::Hum};

inline std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::White: return "white";
    case NoiseKind::Pink: return "pink";
    case NoiseKind::Babble: return "babble";
    case NoiseKind::Hum: return "hum";
  }
  return "?";
}

inline NoiseKind parse_noise_kind(const std::string& s) {
  for (NoiseKind k : kAllNoiseKinds)
    if (to_string(k) == s) return k;
  throw ConfigError("noise kind '" + s + "' is not one of white|pink|babble|hum");
}

// Hum stands in for a noise family never seen during training.
inline bool is_held_out(NoiseKind k) { return k == NoiseKind::Hum; }

namespace detail {

inline void normalize_power(std::vector<double>& x) {
  double p = 0;
  for (double v : x) p += v * v;
  p /= static_cast<double>(x.size());
  if (p > 0) {
    const double g = 1.0 / std::sqrt(p);
    for (double& v : x) v *= g;
  }
}

inline std::vector<double> gaussian(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(n);
  for (double& v : x) v = normal(rng);
  return x;
}

// Multiplies the spectrum of x by gain(frequency in Hz).
template <class Gain>
std::vector<double> shape_spectrum(const std::vector<double>& x, double sample_rate, Gain gain) {
  auto spec = fft::rfft(x);
  const double df = sample_rate / static_cast<double>(x.size());
  for (std::size_t k = 0; k < spec.size(); ++k) spec[k] *= gain(static_cast<double>(k) * df);
  return fft::irfft(spec, x.size());
}

inline std::vector<double> babble(std::size_t n, double fs, Rng& rng) {
  constexpr int kVoices = 8;
  constexpr double kMaxHarmonicHz = 3500.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(n, 0.0);
  for (int v = 0; v < kVoices; ++v) {
    const double base = 100.0 + 150.0 * unit(rng);
    const double syllable_hz = 3.0 + 3.0 * unit(rng);
    const double syllable_phase = 2.0 * std::numbers::pi * unit(rng);
    double f0 = base;
    std::vector<double> phase(static_cast<std::size_t>(kMaxHarmonicHz / 80.0) + 1);
    for (double& p : phase) p = 2.0 * std::numbers::pi * unit(rng);
    for (std::size_t i = 0; i < n; ++i) {
      // Pitch wanders slowly and is pulled back towards the speaker's base.
      f0 += 0.02 * normal(rng) - 0.0005 * (f0 - base);
      const double t = static_cast<double>(i) / fs;
      const double env = std::pow(
          0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * syllable_hz * t + syllable_phase), 2.0);
      double s = 0;
      for (std::size_t h = 1; h <= phase.size() && h * f0 < kMaxHarmonicHz; ++h) {
        phase[h - 1] += 2.0 * std::numbers::pi * static_cast<double>(h) * f0 / fs;
        s += std::sin(phase[h - 1]) / static_cast<double>(h);
      }
      out[i] += env * s;
    }
  }
  return out;
}

inline std::vector<double> hum(std::size_t n, double fs, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> out(n, 0.0);
  for (int h = 1; h <= 10; ++h) {
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    for (std::size_t i = 0; i < n; ++i)
      out[i] += std::sin(2.0 * std::numbers::pi * 50.0 * h * static_cast<double>(i) / fs + phase) / h;
  }
  normalize_power(out);
  std::vector<double> band = shape_spectrum(gaussian(n, rng), fs, [](double f) {
    return f >= 900.0 && f <= 1100.0 ? 1.0 : 0.0;
  });
  normalize_power(band);
  for (std::size_t i = 0; i < n; ++i) out[i] += 0.5 * band[i];
  return out;
}

}  // namespace detail

// Unit-power noise of the given family; deterministic in (kind, n, seed).
inline Waveform synth_noise(NoiseKind kind, std::size_t n, std::uint64_t seed,
                            double sample_rate = 16000.0) {
  if (n == 0) throw LengthError("noise length must be positive");
  Rng rng = make_rng(seed, "noise." + to_string(kind));
  std::vector<double> x;
  switch (kind) {
    case NoiseKind::White:
      x = detail::gaussian(n, rng);
      break;
    case NoiseKind::Pink:
      x = detail::shape_spectrum(detail::gaussian(n, rng), sample_rate,
                                 [](double f) { return f > 0 ? 1.0 / std::sqrt(f) : 0.0; });
      break;
    case NoiseKind::Babble:
      x = detail::babble(n, sample_rate, rng);
      break;
    case NoiseKind::Hum:
      x = detail::hum(n, sample_rate, rng);
      break;
  }
  detail::normalize_power(x);
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(x.begin(), x.end());
  return w;
}

inline double mean_power(std::span<const Real> x) {
  double p = 0;
  for (Real v : x) p += static_cast<double>(v) * static_cast<double>(v);
  return x.empty() ? 0.0 : p / static_cast<double>(x.size());
}

// The len(clean) samples of `noise` starting at `offset`, wrapping around.
inline std::vector<Real> noise_segment(const Waveform& noise, std::size_t n, std::size_t offset) {
  if (noise.size() == 0) throw SignalError("noise waveform is empty");
  std::vector<Real> seg(n);
  for (std::size_t i = 0; i < n; ++i) seg[i] = noise.samples[(offset + i) % noise.size()];
  return seg;
}

// clean + alpha * segment with alpha chosen so that
// 10 log10(P_clean / P(alpha * segment)) == snr_db.
inline Waveform mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db,
                           std::size_t offset = 0) {
  if (!std::isfinite(snr_db)) throw SignalError("SNR must be finite");
  if (clean.sample_rate != noise.sample_rate) throw SignalError("sample rates differ");
  const double p_clean = mean_power(clean.samples);
  if (!(p_clean > 0)) throw SignalError("clean signal has zero power");
  const std::vector<Real> seg = noise_segment(noise, clean.size(), offset);
  const double p_noise = mean_power(seg);
  if (!(p_noise > 0)) throw SignalError("noise segment has zero power");
  const double alpha = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  Waveform out = clean;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.samples[i] += static_cast<Real>(alpha * seg[i]);
  return out;
}

inline double measured_snr_db(std::span<const Real> clean, std::span<const Real> noise) {
  return 10.0 * std::log10(mean_power(clean) / mean_power(noise));
}

// Long noise recordings from which per-sample segments are cut.
class NoiseBank {
 public:
  NoiseBank(std::uint64_t seed, double seconds = 10.0, double sample_rate = 16000.0)
      : seed_(seed), length_(static_cast<std::size_t>(seconds * sample_rate)),
        sample_rate_(sample_rate) {}

  const Waveform& get(NoiseKind kind) {
    auto it = cache_.find(kind);
    if (it == cache_.end()) it = cache_.emplace(kind, synth_noise(kind, length_, seed_, sample_rate_)).first;
    return it->second;
  }

  // Eagerly generates every family so that get() is read-only afterwards.
  void prepare(std::span<const NoiseKind> kinds) {
    for (NoiseKind k : kinds) get(k);
  }

  const Waveform& at(NoiseKind kind) const {
    auto it = cache_.find(kind);
    if (it == cache_.end()) throw StateError("noise bank lacks '" + to_string(kind) + "'");
    return it->second;
  }

  std::size_t length() const { return length_; }

 private:
  std::uint64_t seed_;
  std::size_t length_;
  double sample_rate_;
  std::map<NoiseKind, Waveform> cache_;
};

struct Clean {
  bool operator==(const Clean&) const = default;
};

template <class Kind>
struct NoisyOf {
  Kind kind;
  double snr_db;
  bool operator==(const NoisyOf&) const = default;
};

template <class Kind>
using ConditionOf = std::variant<Clean, NoisyOf<Kind>>;

using Noisy = NoisyOf<NoiseKind>;
using TrainingCondition = ConditionOf<NoiseKind>;

// Uniform over {clean} and every (kind, snr) pair.
template <class Kind>
ConditionOf<Kind> sample_training_condition(Rng& rng, std::span<const double> snrs,
                                            std::span<const Kind> kinds) {
  if (snrs.empty() || kinds.empty()) {
    throw ConfigError("multi-condition training needs at least one SNR and one noise kind");
  }
  const std::size_t outcomes = 1 + snrs.size() * kinds.size();
  const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, outcomes - 1)(rng);
  if (pick == 0) return Clean{};
  const std::size_t i = pick - 1;
  return NoisyOf<Kind>{kinds[i / snrs.size()], snrs[i % snrs.size()]};
}

}  // namespace avf
