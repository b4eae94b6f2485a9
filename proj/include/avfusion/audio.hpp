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

// Log mel filterbank features and audio/video frame alignment.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "avfusion/errors.hpp"
#include "avfusion/fft.hpp"
#include "avfusion/sample.hpp"
#include "avfusion/tensor.hpp"

namespace avf {

struct FbankOptions {
  std::size_t n_mels = 80;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t fft_size = 512;
  double low_hz = 0.0;
  double high_hz = 0.0;  // 0: Nyquist
  double floor = 1e-10;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular HTK-mel filters over the rfft bins: [n_mels x (fft_size/2 + 1)].
class MelFilterbank {
 public:
  MelFilterbank(const FbankOptions& opt, double sample_rate)
      : n_mels_(opt.n_mels), n_bins_(opt.fft_size / 2 + 1) {
    const double high = opt.high_hz > 0 ? opt.high_hz : sample_rate / 2;
    if (opt.n_mels == 0 || !(high > opt.low_hz)) {
      throw ConfigError("mel filterbank needs n_mels >= 1 and high_hz > low_hz");
    }
    const double mel_lo = hz_to_mel(opt.low_hz), mel_hi = hz_to_mel(high);
    const double spacing = (mel_hi - mel_lo) / static_cast<double>(n_mels_ + 1);
    centers_hz_.resize(n_mels_);
    weights_.assign(n_mels_ * n_bins_, 0.0);
    for (std::size_t m = 0; m < n_mels_; ++m) {
      const double left = mel_lo + spacing * static_cast<double>(m);
      const double center = left + spacing;
      const double right = center + spacing;
      centers_hz_[m] = mel_to_hz(center);
      for (std::size_t k = 0; k < n_bins_; ++k) {
        const double mel = hz_to_mel(static_cast<double>(k) * sample_rate /
                                     static_cast<double>(opt.fft_size));
        double w = 0;
        if (mel > left && mel <= center) w = (mel - left) / spacing;
        else if (mel > center && mel < right) w = (right - mel) / spacing;
        weights_[m * n_bins_ + k] = w;
      }
    }
  }

  std::size_t n_mels() const { return n_mels_; }
  std::size_t n_bins() const { return n_bins_; }
  const std::vector<double>& centers_hz() const { return centers_hz_; }
  double weight(std::size_t mel, std::size_t bin) const { return weights_[mel * n_bins_ + bin]; }

 private:
  std::size_t n_mels_, n_bins_;
  std::vector<double> centers_hz_;
  std::vector<double> weights_;
};

inline std::size_t samples_for_ms(double ms, double sample_rate) {
  return static_cast<std::size_t>(std::lround(ms * sample_rate / 1000.0));
}

// Number of full analysis windows in n samples.
inline std::size_t fbank_frame_count(std::size_t n_samples, const FbankOptions& opt,
                                     double sample_rate) {
  const std::size_t win = samples_for_ms(opt.window_ms, sample_rate);
  const std::size_t hop = samples_for_ms(opt.hop_ms, sample_rate);
  if (n_samples < win) return 0;
  return 1 + (n_samples - win) / hop;
}

// Hann-windowed magnitude spectrum -> mel filterbank -> log(max(x, floor)).
inline Tensor log_mel_fbank(const Waveform& w, const FbankOptions& opt = {}) {
  if (!(w.sample_rate > 0)) throw SignalError("sample rate must be positive");
  const std::size_t win = samples_for_ms(opt.window_ms, w.sample_rate);
  const std::size_t hop = samples_for_ms(opt.hop_ms, w.sample_rate);
  if (win == 0 || hop == 0 || opt.fft_size < win) {
    throw ConfigError("fft_size must cover the analysis window");
  }
  const std::size_t frames = fbank_frame_count(w.size(), opt, w.sample_rate);
  if (frames == 0) {
    throw LengthError("waveform of " + std::to_string(w.size()) +
                      " samples is shorter than one window (" + std::to_string(win) + ")");
  }
  const MelFilterbank bank(opt, w.sample_rate);
  std::vector<double> window(win);
  for (std::size_t n = 0; n < win; ++n)
    window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                     static_cast<double>(win - 1));

  Tensor out({frames, opt.n_mels});
  std::vector<double> buf(opt.fft_size);
  std::vector<double> mag(bank.n_bins());
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t n = 0; n < win; ++n) buf[n] = w.samples[f * hop + n] * window[n];
    const auto spec = fft::rfft(buf);
    for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(spec[k]);
    for (std::size_t m = 0; m < opt.n_mels; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < mag.size(); ++k) e += bank.weight(m, k) * mag[k];
      out.at(f, m) = static_cast<Real>(std::log(std::max(e, opt.floor)));
    }
  }
  return out;
}

// Concatenates non-overlapping groups of `order` consecutive rows; trailing
// rows that do not fill a group are dropped.
inline Tensor group_frames(const Tensor& frames, std::size_t order = 4) {
  if (frames.rank() != 2) throw DimensionError("group_frames expects a matrix");
  if (order == 0) throw ConfigError("group order must be positive");
  const std::size_t n = frames.rows(), d = frames.cols();
  if (n < order) {
    throw LengthError(std::to_string(n) + " frames cannot form a group of " +
                      std::to_string(order));
  }
  const std::size_t groups = n / order;
  Tensor out({groups, d * order});
  auto src = frames.data();
  std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(groups * order * d),
            out.mutable_data().begin());
  return out;
}

// Per-utterance mean and variance normalization of every feature column.
inline Tensor cmvn(const Tensor& x, double eps = 1e-8) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out({n, d});
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0, var = 0;
    for (std::size_t r = 0; r < n; ++r) mean += x.at(r, c);
    mean /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) var += (x.at(r, c) - mean) * (x.at(r, c) - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t r = 0; r < n; ++r) out.at(r, c) = static_cast<Real>((x.at(r, c) - mean) * inv);
  }
  return out;
}

inline Tensor truncate_rows(const Tensor& x, std::size_t rows) {
  if (rows >= x.rows()) return x;
  if (rows == 0) throw LengthError("cannot truncate to zero rows");
  return Tensor({rows, x.cols()},
                std::vector<Real>(x.data().begin(),
                                  x.data().begin() + static_cast<std::ptrdiff_t>(rows * x.cols())));
}

struct FeatureOptions {
  FbankOptions fbank;
  std::size_t group_order = 4;
  bool normalize = true;
};

// Audio features grouped to the video rate; both streams are truncated to
// the shorter of the two.
inline FeaturePair featurize(std::string id, const Waveform& audio, const Tensor& video,
                             std::vector<int> transcript, const FeatureOptions& opt = {}) {
  Tensor feats = log_mel_fbank(audio, opt.fbank);
  if (opt.normalize) feats = cmvn(feats);
  feats = group_frames(feats, opt.group_order);
  FeaturePair p;
  p.id = std::move(id);
  p.transcript = std::move(transcript);
  if (video.defined()) {
    const std::size_t t = std::min(feats.rows(), video.rows());
    p.audio = truncate_rows(feats, t);
    p.video = truncate_rows(video, t);
  } else {
    p.audio = feats;
  }
  return p;
}

}  // namespace avf
