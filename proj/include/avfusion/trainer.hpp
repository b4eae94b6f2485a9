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

// Multi-condition training: curriculum ordering, length bucketing, per-sample
// noise conditions, label-smoothed teacher forcing and Adam.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "avfusion/audio.hpp"
#include "avfusion/corpus.hpp"
#include "avfusion/model.hpp"
#include "avfusion/noise.hpp"
#include "avfusion/optim.hpp"

namespace avf {

enum class LrSchedule { LogLinear, Linear };

inline std::string to_string(LrSchedule s) { return s == LrSchedule::Linear ? "linear" : "log-linear"; }

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "log-linear") return LrSchedule::LogLinear;
  if (s == "linear") return LrSchedule::Linear;
  throw ConfigError("lr schedule '" + s + "' is not one of log-linear|linear");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t cl_epochs = 2;
  double lr_start = 1e-4;
  double lr_end = 5e-6;
  LrSchedule schedule = LrSchedule::LogLinear;
  double label_smoothing = 0.1;
  double dropout = 0.1;
  std::size_t batch_size = 8;
  std::size_t bucket_batches = 4;  // batches per length-sorted bucket
  double max_grad_norm = 0.0;      // 0 disables clipping
  std::uint64_t seed = 1;
  std::vector<double> snr_set{20, 15, 10, 5, 0, -5};
  std::vector<NoiseKind> noise_kinds{NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble};
  double noise_bank_seconds = 10.0;
  FusionSpec spec{FusionStage::Early, FusionBlockKind::Align};
  ModelConfig model;
  AdamConfig adam;
  FeatureOptions features;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (!(lr_start > 0) || !(lr_end > 0)) out.push_back("train.lr_start and train.lr_end must be positive");
    if (!(label_smoothing >= 0 && label_smoothing < 1))
      out.push_back("train.label_smoothing must lie in [0, 1)");
    if (!(dropout >= 0 && dropout < 1)) out.push_back("train.dropout must lie in [0, 1)");
    if (batch_size == 0) out.push_back("train.batch_size must be positive");
    if (bucket_batches == 0) out.push_back("train.bucket_batches must be positive");
    if (!(max_grad_norm >= 0)) out.push_back("train.max_grad_norm must be non-negative");
    if (!(noise_bank_seconds > 0)) out.push_back("train.noise_bank_seconds must be positive");
    for (double s : snr_set)
      if (!std::isfinite(s)) out.push_back("train.snr_set entries must be finite");
    if (!noise_kinds.empty() && snr_set.empty())
      out.push_back("train.snr_set must be nonempty when noise kinds are given");
    for (NoiseKind k : noise_kinds)
      if (is_held_out(k))
        out.push_back("train.noise_kinds must not contain '" + to_string(k) +
                      "': it is reserved for unseen-noise evaluation");
    try {
      model.validate();
    } catch (const Error& e) {
      out.push_back(e.what());
    }
    return out;
  }

  void validate() const {
    auto p = problems();
    if (!p.empty()) throw ConfigError(p.front());
  }
};

inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (cfg.epochs <= 1) return cfg.lr_start;
  const double frac = static_cast<double>(std::min(epoch, cfg.epochs - 1)) /
                      static_cast<double>(cfg.epochs - 1);
  if (cfg.schedule == LrSchedule::Linear) return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac;
  return cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, frac);
}

// Curriculum epochs sort by frame count (ties by id); later epochs shuffle.
inline std::vector<std::size_t> curriculum_order(std::span<const std::size_t> frames,
                                                 std::span<const std::string> ids,
                                                 std::size_t epoch, const TrainConfig& cfg) {
  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  if (epoch < cfg.cl_epochs) {
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (frames[a] != frames[b]) return frames[a] < frames[b];
      return ids[a] < ids[b];
    });
  } else {
    Rng rng = make_rng(cfg.seed, "train.shuffle", {epoch});
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

// Splits an ordering into batches; within each bucket of bucket_batches
// batches the samples are sorted by length to limit padding.
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                          std::span<const std::size_t> frames,
                                                          const TrainConfig& cfg) {
  const std::size_t bucket = cfg.batch_size * cfg.bucket_batches;
  for (std::size_t b = 0; b < order.size(); b += bucket) {
    auto first = order.begin() + static_cast<std::ptrdiff_t>(b);
    auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + bucket));
    std::stable_sort(first, last, [&](std::size_t x, std::size_t y) { return frames[x] < frames[y]; });
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < order.size(); b += cfg.batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch_size)));
  return batches;
}

// Grouped audio rows a waveform of n samples produces.
inline std::size_t feature_rows(std::size_t n_samples, const FeatureOptions& opt,
                                double sample_rate = 16000.0) {
  return fbank_frame_count(n_samples, opt.fbank, sample_rate) / opt.group_order;
}

// Features of a raw sample under a clean or noisy condition. The clean
// featurization is cached; noisy ones are recomputed on demand.
class FeatureSource {
 public:
  FeatureSource(const std::vector<RawSample>& corpus, FeatureOptions opt, std::uint64_t noise_seed,
                double bank_seconds)
      : corpus_(corpus), opt_(opt), bank_(noise_seed, bank_seconds) {
    clean_.reserve(corpus.size());
    for (const auto& s : corpus) clean_.push_back(featurize(s.id, s.audio, s.video, s.transcript, opt_));
  }

  void prepare_noise(std::span<const NoiseKind> kinds) { bank_.prepare(kinds); }

  const FeaturePair& clean(std::size_t i) const { return clean_[i]; }

  FeaturePair noisy(std::size_t i, NoiseKind kind, double snr_db, std::size_t offset) const {
    const RawSample& s = corpus_[i];
    Waveform mixed = mix_at_snr(s.audio, bank_.at(kind), snr_db, offset);
    return featurize(s.id, mixed, s.video, s.transcript, opt_);
  }

  FeaturePair get(std::size_t i, const TrainingCondition& c, std::size_t offset) const {
    if (const auto* n = std::get_if<Noisy>(&c)) return noisy(i, n->kind, n->snr_db, offset);
    return clean_[i];
  }

  std::size_t size() const { return corpus_.size(); }
  std::size_t noise_length() const { return bank_.length(); }

 private:
  const std::vector<RawSample>& corpus_;
  FeatureOptions opt_;
  NoiseBank bank_;
  std::vector<FeaturePair> clean_;
};

struct ConditionDraw {
  TrainingCondition condition;
  std::size_t offset = 0;  // start of the noise segment within the bank
};

// Condition of sample `index` in `epoch`; independent of the visiting order.
inline ConditionDraw draw_condition(const TrainConfig& cfg, std::size_t epoch, std::size_t index,
                                    std::size_t noise_length) {
  Rng rng = make_rng(cfg.seed, "train.condition", {epoch, index});
  ConditionDraw d{Clean{}, 0};
  if (!cfg.noise_kinds.empty())
    d.condition = sample_training_condition<NoiseKind>(rng, cfg.snr_set, cfg.noise_kinds);
  d.offset = std::uniform_int_distribution<std::size_t>(0, noise_length - 1)(rng);
  return d;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double wall_seconds = 0;
  std::size_t clean_draws = 0;
  std::size_t noisy_draws = 0;
};

struct TrainState {
  ModelParams model;
  Adam adam;
  std::size_t epochs_done = 0;
};

inline TrainState init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  ModelParams m = build_model(cfg.model, cfg.spec, derive_seed(cfg.seed, "train.init"));
  Adam adam(m.store, cfg.adam);
  return {std::move(m), std::move(adam), 0};
}

struct TrainHooks {
  std::function<void(const EpochMetrics&, TrainState&)> on_epoch;
};

// Checks that the model dimensions agree with the corpus.
inline void check_corpus_fit(const std::vector<RawSample>& corpus, const TrainConfig& cfg,
                             const std::string& alphabet) {
  if (corpus.empty()) throw UsageError("training corpus is empty");
  const std::size_t d_audio = cfg.features.fbank.n_mels * cfg.features.group_order;
  if (cfg.model.d_audio_in != d_audio) {
    throw ConfigError("model.d_audio_in is " + std::to_string(cfg.model.d_audio_in) +
                      " but the features are " + std::to_string(d_audio) + " wide");
  }
  if (!cfg.model.audio_only && corpus.front().video.cols() != cfg.model.d_video_in) {
    throw ConfigError("model.d_video_in is " + std::to_string(cfg.model.d_video_in) +
                      " but the corpus video is " + std::to_string(corpus.front().video.cols()) +
                      " wide");
  }
  if (Vocabulary(alphabet).size() != cfg.model.vocab_size) {
    throw ConfigError("model.vocab_size " + std::to_string(cfg.model.vocab_size) +
                      " does not match the alphabet");
  }
}

// Runs the epochs [state.epochs_done, min(cfg.epochs, until)). Every random
// choice is derived from (seed, epoch, sample or batch index), so a resumed
// run makes the same choices as an uninterrupted one.
inline void train(TrainState& state, const std::vector<RawSample>& corpus, const TrainConfig& cfg,
                  const std::string& alphabet, const TrainHooks& hooks = {},
                  std::size_t until = std::numeric_limits<std::size_t>::max()) {
  cfg.validate();
  check_corpus_fit(corpus, cfg, alphabet);
  const std::size_t last = std::min(cfg.epochs, until);
  if (state.epochs_done >= last) return;
  FeatureSource source(corpus, cfg.features, derive_seed(cfg.seed, "train.noise"),
                       cfg.noise_bank_seconds);
  source.prepare_noise(cfg.noise_kinds);
  std::vector<std::size_t> frames;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    frames.push_back(source.clean(i).frames());
    ids.push_back(corpus[i].id);
  }
  ModelParams& m = state.model;
  for (std::size_t epoch = state.epochs_done; epoch < last; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.lr = lr_at(epoch, cfg);
    double loss_sum = 0;
    std::size_t loss_count = 0;
    const auto batches = make_batches(curriculum_order(frames, ids, epoch, cfg), frames, cfg);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<FeaturePair> samples;
      for (std::size_t i : batches[b]) {
        const ConditionDraw d = draw_condition(cfg, epoch, i, source.noise_length());
        (std::holds_alternative<Clean>(d.condition) ? metrics.clean_draws : metrics.noisy_draws)++;
        samples.push_back(source.get(i, d.condition, d.offset));
      }
      const Batch batch = make_batch(samples);
      Rng dropout_rng = make_rng(cfg.seed, "train.dropout", {epoch, b});
      const RunMode mode{true, static_cast<Real>(cfg.dropout), &dropout_rng};
      m.store.zero_grad();
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = forward_loss(batch, m, static_cast<Real>(cfg.label_smoothing), mode);
        if (!std::isfinite(static_cast<double>(loss.item()))) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b) + " (first sample " + samples.front().id + ")");
        }
        tape.backward(loss);
      }
      if (cfg.max_grad_norm > 0) clip_grad_norm(m.store, static_cast<Real>(cfg.max_grad_norm));
      state.adam.step(m.store, static_cast<Real>(metrics.lr));
      std::size_t tokens = 0;
      for (std::size_t len : batch.target_len) tokens += len;
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(tokens);
      loss_count += tokens;
    }
    m.store.zero_grad();
    metrics.mean_loss = loss_sum / static_cast<double>(loss_count);
    metrics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    state.epochs_done = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(metrics, state);
  }
}

}  // namespace avf
