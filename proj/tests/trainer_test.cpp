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
#include <filesystem>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "avfusion/checkpoint.hpp"
#include "avfusion/loss.hpp"
#include "avfusion/trainer.hpp"
#include "test_util.hpp"

namespace avf {
namespace {

using testing::finite_difference;
using testing::max_relative_error;
using testing::random_tensor;

double smoothed_ce_oracle(const Tensor& logits, const std::vector<int>& targets, double eps,
                          std::size_t rows) {
  double total = 0;
  const std::size_t v = logits.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double z = 0;
    for (std::size_t k = 0; k < v; ++k) z += std::exp(double(logits.at(r, k)));
    for (std::size_t k = 0; k < v; ++k) {
      const double logp = logits.at(r, k) - std::log(z);
      total -= (int(k) == targets[r] ? 1 - eps : eps / double(v - 1)) * logp;
    }
  }
  return total / double(rows);
}

TEST(LabelSmoothedCe, ZeroEpsIsCrossEntropy) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({4, 6}, rng, false, -3, 3);
  const std::vector<int> t{0, 5, 2, 2};
  double ce = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t k = 0; k < 6; ++k) z += std::exp(double(x.at(r, k)));
    ce += std::log(z) - x.at(r, std::size_t(t[r]));
  }
  EXPECT_NEAR(label_smoothed_ce(x, t, 0).item(), ce / 4, 1e-12);
}

TEST(LabelSmoothedCe, UniformLogitsGiveLogV) {
  for (double eps : {0.0, 0.1, 0.5}) {
    EXPECT_NEAR(label_smoothed_ce(Tensor::filled({3, 5}, 0.7), std::vector<int>{1, 2, 3}, eps).item(),
                std::log(5.0), 1e-12);
  }
}

TEST(LabelSmoothedCe, RandomMatchesLoopOracleWithGradient) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({3, 5}, rng, true, -2, 2);
  const std::vector<int> t{4, 0, 2};
  EXPECT_NEAR(label_smoothed_ce(x, t, 0.1).item(), smoothed_ce_oracle(x, t, 0.1, 3), 1e-12);
  testing::run_backward([&] { return label_smoothed_ce(x, t, 0.1); });
  auto fd = finite_difference(x, [&] { return testing::eval_no_grad([&] { return label_smoothed_ce(x, t, 0.1); }); });
  EXPECT_LT(max_relative_error(x.grad(), fd), 1e-6);
}

TEST(LabelSmoothedCe, PaddedRowsAreIgnored) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({4, 5}, rng, false, -2, 2);
  const std::vector<int> t{1, 3, 0, 0};
  EXPECT_NEAR(label_smoothed_ce(x, t, 0.1, 2).item(), smoothed_ce_oracle(x, t, 0.1, 2), 1e-12);
}

TEST(LabelSmoothedCe, OutOfRangeTargetIsUsageError) {
  EXPECT_THROW(label_smoothed_ce(Tensor({2, 5}), std::vector<int>{1, 5}, 0.1), UsageError);
  EXPECT_THROW(label_smoothed_ce(Tensor({2, 5}), std::vector<int>{1, -1}, 0.1), UsageError);
  EXPECT_THROW(label_smoothed_ce(Tensor({2, 5}), std::vector<int>{1, 1}, 1.0), UsageError);
}

TEST(LabelSmoothedCe, OptimumSitsOnTheEntropyFloor) {
  const double eps = 0.1;
  const std::size_t v = 11;
  Tensor x({2, v}, true);
  const std::vector<int> t{3, 7};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < v; ++k)
      x.at(r, k) = std::log(int(k) == t[r] ? 1 - eps : eps / double(v - 1));
  const double floor = label_smoothing_floor(eps, v);
  EXPECT_NEAR(floor, -(0.9 * std::log(0.9) + 0.1 * std::log(0.01)), 1e-15);
  EXPECT_NEAR(testing::run_backward([&] { return label_smoothed_ce(x, t, eps); }).item(), floor, 1e-12);
  for (Real g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
  EXPECT_GT(floor, 0.5);
}

TEST(LrSchedule, LogLinearEndpointsAndMidpoint) {
  TrainConfig cfg;
  cfg.epochs = 11;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 1e-4);
  EXPECT_NEAR(lr_at(10, cfg), 5e-6, 1e-18);
  EXPECT_NEAR(lr_at(5, cfg), std::sqrt(1e-4 * 5e-6), 1e-15);
  EXPECT_NEAR(lr_at(5, cfg), 2.236e-5, 1e-8);
  for (std::size_t e = 1; e < 11; ++e) EXPECT_LT(lr_at(e, cfg), lr_at(e - 1, cfg));
  cfg.epochs = 1;
  EXPECT_EQ(lr_at(0, cfg), 1e-4);
  cfg.epochs = 3;
  cfg.schedule = LrSchedule::Linear;
  EXPECT_NEAR(lr_at(1, cfg), (1e-4 + 5e-6) / 2, 1e-18);
}

TEST(Curriculum, EarlyEpochsSortByLength) {
  TrainConfig cfg;
  const std::size_t frames[] = {30, 10, 20};
  const std::string ids[] = {"a", "b", "c"};
  EXPECT_EQ(curriculum_order(frames, ids, 0, cfg), (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(curriculum_order(frames, ids, 1, cfg), (std::vector<std::size_t>{1, 2, 0}));
  const std::size_t tied[] = {5, 5, 1};
  const std::string tied_ids[] = {"z", "m", "q"};
  EXPECT_EQ(curriculum_order(tied, tied_ids, 0, cfg), (std::vector<std::size_t>{2, 1, 0}));
}

TEST(Curriculum, LaterEpochsShuffleDeterministically) {
  TrainConfig cfg;
  std::vector<std::size_t> frames(50);
  std::vector<std::string> ids(50);
  for (std::size_t i = 0; i < 50; ++i) frames[i] = i % 7, ids[i] = std::to_string(i);
  auto a = curriculum_order(frames, ids, 2, cfg), b = curriculum_order(frames, ids, 2, cfg);
  auto c = curriculum_order(frames, ids, 3, cfg);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Batching, BucketsAreLengthSortedAndCoverEverySample) {
  TrainConfig cfg;
  cfg.batch_size = 3;
  cfg.bucket_batches = 2;
  std::vector<std::size_t> frames{9, 2, 7, 4, 8, 1, 3, 6, 5, 0, 11};
  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  auto batches = make_batches(order, frames, cfg);
  ASSERT_EQ(batches.size(), 4u);
  EXPECT_EQ(batches.back().size(), 2u);
  std::vector<std::size_t> seen;
  for (const auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), frames.size());
  for (std::size_t i = 1; i < 6; ++i) EXPECT_LE(frames[seen[i - 1]], frames[seen[i]]);
}

TEST(TrainConfig, HeldOutNoiseAndBadValuesAreAllReported) {
  TrainConfig cfg;
  cfg.noise_kinds.push_back(NoiseKind::Hum);
  cfg.dropout = 1.0;
  cfg.batch_size = 0;
  auto p = cfg.problems();
  ASSERT_EQ(p.size(), 3u);
  EXPECT_NE(p[2].find("hum"), std::string::npos);
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainingConditions, DrawsAreUniformOverOutcomes) {
  TrainConfig cfg;
  std::map<std::string, int> counts;
  const int n = 38000;
  for (int i = 0; i < n; ++i) {
    auto d = draw_condition(cfg, 4, std::size_t(i), 1000);
    EXPECT_LT(d.offset, 1000u);
    if (auto* noisy = std::get_if<Noisy>(&d.condition))
      ++counts[to_string(noisy->kind) + std::to_string(noisy->snr_db)];
    else
      ++counts["clean"];
  }
  ASSERT_EQ(counts.size(), 19u);
  for (const auto& [k, c] : counts) EXPECT_NEAR(double(c) / n, 1.0 / 19, 0.01) << k;
  cfg.noise_kinds.clear();
  EXPECT_TRUE(std::holds_alternative<Clean>(draw_condition(cfg, 0, 0, 10).condition));
}

TEST(Adam, OneStepMovesOnlyParametersWithGradient) {
  ParamStore store;
  Tensor used = store.add("used", {3});
  Tensor unused = store.add("unused", {3});
  Tensor zero_grad = store.add("zero", {2});
  for (Tensor* t : {&used, &unused, &zero_grad}) fill(*t, 0.5);
  Adam adam(store);
  testing::run_backward([&] { return add(sum(mul(used, used)), scale(sum(zero_grad), 0)); });
  adam.step(store, 0.1);
  for (Real v : used.data()) EXPECT_NE(v, 0.5);
  for (Real v : unused.data()) EXPECT_EQ(v, 0.5);
  for (Real v : zero_grad.data()) EXPECT_EQ(v, 0.5);
}

// Model small enough to train in milliseconds on real corpus features.
TrainConfig tiny_train_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.model.attention = {8, 2};
  cfg.model.d_ff = 16;
  cfg.model.n_premix_blocks = 1;
  cfg.model.n_shared_blocks = 1;
  cfg.model.n_decoder_blocks = 1;
  cfg.lr_start = 1e-3;
  cfg.lr_end = 1e-4;
  cfg.batch_size = 3;
  cfg.noise_bank_seconds = 1.0;
  cfg.seed = 5;
  return cfg;
}

std::vector<RawSample> tiny_corpus(std::size_t n) {
  CorpusConfig c;
  c.n_samples = n;
  c.max_tokens = 3;
  c.seed = 4;
  return synth_av_corpus(c);
}

std::vector<EpochMetrics> run(TrainState& st, const std::vector<RawSample>& corpus,
                              const TrainConfig& cfg) {
  std::vector<EpochMetrics> out;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m, TrainState&) { out.push_back(m); };
  train(st, corpus, cfg, "abcdefgh", hooks);
  return out;
}

TEST(Train, SameSeedGivesIdenticalLossCurves) {
  const auto corpus = tiny_corpus(7);
  const TrainConfig cfg = tiny_train_config(3);
  TrainState a = init_train_state(cfg), b = init_train_state(cfg);
  auto ma = run(a, corpus, cfg), mb = run(b, corpus, cfg);
  ASSERT_EQ(ma.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(ma[e].mean_loss, mb[e].mean_loss);
    EXPECT_EQ(ma[e].lr, mb[e].lr);
    EXPECT_EQ(ma[e].clean_draws + ma[e].noisy_draws, corpus.size());
  }
  for (std::size_t k = 0; k < a.model.store.size(); ++k)
    EXPECT_TRUE(std::ranges::equal(a.model.store.entries()[k].tensor.data(),
                                   b.model.store.entries()[k].tensor.data()));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto corpus = tiny_corpus(7);
  const TrainConfig cfg = tiny_train_config(4);
  const auto path = std::filesystem::temp_directory_path() / "avf_resume.state";
  TrainState full = init_train_state(cfg);
  std::vector<EpochMetrics> all;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m, TrainState& st) {
    all.push_back(m);
    if (st.epochs_done == 2) save_train_state(path, st.model, st.adam, st.epochs_done);
  };
  train(full, corpus, cfg, "abcdefgh", hooks);

  TrainState resumed = init_train_state(cfg);
  resumed.epochs_done = load_train_state(path, resumed.model, resumed.adam);
  EXPECT_EQ(resumed.epochs_done, 2u);
  auto rest = run(resumed, corpus, cfg);
  ASSERT_EQ(rest.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(rest[e].epoch, all[e + 2].epoch);
    EXPECT_EQ(rest[e].mean_loss, all[e + 2].mean_loss);
  }
  for (std::size_t k = 0; k < full.model.store.size(); ++k)
    EXPECT_TRUE(std::ranges::equal(full.model.store.entries()[k].tensor.data(),
                                   resumed.model.store.entries()[k].tensor.data()));
  std::filesystem::remove(path);
}

TEST(Train, NonFiniteLossAborts) {
  const auto corpus = tiny_corpus(3);
  const TrainConfig cfg = tiny_train_config(1);
  TrainState st = init_train_state(cfg);
  Tensor w = st.model.output.weight;
  w.mutable_data()[0] = std::numeric_limits<Real>::quiet_NaN();
  EXPECT_THROW(run(st, corpus, cfg), NumericError);
}

TEST(Train, DimensionMismatchWithCorpusIsConfigError) {
  const auto corpus = tiny_corpus(2);
  TrainConfig cfg = tiny_train_config(1);
  cfg.model.d_video_in = 64;
  TrainState st = init_train_state(cfg);
  EXPECT_THROW(run(st, corpus, cfg), ConfigError);
}

TEST(Train, DeskModelLossFallsOverFirstEpochs) {
  CorpusConfig cc;
  cc.n_samples = 32;
  cc.seed = 7;
  const auto corpus = synth_av_corpus(cc);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.lr_start = 1e-3;
  cfg.lr_end = 1e-4;
  cfg.noise_kinds.clear();
  cfg.seed = 3;
  TrainConfig five = cfg;
  five.epochs = 5;
  TrainState st = init_train_state(cfg);
  auto m = run(st, corpus, five);
  ASSERT_EQ(m.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(m[e].mean_loss, 1.05 * m[e - 1].mean_loss) << e;
  EXPECT_LT(m[4].mean_loss, m[0].mean_loss);
}

TEST(Checkpoint, RoundTripReproducesForwardAtStoredPrecision) {
  ModelConfig cfg;
  cfg.attention = {8, 2};
  cfg.d_ff = 12;
  cfg.d_audio_in = 6;
  cfg.d_video_in = 5;
  cfg.late_combiner = DualCombiner::ConcatProjection;
  const FusionSpec spec{FusionStage::Late, FusionBlockKind::Cross};
  ModelParams m = build_model(cfg, spec, 9);
  const auto path = std::filesystem::temp_directory_path() / "avf_roundtrip.ckpt";
  CorpusConfig data;
  data.alphabet = "wxyz";
  data.codebook_seed = 77;
  save_checkpoint(path, m, data);
  Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.alphabet, "wxyz");
  EXPECT_EQ(back.codebook_seed, 77u);
  EXPECT_EQ(back.model.spec, spec);
  EXPECT_EQ(describe_model(back.model.config, back.model.spec), describe_model(cfg, spec));
  for (const auto& e : m.store.entries()) {
    Tensor t = e.tensor;
    for (Real& v : t.mutable_data()) v = Real(float(v));
  }
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({4, 6}, rng), v = random_tensor({4, 5}, rng);
  const std::vector<int> in{Vocabulary::kSos, 3, 4};
  NoGradScope ng;
  Tensor la = decode_forward(encode(a, v, 3, m, RunMode{}), in, m, RunMode{});
  Tensor lb = decode_forward(encode(a, v, 3, back.model, RunMode{}), in, back.model, RunMode{});
  EXPECT_TRUE(std::ranges::equal(la.data(), lb.data()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreIoErrors) {
  ModelConfig cfg;
  cfg.attention = {8, 2};
  cfg.d_ff = 12;
  cfg.d_audio_in = 6;
  cfg.d_video_in = 5;
  ModelParams m = build_model(cfg, {FusionStage::Early, FusionBlockKind::Concat}, 0);
  const std::string good = encode_checkpoint(m, CorpusConfig{});
  EXPECT_NO_THROW(decode_checkpoint(good));
  std::string no_codebook = good;
  no_codebook.replace(no_codebook.find("corpus.codebook_seed=1\n"), 23, "");
  EXPECT_THROW(decode_checkpoint(no_codebook), IoError);
  EXPECT_THROW(decode_checkpoint("garbage"), IoError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3)), IoError);
  EXPECT_THROW(decode_checkpoint(good + "x"), IoError);
  std::string bad_stage = good;
  bad_stage.replace(bad_stage.find("model.stage=early"), 17, "model.stage=never");
  EXPECT_THROW(decode_checkpoint(bad_stage), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/avf.ckpt"), IoError);
}

}  // namespace
}  // namespace avf
