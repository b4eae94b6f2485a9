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

#include "avfusion/gradcheck.hpp"
#include "avfusion/model.hpp"
#include "model_probes.hpp"
#include "test_util.hpp"

namespace avf {
namespace {

using testing::probe_causality;
using testing::probe_padding;
using testing::random_pair;

void zero_matching(ParamStore& store, const std::string& needle) {
  for (const auto& e : store.entries())
    if (e.path.find(needle) != std::string::npos) {
      Tensor t = e.tensor;
      fill(t, 0);
    }
}

void copy_by_path(const ParamStore& from, ParamStore& to) {
  for (const auto& e : to.entries()) {
    Tensor dst = e.tensor;
    const Tensor& src = from.get(e.path);
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

// Mean smoothed cross-entropy recomputed with scalar loops.
double loss_oracle(const std::vector<Tensor>& logits, const Batch& b, double eps) {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Tensor& x = logits[i];
    const std::size_t v = x.cols();
    for (std::size_t r = 0; r < b.target_len[i]; ++r) {
      double z = 0;
      for (std::size_t k = 0; k < v; ++k) z += std::exp(double(x.at(r, k)));
      for (std::size_t k = 0; k < v; ++k) {
        const double q = int(k) == b.targets[i][r] ? 1 - eps : eps / double(v - 1);
        total -= q * (x.at(r, k) - std::log(z));
      }
      ++count;
    }
  }
  return total / double(count);
}

TEST(Model, AllNineVariantsBuildWithExpectedShapes) {
  const ModelConfig cfg = gradcheck_config();
  std::mt19937_64 rng(1);
  ASSERT_EQ(all_fusion_specs().size(), 9u);
  for (FusionSpec spec : all_fusion_specs()) {
    ModelParams m = build_model(cfg, spec, 3);
    for (std::size_t t : {1u, 4u}) {
      FeaturePair s = random_pair(cfg, t, 3, rng);
      NoGradScope ng;
      EncoderMemory mem = encode(s.audio, s.video, t, m, RunMode{});
      EXPECT_EQ(mem.audio.shape(), (Shape{t, 8})) << spec.name();
      EXPECT_EQ(mem.video.defined(), spec.stage == FusionStage::Late) << spec.name();
      if (mem.video.defined()) EXPECT_EQ(mem.video.shape(), (Shape{t, 8}));
      std::vector<int> in{Vocabulary::kSos, 3, 4, 5};
      EXPECT_EQ(decode_forward(mem, in, m, RunMode{}).shape(), (Shape{4, cfg.vocab_size}));
    }
  }
}

TEST(Model, InputErrors) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams m = build_model(cfg, {FusionStage::Early, FusionBlockKind::Align}, 0);
  EXPECT_THROW(encode(Tensor({3, 6}), Tensor({4, 5}), 3, m, RunMode{}), AlignmentError);
  EXPECT_THROW(encode(Tensor({3, 7}), Tensor({3, 5}), 3, m, RunMode{}), DimensionError);
  EncoderMemory mem = encode(Tensor({3, 6}), Tensor({3, 5}), 3, m, RunMode{});
  EXPECT_THROW(decode_forward(mem, std::vector<int>{}, m, RunMode{}), UsageError);
  EXPECT_THROW(decode_forward(mem, std::vector<int>{3, 4}, m, RunMode{}), UsageError);
}

TEST(Model, StageParityAtDefaultConfig) {
  const ModelConfig cfg;
  for (auto block : {FusionBlockKind::Concat, FusionBlockKind::Align, FusionBlockKind::Cross}) {
    const double early = double(count_parameters(cfg, {FusionStage::Early, block}));
    for (auto stage : {FusionStage::Middle, FusionStage::Late}) {
      const double other = double(count_parameters(cfg, {stage, block}));
      EXPECT_LT(std::abs(other - early) / early, 0.10) << to_string(stage) << "/" << to_string(block);
    }
  }
}

TEST(Model, SeparateDepthAtReferenceScaleIsFive) {
  EXPECT_EQ(ModelConfig::reference_scale().separate_depth(), 5u);
  ModelConfig c;
  c.n_separate_blocks = 3;
  EXPECT_EQ(c.separate_depth(), 3u);
}

TEST(Model, ParameterPathsAreUniqueAndCounted) {
  ModelParams m = build_model(gradcheck_config(), {FusionStage::Late, FusionBlockKind::Cross}, 0);
  std::size_t total = 0;
  for (const auto& e : m.store.entries()) total += e.tensor.size();
  EXPECT_EQ(total, m.store.parameter_count());
  EXPECT_TRUE(m.store.contains("decoder.0.cross_attn_video.query.weight"));
  EXPECT_FALSE(m.store.contains("fusion.fc.weight"));
  EXPECT_EQ(m.store.parameter_count("fusion."), 2 * (4u * 64 + 4 * 8));
}

TEST(Model, DeterministicForFixedSeed) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams a = build_model(cfg, {FusionStage::Middle, FusionBlockKind::Cross}, 11);
  ModelParams b = build_model(cfg, {FusionStage::Middle, FusionBlockKind::Cross}, 11);
  auto samples = gradcheck_samples(cfg, 4);
  Batch batch = make_batch(samples);
  NoGradScope ng;
  Tensor la = sample_logits(batch, 0, a, RunMode{}), lb = sample_logits(batch, 0, b, RunMode{});
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i], lb[i]);
}

TEST(EncodeEarly, ConcatWithAudioSelectorIsAudioOnlyEncoder) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams m = build_model(cfg, {FusionStage::Early, FusionBlockKind::Concat}, 5);
  Tensor w = m.fusion->fc->weight, b = m.fusion->fc->bias;
  fill(w, 0);
  fill(b, 0);
  for (std::size_t i = 0; i < 8; ++i) w.at(i, i) = 1;
  std::mt19937_64 rng(2);
  FeaturePair s = random_pair(cfg, 5, 1, rng);
  NoGradScope ng;
  Tensor mem = encode_early(s.audio, Tensor({5, cfg.d_video_in}), 4, m, RunMode{}).audio;
  std::vector<EncoderBlockParams> chain = m.audio_encoder;
  chain.insert(chain.end(), m.shared_encoder.begin(), m.shared_encoder.end());
  Tensor ref = run_encoder_stack(project_input(m.audio_in, s.audio), chain, cfg.attention,
                                 key_padding_mask(5, 5, 4), RunMode{});
  EXPECT_LT(testing::max_abs_diff(mem.data(), ref.data()), 1e-6);
}

TEST(EncodeMiddle, EqualsEarlyWithoutSharedBlocks) {
  ModelConfig cfg = gradcheck_config();
  cfg.n_shared_blocks = 0;
  std::mt19937_64 rng(3);
  FeaturePair s = random_pair(cfg, 6, 1, rng);
  for (auto block : {FusionBlockKind::Concat, FusionBlockKind::Align, FusionBlockKind::Cross}) {
    ModelParams early = build_model(cfg, {FusionStage::Early, block}, 9);
    ModelParams middle = build_model(cfg, {FusionStage::Middle, block}, 9);
    NoGradScope ng;
    Tensor e = encode_early(s.audio, s.video, 5, early, RunMode{}).audio;
    Tensor mm = encode_middle(s.audio, s.video, 5, middle, RunMode{}).audio;
    EXPECT_LT(testing::max_abs_diff(e.data(), mm.data()), 1e-12) << to_string(block);
  }
}

TEST(EncodeLate, AlignMemoryIsResidualAttention) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams m = build_model(cfg, {FusionStage::Late, FusionBlockKind::Align}, 6);
  std::mt19937_64 rng(4);
  FeaturePair s = random_pair(cfg, 5, 1, rng);
  NoGradScope ng;
  EncoderMemory mem = encode_late(s.audio, s.video, 3, m, RunMode{});
  const Mask mask = key_padding_mask(5, 5, 3);
  Tensor a = run_encoder_stack(project_input(m.audio_in, s.audio), m.audio_encoder, cfg.attention,
                               mask, RunMode{});
  Tensor v = run_encoder_stack(project_input(m.video_in, s.video), m.video_encoder, cfg.attention,
                               mask, RunMode{});
  Tensor att = multi_head_attention(a, v, *m.fusion->audio_attn, cfg.attention, &mask);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(mem.audio[i], a[i] + att[i], 1e-12);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(mem.video[i], v[i]);
}

TEST(EncodeLate, SilentVideoBranchLeavesAudioMemory) {
  // Zero biases plus a zero gain on the last video normalization make the
  // video memory exactly zero, so the aligned audio memory is unimodal.
  const ModelConfig cfg = gradcheck_config();
  ModelParams m = build_model(cfg, {FusionStage::Late, FusionBlockKind::Align}, 7);
  zero_matching(m.store, ".bias");
  Tensor g = m.video_encoder.back().norm2.gain;
  fill(g, 0);
  std::mt19937_64 rng(5);
  FeaturePair s = random_pair(cfg, 4, 1, rng);
  NoGradScope ng;
  EncoderMemory mem = encode_late(s.audio, Tensor({4, cfg.d_video_in}), 4, m, RunMode{});
  for (Real x : mem.video.data()) EXPECT_EQ(x, 0.0);
  Tensor ref = run_encoder_stack(project_input(m.audio_in, s.audio), m.audio_encoder,
                                 cfg.attention, key_padding_mask(4, 4, 4), RunMode{});
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(mem.audio[i], ref[i]);
}

TEST(DecodeForward, DualAttentionWithZeroVideoMemoryMatchesSingle) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams dual = build_model(cfg, {FusionStage::Late, FusionBlockKind::Cross}, 8);
  zero_matching(dual.store, "cross_attn_video.value.bias");
  zero_matching(dual.store, "cross_attn_video.output.bias");
  ModelConfig single_cfg = cfg;
  single_cfg.late_audio_only = true;
  ModelParams single = build_model(single_cfg, {FusionStage::Late, FusionBlockKind::Cross}, 0);
  copy_by_path(dual.store, single.store);

  std::mt19937_64 rng(6);
  EncoderMemory mem{testing::random_tensor({5, 8}, rng), Tensor({5, 8}), 4};
  std::vector<int> in{Vocabulary::kSos, 4, 3, 6};
  NoGradScope ng;
  Tensor a = decode_forward(mem, in, dual, RunMode{});
  Tensor b = decode_forward(EncoderMemory{mem.audio, {}, 4}, in, single, RunMode{});
  EXPECT_LT(testing::max_abs_diff(a.data(), b.data()), 1e-6);
}

TEST(DecodeForward, CausalForEveryVariant) {
  const ModelConfig cfg = gradcheck_config();
  std::mt19937_64 rng(7);
  for (FusionSpec spec : all_fusion_specs()) {
    ModelParams m = build_model(cfg, spec, 2);
    auto probe = probe_causality(m, random_pair(cfg, 4, 4, rng), 1);
    EXPECT_EQ(probe.max_future_grad, 0.0) << spec.name();
    EXPECT_TRUE(probe.past_reached) << spec.name();
  }
}

TEST(ForwardLoss, PaddingInvarianceForEveryVariant) {
  const ModelConfig cfg = gradcheck_config();
  std::mt19937_64 rng(8);
  for (FusionSpec spec : all_fusion_specs()) {
    ModelParams m = build_model(cfg, spec, 4);
    EXPECT_LT(probe_padding(m, random_pair(cfg, 4, 3, rng), 5, 2), 1e-6) << spec.name();
  }
}

TEST(ForwardLoss, UniformLogitsGiveLogVocab) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams m = build_model(cfg, {FusionStage::Early, FusionBlockKind::Align}, 1);
  zero_matching(m.store, "decoder.output");
  Batch b = make_batch(gradcheck_samples(cfg, 1));
  for (Real eps : {Real(0), Real(0.1)}) {
    NoGradScope ng;
    EXPECT_NEAR(forward_loss(b, m, eps, RunMode{}).item(), std::log(double(cfg.vocab_size)), 1e-12);
  }
}

TEST(ForwardLoss, ConfidentCorrectModelApproachesZero) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams m = build_model(cfg, {FusionStage::Middle, FusionBlockKind::Concat}, 1);
  zero_matching(m.store, "decoder.output");
  Tensor bias = m.output.bias;
  bias.mutable_data()[Vocabulary::kEos] = 60;
  std::mt19937_64 rng(9);
  FeaturePair s = random_pair(cfg, 3, 0, rng);
  Batch b = make_batch(std::span<const FeaturePair>(&s, 1));
  NoGradScope ng;
  EXPECT_LT(forward_loss(b, m, 0, RunMode{}).item(), 1e-20);
}

TEST(ForwardLoss, MatchesScalarRecomputationAndLengthWeightedMean) {
  const ModelConfig cfg = gradcheck_config();
  std::mt19937_64 rng(10);
  std::vector<FeaturePair> samples;
  for (std::size_t i = 0; i < 4; ++i) samples.push_back(random_pair(cfg, 2 + i, 1 + (i * 2) % 5, rng));
  for (FusionSpec spec : all_fusion_specs()) {
    ModelParams m = build_model(cfg, spec, 3);
    NoGradScope ng;
    Batch b = make_batch(samples);
    std::vector<Tensor> logits;
    for (std::size_t i = 0; i < b.size(); ++i) logits.push_back(sample_logits(b, i, m, RunMode{}));
    const double loss = forward_loss(b, m, Real(0.1), RunMode{}).item();
    EXPECT_NEAR(loss, loss_oracle(logits, b, 0.1), 1e-12) << spec.name();

    double weighted = 0;
    std::size_t total = 0;
    for (const auto& s : samples) {
      Batch one = make_batch(std::span<const FeaturePair>(&s, 1));
      weighted += forward_loss(one, m, Real(0.1), RunMode{}).item() * double(one.target_len[0]);
      total += one.target_len[0];
    }
    EXPECT_NEAR(loss, weighted / double(total), 1e-6) << spec.name();

    std::vector<FeaturePair> reversed(samples.rbegin(), samples.rend());
    EXPECT_NEAR(loss, forward_loss(make_batch(reversed), m, Real(0.1), RunMode{}).item(), 1e-12);
  }
}

TEST(Gradcheck, TinyModelsPassFiniteDifferences) {
  for (FusionSpec spec : {FusionSpec{FusionStage::Early, FusionBlockKind::Align},
                          FusionSpec{FusionStage::Late, FusionBlockKind::Cross}}) {
    GradcheckReport r = gradcheck_spec(spec);
    EXPECT_TRUE(r.passed()) << spec.name() << " worst " << r.worst();
    EXPECT_EQ(r.groups.size(), build_model(gradcheck_config(), spec, 0).store.size());
  }
}

TEST(Gradcheck, ReportIsDeterministic) {
  GradcheckReport a = gradcheck_spec({FusionStage::Middle, FusionBlockKind::Concat});
  GradcheckReport b = gradcheck_spec({FusionStage::Middle, FusionBlockKind::Concat});
  ASSERT_EQ(a.groups.size(), b.groups.size());
  for (std::size_t i = 0; i < a.groups.size(); ++i) {
    EXPECT_EQ(a.groups[i].path, b.groups[i].path);
    EXPECT_EQ(a.groups[i].max_rel_error, b.groups[i].max_rel_error);
  }
}

// Squares its input on the forward pass but reports 3x on the backward pass.
Tensor broken_square(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.mutable_data()[i] = x[i] * x[i];
  if (detail::tracking({&x})) {
    TensorNode* xn = x.node().get();
    TensorNode* on = out.node().get();
    detail::record({&x}, out, [xn, on] {
      auto g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3 * xn->data[i] * on->grad[i];
    });
  }
  return out;
}

TEST(Gradcheck, CorruptedBackwardRuleIsReportedByPath) {
  const ModelConfig cfg = gradcheck_config();
  ModelParams m = build_model(cfg, {FusionStage::Early, FusionBlockKind::Cross}, 0);
  Batch b = make_batch(gradcheck_samples(cfg, 0));
  GradcheckReport r = check_gradients(m, [&](const ModelParams& p) {
    return add(forward_loss(b, p, Real(0.1), RunMode{}), sum(broken_square(p.fusion->fc->weight)));
  });
  EXPECT_FALSE(r.passed());
  EXPECT_EQ(r.failures(), std::vector<std::string>{"fusion.fc.weight"});
}

}  // namespace
}  // namespace avf
