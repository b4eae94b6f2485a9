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

// The nine audio-visual encoder/decoder variants: fusion stage
// {early, middle, late} x fusion block {concat, align, cross}.
//
//   early:  per-modality premix blocks -> fusion (+FC) -> shared blocks
//   middle: per-modality full-depth stacks -> fusion (+FC)
//   late:   per-modality full-depth stacks -> fusion without FC; the decoder
//           attends to both memories (dual attention)
//
// Middle/late per-modality depth defaults to ceil((2 * premix + shared) / 2)
// so that the encoder block count, and hence the parameter count, of the
// three stages stays comparable.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "avfusion/attention.hpp"
#include "avfusion/fusion.hpp"
#include "avfusion/loss.hpp"
#include "avfusion/sample.hpp"
#include "avfusion/seed.hpp"
#include "avfusion/vocab.hpp"

namespace avf {

enum class FusionStage { Early, Middle, Late };

inline std::string to_string(FusionStage stage) {
  switch (stage) {
    case FusionStage::Early: return "early";
    case FusionStage::Middle: return "middle";
    case FusionStage::Late: return "late";
  }
  return "?";
}

inline FusionStage parse_fusion_stage(const std::string& s) {
  if (s == "early") return FusionStage::Early;
  if (s == "middle") return FusionStage::Middle;
  if (s == "late") return FusionStage::Late;
  throw ConfigError("fusion stage '" + s + "' is not one of early|middle|late");
}

inline std::string display_name(FusionStage stage) {
  switch (stage) {
    case FusionStage::Early: return "Early-fusion";
    case FusionStage::Middle: return "Middle-fusion";
    case FusionStage::Late: return "Late-fusion";
  }
  return "?";
}

struct FusionSpec {
  FusionStage stage = FusionStage::Early;
  FusionBlockKind block = FusionBlockKind::Align;

  bool operator==(const FusionSpec&) const = default;
  auto operator<=>(const FusionSpec&) const = default;

  std::string name() const { return to_string(stage) + "/" + to_string(block); }
};

inline std::vector<FusionSpec> all_fusion_specs() {
  std::vector<FusionSpec> specs;
  for (FusionStage s : {FusionStage::Early, FusionStage::Middle, FusionStage::Late})
    for (FusionBlockKind b : {FusionBlockKind::Concat, FusionBlockKind::Align, FusionBlockKind::Cross})
      specs.push_back({s, b});
  return specs;
}

enum class DualCombiner { Sum, ConcatProjection };

struct ModelConfig {
  AttentionConfig attention{64, 4};
  std::size_t d_ff = 256;
  std::size_t n_premix_blocks = 1;
  std::size_t n_shared_blocks = 2;
  std::size_t n_separate_blocks = 0;  // 0: derived from premix/shared for parity
  std::size_t n_decoder_blocks = 2;
  std::size_t vocab_size = 11;
  std::size_t d_audio_in = 320;
  std::size_t d_video_in = 512;
  DualCombiner late_combiner = DualCombiner::Sum;
  bool late_audio_only = false;  // late fusion decoder sees only the enhanced audio memory
  bool audio_only = false;       // unimodal ablation: no video path at all

  std::size_t separate_depth() const {
    if (n_separate_blocks > 0) return n_separate_blocks;
    return (2 * n_premix_blocks + n_shared_blocks + 1) / 2;
  }

  std::size_t d_model() const { return attention.d_model; }

  void validate() const {
    attention.validate();
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (vocab_size < Vocabulary::kFirstSymbol + 2) throw ConfigError("vocab_size too small");
    if (d_audio_in == 0 || d_video_in == 0) throw ConfigError("input widths must be positive");
    if (n_premix_blocks + n_shared_blocks == 0 && separate_depth() == 0) {
      throw ConfigError("encoder needs at least one block");
    }
    if (n_decoder_blocks == 0) throw ConfigError("decoder needs at least one block");
  }

  // Reference dimensions of the full-size model (16 heads, 512/2048/512 FFN,
  // three premix blocks).
  static ModelConfig reference_scale() {
    ModelConfig c;
    c.attention = {512, 16};
    c.d_ff = 2048;
    c.n_premix_blocks = 3;
    c.n_shared_blocks = 3;
    c.n_decoder_blocks = 6;
    return c;
  }
};

struct DecoderBlockParams {
  MhaParams self_attn;
  LayerNormParams norm1;
  MhaParams cross_attn;                     // over the (audio) memory
  std::optional<MhaParams> cross_attn_video;  // late fusion dual attention
  std::optional<LinearParams> dual_fc;        // concat combiner
  LayerNormParams norm2;
  FeedForwardParams ffn;
  LayerNormParams norm3;
};

// All learnable tensors of one model variant. The typed handles alias the
// tensors owned by `store`, so the struct is move-only.
struct ModelParams {
  ModelConfig config;
  FusionSpec spec;
  ParamStore store;
  LinearParams audio_in, video_in;
  std::vector<EncoderBlockParams> audio_encoder, video_encoder, shared_encoder;
  std::optional<FusionParams> fusion;
  Tensor token_embedding;
  std::vector<DecoderBlockParams> decoder;
  LinearParams output;

  ModelParams() = default;
  ModelParams(ModelParams&&) = default;
  ModelParams& operator=(ModelParams&&) = default;
  ModelParams(const ModelParams&) = delete;
  ModelParams& operator=(const ModelParams&) = delete;

  bool dual_memory() const {
    return !config.audio_only && spec.stage == FusionStage::Late && !config.late_audio_only;
  }
};

inline ModelParams build_model(const ModelConfig& cfg, FusionSpec spec, std::uint64_t seed) {
  cfg.validate();
  ModelParams m;
  m.config = cfg;
  m.spec = spec;
  Rng rng = make_rng(seed, "init");
  const std::size_t d = cfg.d_model();
  ParamStore& s = m.store;

  m.audio_in = make_linear(s, "input.audio", cfg.d_audio_in, d, rng);
  if (!cfg.audio_only) m.video_in = make_linear(s, "input.video", cfg.d_video_in, d, rng);

  auto stack = [&](const std::string& name, std::size_t depth) {
    std::vector<EncoderBlockParams> blocks;
    for (std::size_t i = 0; i < depth; ++i)
      blocks.push_back(make_encoder_block(s, "encoder." + name + "." + std::to_string(i), d,
                                          cfg.d_ff, rng));
    return blocks;
  };

  if (cfg.audio_only) {
    m.audio_encoder = stack("audio", cfg.n_premix_blocks + cfg.n_shared_blocks);
  } else if (spec.stage == FusionStage::Early) {
    m.audio_encoder = stack("audio", cfg.n_premix_blocks);
    m.video_encoder = stack("video", cfg.n_premix_blocks);
    m.fusion = make_fusion(s, "fusion", spec.block, d, true, rng);
    m.shared_encoder = stack("shared", cfg.n_shared_blocks);
  } else {
    m.audio_encoder = stack("audio", cfg.separate_depth());
    m.video_encoder = stack("video", cfg.separate_depth());
    m.fusion = make_fusion(s, "fusion", spec.block, d, spec.stage == FusionStage::Middle, rng);
  }

  m.token_embedding = s.add("decoder.embedding.weight", {cfg.vocab_size, d});
  xavier_uniform(m.token_embedding, cfg.vocab_size, d, rng);
  const bool dual = m.dual_memory();
  for (std::size_t i = 0; i < cfg.n_decoder_blocks; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    DecoderBlockParams b;
    b.self_attn = make_mha(s, p + ".self_attn", d, rng);
    b.norm1 = make_layer_norm(s, p + ".norm1", d);
    b.cross_attn = make_mha(s, p + ".cross_attn", d, rng);
    if (dual) {
      b.cross_attn_video = make_mha(s, p + ".cross_attn_video", d, rng);
      if (cfg.late_combiner == DualCombiner::ConcatProjection) {
        b.dual_fc = make_linear(s, p + ".dual_fc", 2 * d, d, rng);
      }
    }
    b.norm2 = make_layer_norm(s, p + ".norm2", d);
    b.ffn = make_ffn(s, p + ".ffn", d, cfg.d_ff, rng);
    b.norm3 = make_layer_norm(s, p + ".norm3", d);
    m.decoder.push_back(std::move(b));
  }
  m.output = make_linear(s, "decoder.output", d, cfg.vocab_size, rng);
  return m;
}

inline std::size_t count_parameters(const ModelConfig& cfg, FusionSpec spec) {
  return build_model(cfg, spec, 0).store.parameter_count();
}

// Encoder output. For single-memory variants only `audio` is set (it holds
// the fused memory); late fusion sets both.
struct EncoderMemory {
  Tensor audio;
  Tensor video;
  std::size_t length = 0;  // valid (non-padded) rows
};

namespace detail {

inline void check_inputs(const Tensor& a, const Tensor* v, std::size_t length,
                         const ModelConfig& cfg) {
  if (a.rank() != 2 || a.cols() != cfg.d_audio_in) {
    throw DimensionError("audio features must be [t x " + std::to_string(cfg.d_audio_in) + "]");
  }
  if (v != nullptr) {
    if (v->rank() != 2 || v->cols() != cfg.d_video_in) {
      throw DimensionError("video features must be [t x " + std::to_string(cfg.d_video_in) + "]");
    }
    if (v->rows() != a.rows()) {
      throw AlignmentError("audio has " + std::to_string(a.rows()) + " rows, video " +
                           std::to_string(v->rows()));
    }
  }
  if (length == 0 || length > a.rows()) {
    throw DimensionError("valid length " + std::to_string(length) + " outside [1, " +
                         std::to_string(a.rows()) + "]");
  }
}

}  // namespace detail

// Input projection followed by the fixed sinusoidal positions.
inline Tensor project_input(const LinearParams& p, const Tensor& feats) {
  return add(apply(p, feats), sinusoidal_positions(feats.rows(), p.weight.cols()));
}

inline Tensor run_encoder_stack(Tensor x, std::span<const EncoderBlockParams> blocks,
                                const AttentionConfig& cfg, const Mask& mask,
                                const RunMode& mode) {
  for (const auto& b : blocks) x = encoder_block(x, b, cfg, mask, mode);
  return x;
}

inline EncoderMemory encode_early(const Tensor& a_feats, const Tensor& v_feats,
                                  std::size_t length, const ModelParams& m,
                                  const RunMode& mode) {
  detail::check_inputs(a_feats, &v_feats, length, m.config);
  const auto& cfg = m.config.attention;
  const Mask mask = key_padding_mask(a_feats.rows(), a_feats.rows(), length);
  Tensor a = run_encoder_stack(project_input(m.audio_in, a_feats), m.audio_encoder, cfg, mask, mode);
  Tensor v = run_encoder_stack(project_input(m.video_in, v_feats), m.video_encoder, cfg, mask, mode);
  Tensor fused = fuse(a, v, *m.fusion, cfg, &mask).output;
  return {run_encoder_stack(fused, m.shared_encoder, cfg, mask, mode), {}, length};
}

inline EncoderMemory encode_middle(const Tensor& a_feats, const Tensor& v_feats,
                                   std::size_t length, const ModelParams& m,
                                   const RunMode& mode) {
  detail::check_inputs(a_feats, &v_feats, length, m.config);
  const auto& cfg = m.config.attention;
  const Mask mask = key_padding_mask(a_feats.rows(), a_feats.rows(), length);
  Tensor a = run_encoder_stack(project_input(m.audio_in, a_feats), m.audio_encoder, cfg, mask, mode);
  Tensor v = run_encoder_stack(project_input(m.video_in, v_feats), m.video_encoder, cfg, mask, mode);
  return {fuse(a, v, *m.fusion, cfg, &mask).output, {}, length};
}

inline EncoderMemory encode_late(const Tensor& a_feats, const Tensor& v_feats,
                                 std::size_t length, const ModelParams& m,
                                 const RunMode& mode) {
  detail::check_inputs(a_feats, &v_feats, length, m.config);
  const auto& cfg = m.config.attention;
  const Mask mask = key_padding_mask(a_feats.rows(), a_feats.rows(), length);
  Tensor a = run_encoder_stack(project_input(m.audio_in, a_feats), m.audio_encoder, cfg, mask, mode);
  Tensor v = run_encoder_stack(project_input(m.video_in, v_feats), m.video_encoder, cfg, mask, mode);
  FusionResult r = fuse(a, v, *m.fusion, cfg, &mask);
  if (m.config.late_audio_only) return {r.audio, {}, length};
  return {r.audio, r.video, length};
}

inline EncoderMemory encode_audio_only(const Tensor& a_feats, std::size_t length,
                                       const ModelParams& m, const RunMode& mode) {
  detail::check_inputs(a_feats, nullptr, length, m.config);
  const Mask mask = key_padding_mask(a_feats.rows(), a_feats.rows(), length);
  return {run_encoder_stack(project_input(m.audio_in, a_feats), m.audio_encoder,
                            m.config.attention, mask, mode),
          {}, length};
}

inline EncoderMemory encode(const Tensor& a_feats, const Tensor& v_feats, std::size_t length,
                            const ModelParams& m, const RunMode& mode) {
  if (m.config.audio_only) return encode_audio_only(a_feats, length, m, mode);
  switch (m.spec.stage) {
    case FusionStage::Early: return encode_early(a_feats, v_feats, length, m, mode);
    case FusionStage::Middle: return encode_middle(a_feats, v_feats, length, m, mode);
    case FusionStage::Late: return encode_late(a_feats, v_feats, length, m, mode);
  }
  throw UsageError("unknown fusion stage");
}

// Scaled token embeddings for the decoder input (positions are added later).
inline Tensor embed_tokens(const ModelParams& m, std::span<const int> tokens) {
  if (tokens.empty()) throw UsageError("decoder input is empty");
  return scale(embedding(m.token_embedding, tokens),
               std::sqrt(static_cast<Real>(m.config.d_model())));
}

// Decoder stack over already-embedded inputs [t_y x d_model]; rows at or
// beyond target_len are padding. Returns logits [t_y x vocab].
inline Tensor decode_embedded(const EncoderMemory& mem, const Tensor& embedded,
                              std::size_t target_len, const ModelParams& m,
                              const RunMode& mode) {
  const auto& cfg = m.config.attention;
  const std::size_t ty = embedded.rows();
  if (target_len == 0 || target_len > ty) {
    throw UsageError("target length " + std::to_string(target_len) + " outside [1, " +
                     std::to_string(ty) + "]");
  }
  const bool dual = m.dual_memory();
  if (dual && !mem.video.defined()) throw UsageError("late fusion decoder needs both memories");
  const Mask self_mask = make_causal_mask(ty) & key_padding_mask(ty, ty, target_len);
  const Mask cross_mask = key_padding_mask(ty, mem.audio.rows(), mem.length);
  Tensor x = add(embedded, sinusoidal_positions(ty, cfg.d_model));
  for (const auto& b : m.decoder) {
    Tensor h = add(x, mode.drop(multi_head_attention(x, x, b.self_attn, cfg, &self_mask)));
    h = layer_norm(h, b.norm1.gain, b.norm1.bias, mode.layer_norm_eps);
    Tensor ctx = multi_head_attention(h, mem.audio, b.cross_attn, cfg, &cross_mask);
    if (dual) {
      Tensor ctx_v = multi_head_attention(h, mem.video, *b.cross_attn_video, cfg, &cross_mask);
      ctx = b.dual_fc ? apply(*b.dual_fc, concat_last_axis(ctx, ctx_v)) : add(ctx, ctx_v);
    }
    Tensor h2 = layer_norm(add(h, mode.drop(ctx)), b.norm2.gain, b.norm2.bias, mode.layer_norm_eps);
    x = layer_norm(add(h2, mode.drop(feed_forward(b.ffn, h2))), b.norm3.gain, b.norm3.bias,
                   mode.layer_norm_eps);
  }
  return apply(m.output, x);
}

// Teacher-forced decoder pass; `tokens` starts with sos.
inline Tensor decode_forward(const EncoderMemory& mem, std::span<const int> tokens,
                             std::size_t target_len, const ModelParams& m,
                             const RunMode& mode) {
  if (tokens.empty()) throw UsageError("decoder input is empty");
  if (tokens.front() != Vocabulary::kSos) throw UsageError("decoder input must start with sos");
  return decode_embedded(mem, embed_tokens(m, tokens), target_len, m, mode);
}

inline Tensor decode_forward(const EncoderMemory& mem, std::span<const int> tokens,
                             const ModelParams& m, const RunMode& mode) {
  return decode_forward(mem, tokens, tokens.size(), m, mode);
}

// Padded batch prepared for teacher forcing. Each sample keeps its own
// tensors; all are padded to the batch maxima.
struct Batch {
  std::vector<Tensor> audio, video;
  std::vector<std::size_t> frames;
  std::vector<std::vector<int>> decoder_input;  // sos + transcript, pad-filled
  std::vector<std::vector<int>> targets;        // transcript + eos, pad-filled
  std::vector<std::size_t> target_len;

  std::size_t size() const { return audio.size(); }
};

inline Tensor pad_rows(const Tensor& x, std::size_t rows) {
  if (x.rows() == rows) return x;
  if (x.rows() > rows) throw DimensionError("cannot pad to fewer rows");
  Tensor out({rows, x.cols()});
  std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  return out;
}

inline Batch make_batch(std::span<const FeaturePair* const> samples,
                        std::size_t extra_frames = 0, std::size_t extra_tokens = 0) {
  Batch b;
  std::size_t max_t = 0, max_y = 0;
  for (const FeaturePair* s : samples) {
    max_t = std::max(max_t, s->frames());
    max_y = std::max(max_y, s->transcript.size() + 1);
  }
  max_t += extra_frames;
  max_y += extra_tokens;
  for (const FeaturePair* s : samples) {
    b.audio.push_back(pad_rows(s->audio, max_t));
    b.video.push_back(s->video.defined() ? pad_rows(s->video, max_t) : Tensor());
    b.frames.push_back(s->frames());
    std::vector<int> in{Vocabulary::kSos};
    in.insert(in.end(), s->transcript.begin(), s->transcript.end());
    std::vector<int> out(s->transcript.begin(), s->transcript.end());
    out.push_back(Vocabulary::kEos);
    b.target_len.push_back(out.size());
    in.resize(max_y, Vocabulary::kPad);
    out.resize(max_y, Vocabulary::kPad);
    b.decoder_input.push_back(std::move(in));
    b.targets.push_back(std::move(out));
  }
  return b;
}

inline Batch make_batch(std::span<const FeaturePair> samples) {
  std::vector<const FeaturePair*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(ptrs);
}

inline Tensor sample_logits(const Batch& b, std::size_t i, const ModelParams& m,
                            const RunMode& mode) {
  EncoderMemory mem = encode(b.audio[i], b.video[i], b.frames[i], m, mode);
  return decode_forward(mem, b.decoder_input[i], b.target_len[i], m, mode);
}

// Mean label-smoothed cross-entropy over every non-padded target position
// of the batch.
inline Tensor forward_loss(const Batch& b, const ModelParams& m, Real label_smoothing,
                           const RunMode& mode) {
  if (b.size() == 0) throw UsageError("empty batch");
  Tensor total;
  std::size_t count = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    Tensor logits = sample_logits(b, i, m, mode);
    LossSum s = label_smoothed_ce_sum(logits, b.targets[i], label_smoothing, b.target_len[i]);
    total = total.defined() ? add(total, s.total) : s.total;
    count += s.count;
  }
  return scale(total, Real{1} / static_cast<Real>(count));
}

}  // namespace avf
