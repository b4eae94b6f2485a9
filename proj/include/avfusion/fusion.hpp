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

// Audio-visual fusion blocks. All three emit a [t x d_model] stream:
//
//   concat: FC([a ; v])
//   align:  a' = a + MHA(q=a, kv=v);            FC([a' ; v])
//   cross:  a' = a + MHA_a(q=a, kv=v);
//           v' = v + MHA_v(q=v, kv=a);          FC([a' ; v'])
//
// There is no normalization or dropout inside the block. When the block is
// used after the encoders (late fusion) the FC is omitted and the enhanced
// streams are consumed separately.

#include <optional>
#include <string>

#include "avfusion/attention.hpp"

namespace avf {

enum class FusionBlockKind { Concat, Align, Cross };

inline std::string to_string(FusionBlockKind kind) {
  switch (kind) {
    case FusionBlockKind::Concat: return "concat";
    case FusionBlockKind::Align: return "align";
    case FusionBlockKind::Cross: return "cross";
  }
  return "?";
}

inline FusionBlockKind parse_fusion_block(const std::string& s) {
  if (s == "concat") return FusionBlockKind::Concat;
  if (s == "align") return FusionBlockKind::Align;
  if (s == "cross") return FusionBlockKind::Cross;
  throw ConfigError("fusion block '" + s + "' is not one of concat|align|cross");
}

inline std::string display_name(FusionBlockKind kind) {
  switch (kind) {
    case FusionBlockKind::Concat: return "AV-concat";
    case FusionBlockKind::Align: return "AV-align";
    case FusionBlockKind::Cross: return "AV-cross";
  }
  return "?";
}

struct FusionParams {
  FusionBlockKind kind = FusionBlockKind::Concat;
  std::optional<MhaParams> audio_attn;  // align, cross
  std::optional<MhaParams> video_attn;  // cross
  std::optional<LinearParams> fc;       // [2 d_model x d_model]; absent for late fusion
};

inline FusionParams make_fusion(ParamStore& store, const std::string& prefix,
                                FusionBlockKind kind, std::size_t d_model, bool with_projection,
                                Rng& rng) {
  FusionParams p;
  p.kind = kind;
  if (kind != FusionBlockKind::Concat) {
    p.audio_attn = make_mha(store, prefix + ".audio_attn", d_model, rng);
  }
  if (kind == FusionBlockKind::Cross) {
    p.video_attn = make_mha(store, prefix + ".video_attn", d_model, rng);
  }
  if (with_projection) p.fc = make_linear(store, prefix + ".fc", 2 * d_model, d_model, rng);
  return p;
}

struct FusionResult {
  Tensor output;  // projected fused stream; undefined without an FC
  Tensor audio;   // enhanced audio before concatenation
  Tensor video;   // enhanced video before concatenation
};

namespace detail {

inline void check_streams(const Tensor& a, const Tensor& v) {
  if (a.rank() != 2 || v.rank() != 2) throw DimensionError("fusion streams must be matrices");
  if (a.rows() != v.rows()) {
    throw AlignmentError("audio has " + std::to_string(a.rows()) + " frames, video has " +
                         std::to_string(v.rows()));
  }
  if (a.cols() != v.cols()) throw DimensionError("fusion streams differ in width");
}

inline Tensor project(const FusionParams& p, const Tensor& a, const Tensor& v) {
  if (!p.fc) return {};
  return apply(*p.fc, concat_last_axis(a, v));
}

}  // namespace detail

inline FusionResult av_concat(const Tensor& a, const Tensor& v, const FusionParams& p) {
  detail::check_streams(a, v);
  return {detail::project(p, a, v), a, v};
}

// `key_mask` is the padding mask of the key-side modality.
inline FusionResult av_align(const Tensor& a, const Tensor& v, const FusionParams& p,
                             const AttentionConfig& cfg, const Mask* key_mask) {
  detail::check_streams(a, v);
  if (!p.audio_attn) throw UsageError("align fusion requires audio-side attention parameters");
  Tensor a_enh = add(a, multi_head_attention(a, v, *p.audio_attn, cfg, key_mask));
  return {detail::project(p, a_enh, v), a_enh, v};
}

inline FusionResult av_cross(const Tensor& a, const Tensor& v, const FusionParams& p,
                             const AttentionConfig& cfg, const Mask* key_mask) {
  detail::check_streams(a, v);
  if (!p.audio_attn || !p.video_attn) {
    throw UsageError("cross fusion requires audio- and video-side attention parameters");
  }
  Tensor a_enh = add(a, multi_head_attention(a, v, *p.audio_attn, cfg, key_mask));
  Tensor v_enh = add(v, multi_head_attention(v, a, *p.video_attn, cfg, key_mask));
  return {detail::project(p, a_enh, v_enh), a_enh, v_enh};
}

inline FusionResult fuse(const Tensor& a, const Tensor& v, const FusionParams& p,
                         const AttentionConfig& cfg, const Mask* key_mask) {
  switch (p.kind) {
    case FusionBlockKind::Concat: return av_concat(a, v, p);
    case FusionBlockKind::Align: return av_align(a, v, p, cfg, key_mask);
    case FusionBlockKind::Cross: return av_cross(a, v, p, cfg, key_mask);
  }
  throw UsageError("unknown fusion block");
}

}  // namespace avf
