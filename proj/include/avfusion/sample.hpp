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

#include <string>
#include <vector>

#include "avfusion/tensor.hpp"

namespace avf {

struct Waveform {
  std::vector<Real> samples;
  double sample_rate = 16000.0;

  std::size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// One time-aligned training/evaluation sample. audio and video share the
// row count (one row per 40 ms video frame); transcript holds vocabulary ids
// of the spoken tokens, without sos/eos.
struct FeaturePair {
  std::string id;
  Tensor audio;  // [t x d_audio_in]
  Tensor video;  // [t x d_video_in]
  std::vector<int> transcript;

  std::size_t frames() const { return audio.rows(); }
};

}  // namespace avf
