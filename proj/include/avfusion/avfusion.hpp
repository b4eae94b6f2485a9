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

// Umbrella header for the whole library.

#include "avfusion/errors.hpp"
#include "avfusion/tensor.hpp"
#include "avfusion/seed.hpp"
#include "avfusion/params.hpp"
#include "avfusion/optim.hpp"
#include "avfusion/attention.hpp"
#include "avfusion/fusion.hpp"
#include "avfusion/vocab.hpp"
#include "avfusion/sample.hpp"
#include "avfusion/model.hpp"
#include "avfusion/loss.hpp"
#include "avfusion/gradcheck.hpp"
#include "avfusion/fft.hpp"
#include "avfusion/audio.hpp"
#include "avfusion/noise.hpp"
#include "avfusion/corpus.hpp"
#include "avfusion/checkpoint.hpp"
#include "avfusion/trainer.hpp"
#include "avfusion/beam_search.hpp"
#include "avfusion/wer.hpp"
#include "avfusion/eval.hpp"
#include "avfusion/config.hpp"
