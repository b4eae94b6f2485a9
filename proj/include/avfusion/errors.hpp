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

#include <stdexcept>
#include <string>

namespace avf {

// Base class for every error raised by the library. The CLI maps the
// subclasses onto process exit codes (see tools/avfusion.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define AVF_DEFINE_ERROR(Name)                  \
  class Name : public Error {                   \
   public:                                      \
    explicit Name(const std::string& what)      \
        : Error(std::string(#Name ": ") + what) {} \
  }

AVF_DEFINE_ERROR(DimensionError);
AVF_DEFINE_ERROR(ConfigError);
AVF_DEFINE_ERROR(UsageError);
AVF_DEFINE_ERROR(MaskingError);
AVF_DEFINE_ERROR(AlignmentError);
AVF_DEFINE_ERROR(LengthError);
AVF_DEFINE_ERROR(SignalError);
AVF_DEFINE_ERROR(StateError);
AVF_DEFINE_ERROR(NumericError);
AVF_DEFINE_ERROR(IoError);

#undef AVF_DEFINE_ERROR

}  // namespace avf
