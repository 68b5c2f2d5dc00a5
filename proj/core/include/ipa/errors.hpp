// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace ipa {

// Root of every error raised by the library. An optional stage tag is set by
// the recipe runner so that failures report which pipeline stage aborted.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message)
      : std::runtime_error(message), message_(message), full_(message) {}

  const char* what() const noexcept override { return full_.c_str(); }

  const std::string& message() const noexcept { return message_; }
  const std::string& stage() const noexcept { return stage_; }

  void set_stage(std::string stage) {
    stage_ = std::move(stage);
    full_ = stage_.empty() ? message_ : "[" + stage_ + "] " + message_;
  }

 private:
  std::string message_;
  std::string stage_;
  std::string full_;
};

#define IPA_DEFINE_ERROR(Name)                                      \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& message) : Error(message) {}   \
  }

IPA_DEFINE_ERROR(ShapeError);
IPA_DEFINE_ERROR(IndexError);
IPA_DEFINE_ERROR(NumericalError);
IPA_DEFINE_ERROR(DomainError);
IPA_DEFINE_ERROR(ContextOverflow);
IPA_DEFINE_ERROR(FrozenPolicyError);
IPA_DEFINE_ERROR(FormatError);
IPA_DEFINE_ERROR(ConfigMismatch);
IPA_DEFINE_ERROR(DegenerateProduct);
IPA_DEFINE_ERROR(InfiniteKL);
IPA_DEFINE_ERROR(StateError);
IPA_DEFINE_ERROR(RewardError);
IPA_DEFINE_ERROR(CodomainError);
IPA_DEFINE_ERROR(EmptyEvalSet);
IPA_DEFINE_ERROR(ConfigError);
IPA_DEFINE_ERROR(ReportError);

#undef IPA_DEFINE_ERROR

}  // namespace ipa
