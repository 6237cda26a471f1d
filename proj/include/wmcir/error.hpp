// Copyright 2026 The wmcir Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace wmcir {

enum class ErrorCode {
  kIo,
  kFormat,
  kValidation,
  kNotFound,
  kInvalidArgument,
  kDegenerateQuery,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kFormat: return "format_error";
    case ErrorCode::kValidation: return "validation_error";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDegenerateQuery: return "degenerate_query";
  }
  return "unknown";
}

/// Every failure raised by the library. The code is machine readable (the
/// service forwards it verbatim), the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace wmcir
