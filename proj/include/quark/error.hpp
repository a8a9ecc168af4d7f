// Copyright 2026 The Quark Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef QUARK_ERROR_HPP_
#define QUARK_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace quark {

enum class ErrorKind {
  kInvalidArgument,   // bad parameter or malformed request
  kDimension,         // tensor/model shape mismatch
  kCalibration,       // operation requires recorded activation ranges
  kCapacity,          // table or resource budget exceeded
  kOverflow,          // checked integer width exceeded
  kMatMiss,           // exact-match lookup missed a key the compiler owns
  kStageOverflow,     // pipeline layout does not fit the stage budget
  kValidation,        // static program check failed
  kParse,             // file format error
  kIo,                // filesystem error
  kNonTermination,    // recirculation guard tripped
  kNumeric,           // NaN/Inf where finite values are required
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace quark

#endif  // QUARK_ERROR_HPP_
