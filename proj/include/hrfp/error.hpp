/* Copyright 2026 The hrfp Authors. All Rights Reserved.

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

namespace hrfp {

// Root of every error the toolkit raises. Callers that only care about
// "did it work" catch this; the subclasses let tests and the CLI tell
// failure kinds apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value lies outside its admissible domain (token id >= vocab, r > N, ...).
class RangeError : public Error {
 public:
  using Error::Error;
};

// Zero-norm vectors, non-finite intermediates.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad magic, unknown version, malformed header.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A declared length runs past the end of the available bytes.
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Structurally readable, semantically wrong (missing tensor, bad shape).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Two artifacts cannot be compared at all (different layouts or shapes).
class IncomparableError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hrfp
