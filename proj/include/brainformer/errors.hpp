// Copyright 2026 The Brainformer Authors.
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

#pragma once

#include <stdexcept>
#include <string>

namespace brainformer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad caller-supplied data: out-of-range ids, k larger than a row, ...
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid architecture or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward twice on one tape.
class UsageError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN/Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Training could not continue (NaN gradients, divergence).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace brainformer
