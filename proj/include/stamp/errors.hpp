// Copyright 2026 The STAMP-sim Authors.
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

namespace stamp {

// Dimension or length mismatch between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf encountered in inputs or produced by an update.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration, missing prototype, empty update list, ...
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller violated an operation precondition (e.g. empty candidate set).
struct PreconditionError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace stamp
