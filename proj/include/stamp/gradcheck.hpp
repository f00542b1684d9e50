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

#include <algorithm>
#include <cmath>
#include <functional>

#include "stamp/tensor.hpp"

namespace stamp {

// Central finite differences of a scalar function of the parameters.
inline ParamVector finite_difference_gradient(const std::function<double(const ParamVector&)>& f,
                                              const ParamVector& at, double step = 1e-4) {
  ParamVector grad(at.size());
  ParamVector probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps entries that
// are zero in both vectors from dividing by zero.
inline double max_relative_error(const ParamVector& a, const ParamVector& b, double floor = 1e-6) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace stamp
