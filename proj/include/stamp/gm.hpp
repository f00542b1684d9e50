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

// Gradient matching over a set of task (or client) gradients.
//
// Given gradients g_1..g_n with mean gbar, find simplex weights
//
//   gamma* = argmin_gamma  J(gamma) = (gamma G) . gbar + kappa |gbar| |gamma G|
//
// by projected gradient descent with heavy-ball momentum, then return
//
//   gbar + kappa |gbar| (gamma* G) / |gamma* G|
//
// i.e. gbar moved by exactly kappa |gbar| inside the ball around it.
// The solver works on the n x n Gram matrix, so its cost after setup is
// independent of the parameter dimension.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stamp/errors.hpp"
#include "stamp/tensor.hpp"

namespace stamp {

struct SimplexWeights {
  std::vector<double> gamma;

  std::size_t size() const { return gamma.size(); }
  double operator[](std::size_t i) const { return gamma[i]; }
};

struct GMConfig {
  double kappa = 0.5;            // search radius
  double inner_lr = 25.0;
  double momentum = 0.9;
  std::size_t inner_rounds = 100;
  std::size_t scheduler_step = 30;
  double scheduler_gamma = 0.5;
  bool normalize_inputs = false;  // unit-norm every input gradient first
  double degenerate_eps = 1e-12;

  void validate() const {
    if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw ConfigError("gm.kappa must be >= 0");
    if (!(inner_lr > 0.0)) throw ConfigError("gm.inner_lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("gm.momentum must be in [0,1)");
    if (inner_rounds < 1) throw ConfigError("gm.inner_rounds must be >= 1");
    if (scheduler_step < 1) throw ConfigError("gm.scheduler_step must be >= 1");
    if (!(scheduler_gamma > 0.0 && scheduler_gamma <= 1.0)) {
      throw ConfigError("gm.scheduler_gamma must be in (0,1]");
    }
    if (!(degenerate_eps > 0.0)) throw ConfigError("gm.degenerate_eps must be > 0");
  }
};

// Euclidean projection onto {w : sum w = 1, w >= 0} (sort-and-threshold).
inline SimplexWeights project_simplex(std::span<const double> v) {
  if (v.empty()) throw ShapeError("project_simplex: empty vector");
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("project_simplex: non-finite entry");
  }
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumsum = 0.0;
  double theta = 0.0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    cumsum += sorted[k];
    const double t = (cumsum - 1.0) / double(k + 1);
    if (sorted[k] - t > 0.0) theta = t;
  }
  SimplexWeights out{std::vector<double>(v.size())};
  for (std::size_t i = 0; i < v.size(); ++i) out.gamma[i] = std::max(v[i] - theta, 0.0);
  return out;
}

// J(gamma) and its gradient expressed through the Gram matrix of the inputs.
class MatchingObjective {
 public:
  MatchingObjective(const std::vector<ParamVector>& gradients, const ParamVector& g_bar,
                    double kappa)
      : n_(gradients.size()), gram_(n_ * n_), lin_(n_) {
    for (std::size_t i = 0; i < n_; ++i) {
      lin_[i] = dot(gradients[i], g_bar);
      for (std::size_t j = i; j < n_; ++j) {
        const double d = dot(gradients[i], gradients[j]);
        gram_[i * n_ + j] = d;
        gram_[j * n_ + i] = d;
      }
    }
    radius_ = kappa * norm(g_bar);
  }

  std::size_t size() const { return n_; }

  // |gamma G|
  double combined_norm(std::span<const double> gamma) const {
    double q = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) q += gamma[i] * gram_[i * n_ + j] * gamma[j];
    }
    return std::sqrt(std::max(q, 0.0));
  }

  double value(std::span<const double> gamma) const {
    double lin = 0.0;
    for (std::size_t i = 0; i < n_; ++i) lin += gamma[i] * lin_[i];
    return lin + radius_ * combined_norm(gamma);
  }

  // Subgradient; the norm term contributes 0 at gamma G = 0.
  std::vector<double> gradient(std::span<const double> gamma) const {
    std::vector<double> g(lin_);
    const double nrm = combined_norm(gamma);
    if (nrm > 0.0) {
      for (std::size_t i = 0; i < n_; ++i) {
        double mg = 0.0;
        for (std::size_t j = 0; j < n_; ++j) mg += gram_[i * n_ + j] * gamma[j];
        g[i] += radius_ * mg / nrm;
      }
    }
    return g;
  }

 private:
  std::size_t n_;
  std::vector<double> gram_;
  std::vector<double> lin_;
  double radius_ = 0.0;
};

struct GammaSolution {
  SimplexWeights weights;
  double objective = 0.0;
  double initial_objective = 0.0;
  std::vector<double> trace;  // J after every inner step
};

namespace detail {

inline void check_gradient_set(const std::vector<ParamVector>& gradients) {
  if (gradients.empty()) throw ShapeError("gradient matching needs at least one gradient");
  const std::size_t d = gradients.front().size();
  for (const auto& g : gradients) {
    if (g.size() != d) throw ShapeError("gradient matching: gradients differ in length");
    if (!g.all_finite()) throw NumericError("gradient matching: non-finite gradient");
  }
}

inline ParamVector mean_of(const std::vector<ParamVector>& gradients) {
  ParamVector m(gradients.front().size());
  for (const auto& g : gradients) m += g;
  m *= 1.0 / double(gradients.size());
  return m;
}

}  // namespace detail

// Projected heavy-ball descent on J starting from uniform weights. The step
// size decays by scheduler_gamma every scheduler_step iterations. A candidate
// that would raise J (beyond rounding noise) is rejected: momentum is reset
// and the plain projected step is halved until J does not increase, so the
// accepted iterates descend monotonically.
inline GammaSolution solve_gamma_traced(const std::vector<ParamVector>& gradients,
                                        const ParamVector& g_bar, const GMConfig& cfg) {
  cfg.validate();
  detail::check_gradient_set(gradients);
  if (g_bar.size() != gradients.front().size()) throw ShapeError("solve_gamma: g_bar length");

  const std::size_t n = gradients.size();
  const MatchingObjective obj(gradients, g_bar, cfg.kappa);

  std::vector<double> gamma(n, 1.0 / double(n));
  std::vector<double> velocity(n, 0.0);
  std::vector<double> cand(n);
  double current = obj.value(gamma);

  GammaSolution sol;
  sol.initial_objective = current;
  sol.trace.reserve(cfg.inner_rounds);
  double lr = cfg.inner_lr;

  for (std::size_t k = 0; k < cfg.inner_rounds; ++k) {
    if (k > 0 && k % cfg.scheduler_step == 0) lr *= cfg.scheduler_gamma;
    const auto grad = obj.gradient(gamma);
    for (std::size_t i = 0; i < n; ++i) {
      velocity[i] = cfg.momentum * velocity[i] - lr * grad[i];
      cand[i] = gamma[i] + velocity[i];
    }
    auto next = project_simplex(cand);
    double value = obj.value(next.gamma);
    // Near the optimum J is flat to rounding; allow ulp-level noise so the
    // iterate keeps following the gradient instead of stalling.
    const double slack = 1e-13 * std::max(1.0, std::abs(current));
    if (value > current + slack) {
      std::fill(velocity.begin(), velocity.end(), 0.0);
      bool accepted = false;
      double step = lr;
      for (int tries = 0; tries < 60 && !accepted; ++tries) {
        step *= 0.5;
        for (std::size_t i = 0; i < n; ++i) cand[i] = gamma[i] - step * grad[i];
        next = project_simplex(cand);
        value = obj.value(next.gamma);
        accepted = value <= current + slack;
      }
      if (!accepted) {
        sol.trace.push_back(current);
        continue;
      }
    }
    gamma = std::move(next.gamma);
    current = value;
    sol.trace.push_back(current);
  }
  sol.weights.gamma = std::move(gamma);
  sol.objective = current;
  return sol;
}

inline SimplexWeights solve_gamma(const std::vector<ParamVector>& gradients,
                                  const ParamVector& g_bar, const GMConfig& cfg) {
  return solve_gamma_traced(gradients, g_bar, cfg).weights;
}

inline SimplexWeights solve_gamma(const std::vector<ParamVector>& gradients, const GMConfig& cfg) {
  detail::check_gradient_set(gradients);
  return solve_gamma(gradients, detail::mean_of(gradients), cfg);
}

struct MatchResult {
  ParamVector direction;  // gbar + correction
  ParamVector g_bar;      // mean of the (possibly normalized) inputs
  SimplexWeights gamma;
  bool degenerate = false;  // correction skipped, direction == g_bar
};

inline MatchResult gradient_match_detailed(std::vector<ParamVector> gradients,
                                           const GMConfig& cfg) {
  cfg.validate();
  detail::check_gradient_set(gradients);
  if (cfg.normalize_inputs) {
    for (auto& g : gradients) {
      const double nrm = norm(g);
      if (nrm > cfg.degenerate_eps) g *= 1.0 / nrm;
    }
  }
  MatchResult out;
  out.g_bar = detail::mean_of(gradients);
  out.direction = out.g_bar;
  const double gbar_norm = norm(out.g_bar);
  if (cfg.kappa == 0.0) {
    out.gamma.gamma.assign(gradients.size(), 1.0 / double(gradients.size()));
    return out;
  }
  out.gamma = solve_gamma(gradients, out.g_bar, cfg);

  ParamVector combined(out.g_bar.size());
  for (std::size_t i = 0; i < gradients.size(); ++i) combined.axpy(out.gamma[i], gradients[i]);
  const double combined_norm = norm(combined);
  if (gbar_norm < cfg.degenerate_eps || combined_norm < cfg.degenerate_eps) {
    out.degenerate = true;
    return out;
  }
  out.direction.axpy(cfg.kappa * gbar_norm / combined_norm, combined);
  return out;
}

inline ParamVector gradient_match(std::vector<ParamVector> gradients, const GMConfig& cfg) {
  return gradient_match_detailed(std::move(gradients), cfg).direction;
}

}  // namespace stamp
