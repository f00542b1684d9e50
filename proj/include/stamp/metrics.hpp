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

// Continual-learning metrics: accuracy matrix, averaged forgetting, gradient
// cosines, local/global gap, and the tabular metrics log.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "stamp/errors.hpp"
#include "stamp/tensor.hpp"

namespace stamp {

// a(t, i): accuracy in [0,1] on task i after finishing task t, defined for i <= t.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t num_tasks = 0)
      : t_(num_tasks), a_(num_tasks * num_tasks, std::nullopt) {}

  std::size_t num_tasks() const { return t_; }

  void set(std::size_t t, std::size_t i, double acc) {
    if (t >= t_ || i > t) throw ShapeError("AccuracyMatrix: entry outside the lower triangle");
    if (!(acc >= 0.0 && acc <= 1.0)) throw NumericError("AccuracyMatrix: accuracy outside [0,1]");
    a_[t * t_ + i] = acc;
  }

  std::optional<double> get(std::size_t t, std::size_t i) const {
    if (t >= t_ || i >= t_) return std::nullopt;
    return a_[t * t_ + i];
  }

  double at(std::size_t t, std::size_t i) const {
    const auto v = get(t, i);
    if (!v) throw PreconditionError("AccuracyMatrix: entry (" + std::to_string(t) + "," + std::to_string(i) + ") unset");
    return *v;
  }

  // Mean accuracy over tasks 0..t after task t.
  double mean_row(std::size_t t) const {
    double s = 0.0;
    for (std::size_t i = 0; i <= t; ++i) s += at(t, i);
    return s / double(t + 1);
  }

  static AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    AccuracyMatrix m(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      for (std::size_t i = 0; i < rows[t].size(); ++i) m.set(t, i, rows[t][i]);
    }
    return m;
  }

 private:
  std::size_t t_;
  std::vector<std::optional<double>> a_;
};

// AF = 1/(T-1) sum_{i<T-1} max_{t in [i, T-1]} (a(t,i) - a(T-1,i)), 0-indexed.
// The max includes the final row, so a task whose accuracy never exceeded its
// final value contributes 0.
inline double averaged_forgetting(const AccuracyMatrix& m) {
  const std::size_t T = m.num_tasks();
  if (T < 2) throw PreconditionError("averaged forgetting needs at least two tasks");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < T; ++i) {
    const double final_acc = m.at(T - 1, i);
    double worst = 0.0;
    for (std::size_t t = i; t < T; ++t) worst = std::max(worst, m.at(t, i) - final_acc);
    total += worst;
  }
  return total / double(T - 1);
}

struct CosineResult {
  double value = 0.0;
  bool degenerate = false;  // one argument was the zero vector
};

inline CosineResult cosine(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  return {std::clamp(dot(a, b) / (na * nb), -1.0, 1.0), false};
}

inline double generalization_gap(const std::vector<double>& local_accuracies, double global_accuracy) {
  if (local_accuracies.empty()) throw PreconditionError("generalization_gap: no client accuracies");
  double s = 0.0;
  for (double a : local_accuracies) s += a;
  return s / double(local_accuracies.size()) - global_accuracy;
}

enum class CosineScope { temporal, spatial };

struct CosineRecord {
  std::size_t task = 0;
  std::size_t round = 0;
  CosineScope scope = CosineScope::temporal;
  std::string pair;  // e.g. "c3:t0" or "c1:agg"
  double value = 0.0;
};

// One metrics row. client is a client id or "global".
struct MetricRecord {
  std::string run_id;
  std::string algorithm;
  std::uint64_t seed = 0;
  std::size_t task = 0;
  std::size_t round = 0;
  std::string client;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

inline constexpr const char* kMetricsHeader = "run_id,algorithm,seed,task,round,client,metric,value";

// Shortest text that reads back to the same double.
inline std::string format_value(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_metrics_row(std::ostream& os, const MetricRecord& r) {
  os << r.run_id << ',' << r.algorithm << ',' << r.seed << ',' << r.task << ',' << r.round << ','
     << r.client << ',' << r.metric << ',' << format_value(r.value) << '\n';
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRecord>& records) {
  os << kMetricsHeader << '\n';
  for (const auto& r : records) write_metrics_row(os, r);
}

inline std::vector<MetricRecord> read_metrics_csv(std::istream& is) {
  std::vector<MetricRecord> out;
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw ConfigError("metrics file: bad header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw ConfigError("metrics file: expected 8 columns in '" + line + "'");
    out.push_back({f[0], f[1], std::stoull(f[2]), std::stoul(f[3]), std::stoul(f[4]), f[5], f[6], std::stod(f[7])});
  }
  return out;
}

}  // namespace stamp
