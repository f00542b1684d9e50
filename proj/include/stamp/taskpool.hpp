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

// Synthetic class-structured datasets, class-group task streams, and
// Dirichlet non-IID partitioning.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "stamp/errors.hpp"
#include "stamp/tensor.hpp"

namespace stamp {

struct SyntheticDatasetConfig {
  std::size_t num_classes = 20;
  std::size_t input_dim = 32;
  std::size_t samples_per_class = 200;
  double class_center_scale = 1.0;
  double within_class_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("dataset.num_classes must be >= 2");
    if (input_dim < 1) throw ConfigError("dataset.input_dim must be >= 1");
    if (samples_per_class < 2) throw ConfigError("dataset.samples_per_class must be >= 2");
    if (!(within_class_std > 0.0)) throw ConfigError("dataset.within_class_std must be > 0");
    if (!(class_center_scale >= 0.0)) throw ConfigError("dataset.class_center_scale must be >= 0");
  }
};

struct Split {
  Matrix inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  friend bool operator==(const Split&, const Split&) = default;
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t input_dim = 0;
  Split train;
  Split test;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Samples of the split whose labels are in `classes`, in dataset order.
inline Batch select_classes(const Split& split, const std::vector<std::size_t>& classes) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (std::find(classes.begin(), classes.end(), split.labels[i]) != classes.end()) rows.push_back(i);
  }
  Batch b{Matrix(rows.size(), split.inputs.cols), {}};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(split.inputs.row(rows[r]).begin(), split.inputs.row(rows[r]).end(), b.inputs.row(r).begin());
    b.labels.push_back(split.labels[rows[r]]);
  }
  return b;
}

inline Batch select_rows(const Split& split, const std::vector<std::size_t>& rows) {
  Batch b{Matrix(rows.size(), split.inputs.cols), {}};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(split.inputs.row(rows[r]).begin(), split.inputs.row(rows[r]).end(), b.inputs.row(r).begin());
    b.labels.push_back(split.labels[rows[r]]);
  }
  return b;
}

// Class c samples are center_c + N(0, std^2 I) with center_c ~ scale * N(0, I).
// The first 80% of each class's samples go to train, the rest to test.
inline Dataset generate_synthetic(const SyntheticDatasetConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t n_train = cfg.samples_per_class * 4 / 5;
  const std::size_t n_test = cfg.samples_per_class - n_train;

  Dataset ds{cfg.num_classes, cfg.input_dim,
             Split{Matrix(n_train * cfg.num_classes, cfg.input_dim), {}},
             Split{Matrix(n_test * cfg.num_classes, cfg.input_dim), {}}};
  std::vector<double> center(cfg.input_dim);
  std::size_t tr = 0, te = 0;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    for (double& v : center) v = cfg.class_center_scale * unit(rng);
    for (std::size_t s = 0; s < cfg.samples_per_class; ++s) {
      const bool is_train = s < n_train;
      auto row = is_train ? ds.train.inputs.row(tr++) : ds.test.inputs.row(te++);
      for (std::size_t k = 0; k < cfg.input_dim; ++k) row[k] = center[k] + cfg.within_class_std * unit(rng);
      (is_train ? ds.train.labels : ds.test.labels).push_back(c);
    }
  }
  return ds;
}

// Line-delimited export: {"class_id":c,"split":"train"|"test","x":[...]}
inline void write_dataset(std::ostream& os, const Dataset& ds) {
  auto dump = [&](const Split& s, const char* name) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto row = s.inputs.row(i);
      nlohmann::json rec{{"class_id", s.labels[i]}, {"split", name},
                         {"x", std::vector<double>(row.begin(), row.end())}};
      os << rec.dump() << '\n';
    }
  };
  dump(ds.train, "train");
  dump(ds.test, "test");
}

inline Dataset read_dataset(std::istream& is) {
  std::vector<std::vector<double>> rows[2];
  std::vector<std::size_t> labels[2];
  std::size_t max_class = 0, dim = 0, lineno = 0;
  std::string line;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      const auto split = rec.at("split").get<std::string>();
      if (split != "train" && split != "test") throw ConfigError("unknown split '" + split + "'");
      const int k = split == "train" ? 0 : 1;
      auto x = rec.at("x").get<std::vector<double>>();
      if (dim == 0) dim = x.size();
      if (x.size() != dim || dim == 0) throw ShapeError("inconsistent feature width");
      const auto c = rec.at("class_id").get<std::size_t>();
      max_class = std::max(max_class, c);
      rows[k].push_back(std::move(x));
      labels[k].push_back(c);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (rows[0].empty()) throw ConfigError("dataset has no training samples");
  Dataset ds{max_class + 1, dim, Split{Matrix::from_rows(rows[0]), labels[0]}, Split{}};
  ds.test = rows[1].empty() ? Split{Matrix(0, dim), {}} : Split{Matrix::from_rows(rows[1]), labels[1]};
  return ds;
}

struct TaskSpec {
  std::size_t task_id = 0;
  std::size_t client_id = 0;
  std::vector<std::size_t> class_ids;
};

// Per client, T tasks of C distinct classes drawn by a seeded permutation of
// the L classes. With `disjoint_across_clients` one permutation is sliced so
// no class is shared between clients.
inline std::vector<std::vector<TaskSpec>> build_task_streams(std::size_t num_classes,
                                                             std::size_t classes_per_task,
                                                             std::size_t num_clients,
                                                             std::size_t num_tasks, std::uint64_t seed,
                                                             bool disjoint_across_clients) {
  if (classes_per_task < 1 || num_clients < 1 || num_tasks < 1) {
    throw ConfigError("task streams need C >= 1, U >= 1, T >= 1");
  }
  const std::size_t per_client = classes_per_task * num_tasks;
  if (per_client > num_classes) {
    throw ConfigError("C*T = " + std::to_string(per_client) + " exceeds L = " + std::to_string(num_classes));
  }
  if (disjoint_across_clients && per_client * num_clients > num_classes) {
    throw ConfigError("C*T*U = " + std::to_string(per_client * num_clients) + " exceeds L = " +
                      std::to_string(num_classes) + " (disjoint_across_clients)");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(num_classes);
  std::iota(perm.begin(), perm.end(), 0);
  if (disjoint_across_clients) std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<std::vector<TaskSpec>> streams(num_clients);
  for (std::size_t u = 0; u < num_clients; ++u) {
    std::size_t base = 0;
    if (disjoint_across_clients) {
      base = u * per_client;
    } else {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
    }
    for (std::size_t t = 0; t < num_tasks; ++t) {
      TaskSpec spec{t, u, {}};
      for (std::size_t c = 0; c < classes_per_task; ++c) spec.class_ids.push_back(perm[base + t * classes_per_task + c]);
      streams[u].push_back(std::move(spec));
    }
  }
  return streams;
}

// Every client receives the same class-group sequence (shared tasks, used
// with the Dirichlet non-IID split).
inline std::vector<std::vector<TaskSpec>> build_shared_task_stream(std::size_t num_classes,
                                                                   std::size_t classes_per_task,
                                                                   std::size_t num_clients,
                                                                   std::size_t num_tasks, std::uint64_t seed) {
  auto one = build_task_streams(num_classes, classes_per_task, 1, num_tasks, seed, false);
  std::vector<std::vector<TaskSpec>> streams(num_clients, one.front());
  for (std::size_t u = 0; u < num_clients; ++u) {
    for (auto& spec : streams[u]) spec.client_id = u;
  }
  return streams;
}

struct DirichletPartition {
  double alpha = 1.0;
  // proportions[c][u]: share of class c assigned to client u
  std::vector<std::vector<double>> proportions;
  // indices[u]: sample indices (into the split) owned by client u
  std::vector<std::vector<std::size_t>> indices;
};

// Per class, client shares ~ Dirichlet(alpha * 1) over the clients allowed to
// hold that class (all clients when `holders` is empty). Shares are turned
// into counts by cumulative rounding, so each class is partitioned exactly.
// Resamples up to 100 times if some client would receive nothing.
inline DirichletPartition dirichlet_split(const std::vector<std::size_t>& labels, std::size_t num_classes,
                                          std::size_t num_clients, double alpha, std::uint64_t seed,
                                          const std::vector<std::vector<std::size_t>>& holders = {}) {
  if (!(alpha > 0.0)) throw ConfigError("dirichlet alpha must be > 0");
  if (num_clients < 1) throw ConfigError("dirichlet split needs at least one client");
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);

  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw ShapeError("dirichlet_split: label out of range");
    by_class[labels[i]].push_back(i);
  }

  for (int attempt = 0; attempt < 100; ++attempt) {
    DirichletPartition part{alpha, std::vector<std::vector<double>>(num_classes, std::vector<double>(num_clients, 0.0)),
                            std::vector<std::vector<std::size_t>>(num_clients)};
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::vector<std::size_t> allowed;
      if (holders.empty()) {
        allowed.resize(num_clients);
        std::iota(allowed.begin(), allowed.end(), 0);
      } else {
        allowed = holders.at(c);
      }
      if (allowed.empty()) continue;
      double total = 0.0;
      std::vector<double> draw(allowed.size());
      for (int tries = 0; tries < 100 && !(total > 0.0); ++tries) {
        total = 0.0;
        for (double& g : draw) total += (g = gamma(rng));
      }
      if (!(total > 0.0)) throw ConfigError("dirichlet_split: degenerate share draw");
      for (std::size_t k = 0; k < allowed.size(); ++k) part.proportions[c][allowed[k]] = draw[k] / total;

      const auto& idx = by_class[c];
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t k = 0; k < allowed.size(); ++k) {
        cum += draw[k] / total;
        const std::size_t stop = k + 1 == allowed.size()
                                     ? idx.size()
                                     : std::min(idx.size(), std::size_t(std::llround(cum * double(idx.size()))));
        for (std::size_t j = start; j < std::max(start, stop); ++j) part.indices[allowed[k]].push_back(idx[j]);
        start = std::max(start, stop);
      }
    }
    const bool all_nonempty = std::all_of(part.indices.begin(), part.indices.end(),
                                          [](const auto& v) { return !v.empty(); });
    if (all_nonempty) {
      for (auto& v : part.indices) std::sort(v.begin(), v.end());
      return part;
    }
  }
  throw ConfigError("dirichlet_split: some client stayed empty after 100 resamples (alpha too small?)");
}

}  // namespace stamp
