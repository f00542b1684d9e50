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

// Network-free class prototypes, prototypical coreset selection, MixStyle
// blending, the ProtoNet loss, and the bounded per-class replay memory they
// maintain.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "stamp/errors.hpp"
#include "stamp/tensor.hpp"

namespace stamp {

struct Prototype {
  std::size_t class_id = 0;
  std::vector<double> mean_embedding;
  std::size_t seen_count = 0;
};

namespace detail {

inline std::vector<double> row_mean(const Matrix& m) {
  std::vector<double> mean(m.cols, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) mean[c] += m(r, c);
  }
  for (double& v : mean) v /= double(m.rows);
  return mean;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace detail

// Running class mean where the stored coreset's mean embedding stands in for
// every sample of the class seen so far.
inline Prototype update_prototype(const Prototype& proto, const Matrix& coreset_embeddings,
                                  const Matrix& new_embeddings) {
  const std::size_t dim = proto.mean_embedding.empty() ? new_embeddings.cols
                                                       : proto.mean_embedding.size();
  if (new_embeddings.rows > 0 && new_embeddings.cols != dim) {
    throw ShapeError("update_prototype: new embedding width mismatch");
  }
  if (coreset_embeddings.rows > 0 && coreset_embeddings.cols != dim) {
    throw ShapeError("update_prototype: coreset embedding width mismatch");
  }
  if (new_embeddings.rows == 0) return proto;

  const std::size_t old_count = proto.seen_count;
  std::vector<double> history;
  if (old_count > 0) {
    history = coreset_embeddings.rows > 0 ? detail::row_mean(coreset_embeddings) : proto.mean_embedding;
    if (history.size() != dim) throw ShapeError("update_prototype: prototype width mismatch");
  }

  Prototype out{proto.class_id, std::vector<double>(dim, 0.0), old_count + new_embeddings.rows};
  for (std::size_t c = 0; c < dim; ++c) {
    double acc = old_count > 0 ? history[c] * double(old_count) : 0.0;
    for (std::size_t r = 0; r < new_embeddings.rows; ++r) acc += new_embeddings(r, c);
    out.mean_embedding[c] = acc / double(out.seen_count);
  }
  return out;
}

enum class CoresetSelection {
  greedy,   // forward selection of a K-subset whose mean best fits the target
  top_abs,  // K largest |a_i| of the relaxed least-squares solution
};

struct CoresetSolverConfig {
  std::size_t normal_equation_limit = 256;
  std::size_t max_iterations = 500;
  double tolerance = 1e-6;
  CoresetSelection selection = CoresetSelection::greedy;
};

struct CoresetSolution {
  std::vector<double> coefficients;          // relaxed least-squares A
  std::vector<std::size_t> selected_indices;  // into the candidate rows
  double residual = 0.0;                      // objective value at A
  double selection_residual = 0.0;            // objective with A tied to the selected subset mean
  bool truncated = false;                     // K exceeded the candidate count
};

namespace detail {

// Solves the symmetric positive (semi)definite system S x = rhs in place by
// Cholesky with a small diagonal jitter.
inline std::vector<double> spd_solve(std::vector<double> s, std::size_t n, std::vector<double> rhs) {
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += s[i * n + i];
  const double jitter = 1e-13 * std::max(trace / double(n), 1e-300);
  for (std::size_t i = 0; i < n; ++i) s[i * n + i] += jitter;
  for (std::size_t j = 0; j < n; ++j) {
    double d = s[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= s[j * n + k] * s[j * n + k];
    d = std::sqrt(std::max(d, jitter));
    s[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s[i * n + j];
      for (std::size_t k = 0; k < j; ++k) v -= s[i * n + k] * s[j * n + k];
      s[i * n + j] = v / d;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double v = rhs[i];
    for (std::size_t k = 0; k < i; ++k) v -= s[i * n + k] * rhs[k];
    rhs[i] = v / s[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double v = rhs[i];
    for (std::size_t k = i + 1; k < n; ++k) v -= s[k * n + i] * rhs[k];
    rhs[i] = v / s[i * n + i];
  }
  return rhs;
}

// Residual vector B a - q where B = candidates^T / N.
inline std::vector<double> ls_residual(const Matrix& cand, const std::vector<double>& a,
                                       const std::vector<double>& q) {
  std::vector<double> r(q.size());
  for (std::size_t c = 0; c < q.size(); ++c) r[c] = -q[c];
  const double inv_n = 1.0 / double(cand.rows);
  for (std::size_t i = 0; i < cand.rows; ++i) {
    for (std::size_t c = 0; c < cand.cols; ++c) r[c] += inv_n * a[i] * cand(i, c);
  }
  return r;
}

}  // namespace detail

// Chooses K candidates whose embeddings, added to the memory mean, best
// reconstruct the target prototype:
//   min_A | mean(memory) + (1/N) sum_i a_i c_i - p |^2
// The relaxed (real-valued) A is the minimum-norm least-squares solution.
inline CoresetSolution select_coreset(const Matrix& memory_embeddings,
                                      const Matrix& candidate_embeddings,
                                      const Prototype& target, std::size_t k,
                                      const CoresetSolverConfig& cfg = {}) {
  if (candidate_embeddings.rows == 0) throw PreconditionError("select_coreset: no candidates");
  const std::size_t n = candidate_embeddings.rows;
  const std::size_t d = candidate_embeddings.cols;
  if (target.mean_embedding.size() != d) throw ShapeError("select_coreset: prototype width");
  if (memory_embeddings.rows > 0 && memory_embeddings.cols != d) {
    throw ShapeError("select_coreset: memory width");
  }

  std::vector<double> q = target.mean_embedding;
  std::vector<double> mem_mean(d, 0.0);
  if (memory_embeddings.rows > 0) mem_mean = detail::row_mean(memory_embeddings);
  for (std::size_t c = 0; c < d; ++c) q[c] -= mem_mean[c];

  CoresetSolution sol;
  sol.coefficients.assign(n, 0.0);
  const double inv_n = 1.0 / double(n);

  if (n <= cfg.normal_equation_limit) {
    if (n <= d) {
      // (B^T B) a = B^T q
      std::vector<double> s(n * n), rhs(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double v = 0.0;
          for (std::size_t c = 0; c < d; ++c) v += candidate_embeddings(i, c) * candidate_embeddings(j, c);
          s[i * n + j] = v * inv_n * inv_n;
        }
        for (std::size_t c = 0; c < d; ++c) rhs[i] += candidate_embeddings(i, c) * q[c] * inv_n;
      }
      sol.coefficients = detail::spd_solve(std::move(s), n, std::move(rhs));
    } else {
      // Minimum-norm solution a = B^T (B B^T)^-1 q.
      std::vector<double> s(d * d, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) {
          for (std::size_t b = 0; b < d; ++b) {
            s[a * d + b] += candidate_embeddings(i, a) * candidate_embeddings(i, b) * inv_n * inv_n;
          }
        }
      }
      const auto w = detail::spd_solve(std::move(s), d, q);
      for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) v += candidate_embeddings(i, c) * w[c];
        sol.coefficients[i] = v * inv_n;
      }
    }
  } else {
    // Gradient descent on 0.5 |B a - q|^2 from zero; step 1/L with L bounded
    // by the squared Frobenius norm of B.
    double frob = 0.0;
    for (double v : candidate_embeddings.data) frob += v * v * inv_n * inv_n;
    const double step = 1.0 / std::max(frob, 1e-300);
    auto& a = sol.coefficients;
    for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
      const auto r = detail::ls_residual(candidate_embeddings, a, q);
      double gnorm = 0.0;
      std::vector<double> g(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) g[i] += candidate_embeddings(i, c) * r[c] * inv_n;
        gnorm += g[i] * g[i];
      }
      if (std::sqrt(gnorm) < cfg.tolerance) break;
      for (std::size_t i = 0; i < n; ++i) a[i] -= step * g[i];
    }
  }
  {
    const auto r = detail::ls_residual(candidate_embeddings, sol.coefficients, q);
    sol.residual = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
  }

  std::size_t keep = k;
  if (k > n) {
    keep = n;
    sol.truncated = true;
  }

  if (cfg.selection == CoresetSelection::top_abs) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return std::abs(sol.coefficients[x]) > std::abs(sol.coefficients[y]);
    });
    sol.selected_indices.assign(order.begin(), order.begin() + long(keep));
  } else {
    // Greedy forward selection: at step j the candidate whose addition
    // brings mean(selected) closest to q. Ties go to larger |a_i|, then to
    // the lower index.
    std::vector<double> sum(d, 0.0);
    std::vector<bool> taken(n, false);
    for (std::size_t j = 0; j < keep; ++j) {
      std::size_t best = n;
      double best_val = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = (sum[c] + candidate_embeddings(i, c)) / double(j + 1) - q[c];
          v += diff * diff;
        }
        if (best == n || v < best_val ||
            (v == best_val && std::abs(sol.coefficients[i]) > std::abs(sol.coefficients[best]))) {
          best = i;
          best_val = v;
        }
      }
      taken[best] = true;
      sol.selected_indices.push_back(best);
      for (std::size_t c = 0; c < d; ++c) sum[c] += candidate_embeddings(best, c);
    }
  }

  if (!sol.selected_indices.empty()) {
    std::vector<double> tied(n, 0.0);
    for (std::size_t i : sol.selected_indices) tied[i] = double(n) / double(sol.selected_indices.size());
    const auto r = detail::ls_residual(candidate_embeddings, tied, q);
    sol.selection_residual = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
  }
  return sol;
}

struct MixStyleConfig {
  enum class Mode { fixed, beta };
  Mode mode = Mode::fixed;
  double lambda = 0.5;
  double alpha = 0.1;  // Beta(alpha, alpha) when mode == beta

  void validate() const {
    if (mode == Mode::fixed && !(lambda >= 0.0 && lambda <= 1.0)) {
      throw ConfigError("mixstyle.lambda must be in [0,1]");
    }
    if (mode == Mode::beta && !(alpha > 0.0)) throw ConfigError("mixstyle.alpha must be > 0");
  }

  template <typename Rng>
  double draw_lambda(Rng& rng) const {
    if (mode == Mode::fixed) return lambda;
    std::gamma_distribution<double> g(alpha, 1.0);
    const double a = g(rng);
    const double b = g(rng);
    return a + b > 0.0 ? a / (a + b) : 0.5;
  }
};

struct Moments {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

inline Moments moments(std::span<const double> x) {
  Moments m;
  if (x.empty()) return m;
  for (double v : x) m.mean += v;
  m.mean /= double(x.size());
  double var = 0.0;
  for (double v : x) var += (v - m.mean) * (v - m.mean);
  m.stddev = std::sqrt(var / double(x.size()));
  return m;
}

// Re-styles x_tilde with the blended first and second moments of x_tilde and x.
inline std::vector<double> mixstyle(std::span<const double> x_tilde, std::span<const double> x,
                                    double lambda) {
  if (x_tilde.size() != x.size()) throw ShapeError("mixstyle: length mismatch");
  std::vector<double> out(x_tilde.begin(), x_tilde.end());
  const Moments mt = moments(x_tilde);
  if (lambda == 1.0 || !(mt.stddev > 0.0)) return out;
  const Moments mx = moments(x);
  const double gamma_mix = lambda * mt.stddev + (1.0 - lambda) * mx.stddev;
  const double beta_mix = lambda * mt.mean + (1.0 - lambda) * mx.mean;
  for (double& v : out) v = gamma_mix * (v - mt.mean) / mt.stddev + beta_mix;
  return out;
}

struct ProtoLossResult {
  double loss = 0.0;
  Matrix d_embeddings;  // dLoss/dEmbedding, already averaged over the batch
};

// Mean over samples of d(e, p_y) + log sum_l exp(-d(e, p_l)) with squared
// Euclidean d.
inline ProtoLossResult proto_loss(const Matrix& embeddings, const std::vector<std::size_t>& labels,
                                  const std::vector<Prototype>& prototypes) {
  if (embeddings.rows != labels.size() || labels.empty()) throw ShapeError("proto_loss: batch shape");
  if (prototypes.size() < 2) throw PreconditionError("proto_loss needs at least two prototypes");
  std::map<std::size_t, std::size_t> index;
  for (std::size_t i = 0; i < prototypes.size(); ++i) {
    if (prototypes[i].mean_embedding.size() != embeddings.cols) throw ShapeError("proto_loss: prototype width");
    index[prototypes[i].class_id] = i;
  }
  const std::size_t n = labels.size();
  const std::size_t m = prototypes.size();
  ProtoLossResult out{0.0, Matrix(n, embeddings.cols)};
  std::vector<double> dist(m), weight(m);
  for (std::size_t r = 0; r < n; ++r) {
    const auto it = index.find(labels[r]);
    if (it == index.end()) {
      throw ConfigError("proto_loss: no prototype for class " + std::to_string(labels[r]));
    }
    const auto e = embeddings.row(r);
    double min_d = 0.0;
    for (std::size_t l = 0; l < m; ++l) {
      dist[l] = detail::squared_distance(e, prototypes[l].mean_embedding);
      if (l == 0 || dist[l] < min_d) min_d = dist[l];
    }
    double z = 0.0;
    for (std::size_t l = 0; l < m; ++l) z += std::exp(-(dist[l] - min_d));
    const double lse = -min_d + std::log(z);
    out.loss += dist[it->second] + lse;
    for (std::size_t l = 0; l < m; ++l) weight[l] = std::exp(-(dist[l] - min_d)) / z;

    auto g = out.d_embeddings.row(r);
    const auto& py = prototypes[it->second].mean_embedding;
    for (std::size_t c = 0; c < e.size(); ++c) {
      double v = 2.0 * (e[c] - py[c]);
      for (std::size_t l = 0; l < m; ++l) v -= weight[l] * 2.0 * (e[c] - prototypes[l].mean_embedding[c]);
      g[c] = v / double(n);
    }
  }
  out.loss /= double(n);
  if (!std::isfinite(out.loss)) throw NumericError("proto_loss: non-finite loss");
  return out;
}

// Bounded per-class replay store. Each class keeps at most `capacity`
// input-space samples, the task that introduced it, and its prototype.
class ReplayMemory {
 public:
  struct ClassStore {
    std::size_t task_id = 0;
    std::vector<std::vector<double>> samples;
    Prototype prototype;
  };

  ReplayMemory() = default;
  explicit ReplayMemory(std::size_t capacity_per_class) : capacity_(capacity_per_class) {}

  std::size_t capacity() const { return capacity_; }
  const std::map<std::size_t, ClassStore>& classes() const { return classes_; }
  std::map<std::size_t, ClassStore>& mutable_classes() { return classes_; }

  bool has_class(std::size_t class_id) const { return classes_.count(class_id) > 0; }
  const ClassStore& at(std::size_t class_id) const { return classes_.at(class_id); }
  ClassStore& slot(std::size_t class_id) { return classes_[class_id]; }

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& [_, store] : classes_) n += store.samples.size();
    return n;
  }

  // Stored samples of every class introduced by the given task.
  Batch task_batch(std::size_t task_id) const {
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> labels;
    for (const auto& [cls, store] : classes_) {
      if (store.task_id != task_id) continue;
      for (const auto& s : store.samples) {
        rows.push_back(s);
        labels.push_back(cls);
      }
    }
    return Batch{Matrix::from_rows(rows), std::move(labels)};
  }

  std::vector<Prototype> task_prototypes(std::size_t task_id) const {
    std::vector<Prototype> out;
    for (const auto& [cls, store] : classes_) {
      if (store.task_id == task_id && store.prototype.seen_count > 0) out.push_back(store.prototype);
    }
    return out;
  }

  std::vector<Prototype> prototypes() const {
    std::vector<Prototype> out;
    for (const auto& [cls, store] : classes_) {
      if (store.prototype.seen_count > 0) out.push_back(store.prototype);
    }
    return out;
  }

  std::vector<std::size_t> tasks() const {
    std::vector<std::size_t> out;
    for (const auto& [cls, store] : classes_) {
      if (!store.samples.empty() &&
          std::find(out.begin(), out.end(), store.task_id) == out.end()) {
        out.push_back(store.task_id);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  bool within_capacity() const {
    return std::all_of(classes_.begin(), classes_.end(),
                       [&](const auto& kv) { return kv.second.samples.size() <= capacity_; });
  }

 private:
  std::size_t capacity_ = 20;
  std::map<std::size_t, ClassStore> classes_;
};

struct IngestReport {
  std::size_t classes = 0;
  std::size_t blends = 0;
  std::size_t stored = 0;
  bool truncated = false;
};

struct IngestConfig {
  CoresetSolverConfig solver;
  MixStyleConfig mixstyle;
};

namespace detail {

inline Matrix rows_to_matrix(const std::vector<std::vector<double>>& rows, std::size_t cols) {
  if (rows.empty()) return Matrix(0, cols);
  return Matrix::from_rows(rows);
}

}  // namespace detail

// Prototypical coreset selection for one task: for each class, update the
// prototype, select K samples from (stored U new), and blend every evicted
// sample into its nearest retained sample with MixStyle.
template <typename Rng>
IngestReport ingest_task(ReplayMemory& memory, const std::map<std::size_t, Matrix>& task_data,
                         std::size_t task_id, const ParamVector& params, const ModelShape& shape,
                         const IngestConfig& cfg, Rng& rng) {
  IngestReport report;
  const std::size_t k = memory.capacity();
  for (const auto& [cls, inputs] : task_data) {
    if (inputs.rows == 0) continue;
    if (inputs.cols != shape.input_dim) throw ShapeError("ingest_task: input width mismatch");
    auto& store = memory.slot(cls);
    if (store.prototype.seen_count == 0) {
      store.task_id = task_id;
      store.prototype.class_id = cls;
    }
    ++report.classes;

    const Matrix stored = detail::rows_to_matrix(store.samples, shape.input_dim);
    const Matrix stored_emb = stored.rows ? embed(params, shape, stored) : Matrix(0, shape.embedding_dim());
    const Matrix new_emb = embed(params, shape, inputs);
    store.prototype = update_prototype(store.prototype, stored_emb, new_emb);

    std::vector<std::vector<double>> candidates = store.samples;
    for (std::size_t r = 0; r < inputs.rows; ++r) {
      candidates.emplace_back(inputs.row(r).begin(), inputs.row(r).end());
    }
    if (candidates.size() <= k) {
      store.samples = std::move(candidates);
      report.stored += store.samples.size();
      continue;
    }

    Matrix cand_emb(candidates.size(), shape.embedding_dim());
    for (std::size_t r = 0; r < stored_emb.rows; ++r) {
      std::copy(stored_emb.row(r).begin(), stored_emb.row(r).end(), cand_emb.row(r).begin());
    }
    for (std::size_t r = 0; r < new_emb.rows; ++r) {
      std::copy(new_emb.row(r).begin(), new_emb.row(r).end(), cand_emb.row(stored_emb.rows + r).begin());
    }
    const auto sol = select_coreset(Matrix(0, shape.embedding_dim()), cand_emb, store.prototype, k, cfg.solver);
    report.truncated = report.truncated || sol.truncated;

    std::vector<bool> kept(candidates.size(), false);
    for (std::size_t i : sol.selected_indices) kept[i] = true;
    std::vector<std::size_t> retained(sol.selected_indices);
    std::sort(retained.begin(), retained.end());

    for (std::size_t e = 0; e < candidates.size(); ++e) {
      if (kept[e]) continue;
      std::size_t nearest = retained.front();
      double best = detail::squared_distance(cand_emb.row(e), cand_emb.row(nearest));
      for (std::size_t r : retained) {
        const double dd = detail::squared_distance(cand_emb.row(e), cand_emb.row(r));
        if (dd < best) {
          best = dd;
          nearest = r;
        }
      }
      candidates[nearest] = mixstyle(candidates[nearest], candidates[e], cfg.mixstyle.draw_lambda(rng));
      ++report.blends;
    }

    std::vector<std::vector<double>> next;
    next.reserve(retained.size());
    for (std::size_t r : retained) next.push_back(std::move(candidates[r]));
    store.samples = std::move(next);
    report.stored += store.samples.size();
  }
  return report;
}

// Replay memory without coreset selection: a uniform random K-subset per
// class, prototypes still tracked. Used when PCS is switched off.
template <typename Rng>
IngestReport ingest_task_random(ReplayMemory& memory, const std::map<std::size_t, Matrix>& task_data,
                                std::size_t task_id, const ParamVector& params,
                                const ModelShape& shape, Rng& rng) {
  IngestReport report;
  for (const auto& [cls, inputs] : task_data) {
    if (inputs.rows == 0) continue;
    auto& store = memory.slot(cls);
    if (store.prototype.seen_count == 0) {
      store.task_id = task_id;
      store.prototype.class_id = cls;
    }
    ++report.classes;
    const Matrix stored = detail::rows_to_matrix(store.samples, shape.input_dim);
    const Matrix stored_emb = stored.rows ? embed(params, shape, stored) : Matrix(0, shape.embedding_dim());
    store.prototype = update_prototype(store.prototype, stored_emb, embed(params, shape, inputs));

    std::vector<std::vector<double>> candidates = store.samples;
    for (std::size_t r = 0; r < inputs.rows; ++r) candidates.emplace_back(inputs.row(r).begin(), inputs.row(r).end());
    if (candidates.size() > memory.capacity()) {
      std::vector<std::size_t> idx(candidates.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(memory.capacity());
      std::sort(idx.begin(), idx.end());
      std::vector<std::vector<double>> next;
      for (std::size_t i : idx) next.push_back(std::move(candidates[i]));
      candidates = std::move(next);
    }
    store.samples = std::move(candidates);
    report.stored += store.samples.size();
  }
  return report;
}

// Replay-memory snapshot: one JSON object per line per stored sample,
//   {"client_id":u,"task_id":t,"class_id":l,"slot":s,"input":[...]}
inline void write_memory_snapshot(std::ostream& os, std::size_t client_id, const ReplayMemory& memory) {
  for (const auto& [cls, store] : memory.classes()) {
    for (std::size_t s = 0; s < store.samples.size(); ++s) {
      nlohmann::json rec{{"client_id", client_id},
                         {"task_id", store.task_id},
                         {"class_id", cls},
                         {"slot", s},
                         {"input", store.samples[s]}};
      os << rec.dump() << '\n';
    }
  }
}

// Rebuilds the sample stores of one client from a snapshot stream.
// Prototypes are not part of the snapshot and stay empty.
inline ReplayMemory read_memory_snapshot(std::istream& is, std::size_t client_id, std::size_t capacity) {
  ReplayMemory memory(capacity);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("snapshot line " + std::to_string(lineno) + ": " + e.what());
    }
    if (rec.at("client_id").get<std::size_t>() != client_id) continue;
    auto& store = memory.slot(rec.at("class_id").get<std::size_t>());
    store.task_id = rec.at("task_id").get<std::size_t>();
    store.prototype.class_id = rec.at("class_id").get<std::size_t>();
    const auto slot = rec.at("slot").get<std::size_t>();
    if (slot >= capacity) throw ConfigError("snapshot slot exceeds capacity");
    if (store.samples.size() <= slot) store.samples.resize(slot + 1);
    store.samples[slot] = rec.at("input").get<std::vector<double>>();
  }
  return memory;
}

}  // namespace stamp
