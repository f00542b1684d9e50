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

// Single-process federated continual learning simulator. Clients may apply
// temporal gradient matching (tam) and prototypical coreset replay (pcs); the
// server may apply spatial gradient matching (sam). All off is FedAvg.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stamp/errors.hpp"
#include "stamp/gm.hpp"
#include "stamp/metrics.hpp"
#include "stamp/proto.hpp"
#include "stamp/taskpool.hpp"
#include "stamp/tensor.hpp"

namespace stamp {

enum class TaskGradientMode { coreset, prototype };

struct FedConfig {
  std::size_t num_clients = 10;
  double participation_fraction = 1.0;
  std::size_t local_epochs = 5;
  std::size_t rounds_per_task = 25;
  std::size_t num_tasks = 5;
  double local_lr = 0.005;
  double global_lr = 1.0;
  std::size_t batch_size = 128;
  bool sam = true;
  bool tam = true;
  bool pcs = true;
  std::size_t memory_per_class = 20;  // K
  double proto_loss_weight = 0.05;    // ProtoNet term on the encoder, PCS only
  TaskGradientMode task_gradient_mode = TaskGradientMode::coreset;
  bool cache_previous_gradients = false;
  bool tam_sum = true;  // TAM anchor is the sum of task gradients, not the mean
  std::size_t jobs = 1;  // parallel client workers
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients < 1) throw ConfigError("fed.num_clients must be >= 1");
    if (!(participation_fraction > 0.0 && participation_fraction <= 1.0)) {
      throw ConfigError("fed.participation_fraction must be in (0,1]");
    }
    if (local_epochs < 1) throw ConfigError("fed.local_epochs must be >= 1");
    if (rounds_per_task < 1) throw ConfigError("fed.rounds_per_task must be >= 1");
    if (num_tasks < 1) throw ConfigError("fed.num_tasks must be >= 1");
    if (!(local_lr > 0.0)) throw ConfigError("fed.local_lr must be > 0");
    if (!(global_lr > 0.0)) throw ConfigError("fed.global_lr must be > 0");
    if (batch_size < 1) throw ConfigError("fed.batch_size must be >= 1");
    if (memory_per_class < 1) throw ConfigError("fed.memory_per_class must be >= 1");
    if (!(proto_loss_weight >= 0.0)) throw ConfigError("fed.proto_loss_weight must be >= 0");
    if (jobs < 1) throw ConfigError("fed.jobs must be >= 1");
  }

  std::string algorithm_name() const {
    if (!sam && !tam && !pcs) return "fedavg";
    if (sam && tam && pcs) return "stamp";
    std::string s;
    for (auto [on, name] : {std::pair{sam, "sam"}, std::pair{tam, "tam"}, std::pair{pcs, "pcs"}}) {
      if (!on) continue;
      if (!s.empty()) s += '+';
      s += name;
    }
    return s;
  }
};

struct SimConfig {
  FedConfig fed;
  GMConfig tam_gm;
  GMConfig sam_gm;
  IngestConfig ingest;

  void validate() const {
    fed.validate();
    tam_gm.validate();
    sam_gm.validate();
    ingest.mixstyle.validate();
  }
};

// Per-client data: train/test batches per task, aligned with the stream.
struct FederationData {
  ModelShape shape;
  std::vector<std::vector<TaskSpec>> streams;
  std::vector<std::vector<Batch>> train;  // [client][task]
  std::vector<std::vector<Batch>> test;   // [client][task]
};

// Assigns samples to clients. Without a Dirichlet alpha every client holding
// a class gets all of its training samples; with one, each class's training
// samples are split among its holders by Dirichlet(alpha) shares. Test sets
// always contain every test sample of the task's classes.
inline FederationData build_federation_data(const Dataset& ds, const ModelShape& shape,
                                            std::vector<std::vector<TaskSpec>> streams,
                                            std::optional<double> dirichlet_alpha, std::uint64_t seed) {
  FederationData fd{shape, std::move(streams), {}, {}};
  const std::size_t U = fd.streams.size();
  std::vector<std::vector<std::size_t>> holders(ds.num_classes);
  for (std::size_t u = 0; u < U; ++u) {
    for (const auto& spec : fd.streams[u]) {
      for (std::size_t c : spec.class_ids) {
        if (c >= ds.num_classes) throw ConfigError("task stream references class outside the dataset");
        holders[c].push_back(u);
      }
    }
  }
  std::vector<std::vector<std::size_t>> owned(U);
  if (dirichlet_alpha) {
    owned = dirichlet_split(ds.train.labels, ds.num_classes, U, *dirichlet_alpha, seed, holders).indices;
  }
  fd.train.resize(U);
  fd.test.resize(U);
  for (std::size_t u = 0; u < U; ++u) {
    for (const auto& spec : fd.streams[u]) {
      if (dirichlet_alpha) {
        std::vector<std::size_t> rows;
        for (std::size_t i : owned[u]) {
          if (std::find(spec.class_ids.begin(), spec.class_ids.end(), ds.train.labels[i]) != spec.class_ids.end()) {
            rows.push_back(i);
          }
        }
        fd.train[u].push_back(select_rows(ds.train, rows));
      } else {
        fd.train[u].push_back(select_classes(ds.train, spec.class_ids));
      }
      fd.test[u].push_back(select_classes(ds.test, spec.class_ids));
    }
  }
  return fd;
}

struct ClientState {
  std::size_t client_id = 0;
  ParamVector params;
  ReplayMemory memory;
  std::size_t task = 0;
  std::map<std::size_t, ParamVector> cached_gradients;  // previous task -> gradient
};

struct ServerState {
  ParamVector params;
  std::size_t round = 0;
  std::size_t task = 0;
};

// Deterministic per-(purpose, task, round, client) generator so results do
// not depend on execution order.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t task,
                                   std::uint64_t round, std::uint64_t client) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(purpose),
                    std::uint32_t(task), std::uint32_t(round), std::uint32_t(client)};
  return std::mt19937_64(seq);
}

namespace rng_purpose {
inline constexpr std::uint64_t sampling = 1;
inline constexpr std::uint64_t local = 2;
inline constexpr std::uint64_t ingest = 3;
inline constexpr std::uint64_t init = 4;
}  // namespace rng_purpose

// Uniform sample of round(fraction * U) (at least one) client ids without
// replacement, returned sorted.
inline std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, std::uint64_t seed,
                                               std::size_t task, std::size_t round) {
  const auto k = std::max<std::size_t>(1, std::size_t(std::llround(fraction * double(num_clients))));
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  if (k >= num_clients) return ids;
  auto rng = derived_rng(seed, rng_purpose::sampling, task, round, 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Gradient of a previous task from the replay memory: cross-entropy over the
// stored samples (coreset mode), or the mean head gradient over the task's
// class prototypes fed straight to the head (prototype mode). Returns
// nothing when the memory holds nothing for that task.
inline std::optional<ParamVector> task_gradient_from_memory(const ReplayMemory& memory, std::size_t task,
                                                            const ParamVector& params, const ModelShape& shape,
                                                            TaskGradientMode mode) {
  if (mode == TaskGradientMode::coreset) {
    const Batch b = memory.task_batch(task);
    if (b.size() == 0) return std::nullopt;
    return backward(params, shape, b);
  }
  const auto protos = memory.task_prototypes(task);
  if (protos.empty()) return std::nullopt;
  Matrix emb(protos.size(), shape.embedding_dim());
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < protos.size(); ++i) {
    if (protos[i].mean_embedding.size() != shape.embedding_dim()) throw ShapeError("prototype width mismatch");
    std::copy(protos[i].mean_embedding.begin(), protos[i].mean_embedding.end(), emb.row(i).begin());
    labels.push_back(protos[i].class_id);
  }
  return head_backward(params, shape, emb, labels);
}

struct ClientRoundResult {
  std::size_t client_id = 0;
  ParamVector uploaded;
  bool skipped = false;
  double train_loss = 0.0;
  std::size_t local_steps = 0;
  std::size_t gm_inputs = 0;  // gradients handed to TAM (0 when TAM is off)
  std::vector<std::pair<std::size_t, double>> temporal_cosines;  // (previous task, cos)
};

namespace detail {

// d(prototype loss)/d(embeddings) for one minibatch: prototypes are the
// (fixed) class means of the batch embeddings plus the stored prototypes of
// classes not in the batch. Empty when fewer than two prototypes exist.
inline Matrix proto_term_signal(const Matrix& emb, const std::vector<std::size_t>& labels,
                                const ReplayMemory& memory, double weight) {
  std::map<std::size_t, std::pair<std::vector<double>, std::size_t>> sums;
  for (std::size_t r = 0; r < emb.rows; ++r) {
    auto& [sum, count] = sums[labels[r]];
    sum.resize(emb.cols, 0.0);
    for (std::size_t c = 0; c < emb.cols; ++c) sum[c] += emb(r, c);
    ++count;
  }
  std::vector<Prototype> protos;
  for (auto& [cls, sc] : sums) {
    for (double& v : sc.first) v /= double(sc.second);
    protos.push_back({cls, sc.first, sc.second});
  }
  for (const auto& p : memory.prototypes()) {
    if (!sums.count(p.class_id) && p.mean_embedding.size() == emb.cols) protos.push_back(p);
  }
  if (protos.size() < 2) return Matrix();
  Matrix d = proto_loss(emb, labels, protos).d_embeddings;
  for (double& v : d.data) v *= weight;
  return d;
}

inline ParamVector rescaled(ParamVector v, double target_norm) {
  const double n = norm(v);
  if (n > 0.0) v *= target_norm / n;
  return v;
}

}  // namespace detail

// One local round: E epochs of shuffled mini-batch SGD on the current task.
// With TAM, the SGD displacement is replaced by a gradient-matched step:
// the current-task gradient (mean of the per-epoch mean gradients) and the
// replayed previous-task gradients, all evaluated at the round-start
// parameters, go through gradient matching, and the client moves
// local_lr * (number of local steps) along the result.
inline ClientRoundResult client_local_round(ClientState& state, const ParamVector& global, const Batch& task_data,
                                            const ModelShape& shape, const SimConfig& cfg, std::mt19937_64& rng) {
  const auto& fed = cfg.fed;
  ClientRoundResult out;
  out.client_id = state.client_id;
  if (global.size() != shape.param_count()) throw ShapeError("client_local_round: global params length");
  state.params = global;
  if (task_data.size() == 0) {
    out.skipped = true;
    out.uploaded = global;
    return out;
  }

  const std::size_t n = task_data.size();
  const std::size_t bs = std::min(fed.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  ParamVector trajectory_grad(global.size());
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  const bool proto_term = fed.pcs && fed.proto_loss_weight > 0.0;

  for (std::size_t e = 0; e < fed.local_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    ParamVector epoch_grad(global.size());
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      Batch mb{Matrix(stop - start, shape.input_dim), {}};
      for (std::size_t i = start; i < stop; ++i) {
        std::copy(task_data.inputs.row(order[i]).begin(), task_data.inputs.row(order[i]).end(),
                  mb.inputs.row(i - start).begin());
        mb.labels.push_back(task_data.labels[order[i]]);
      }
      double batch_loss = 0.0;
      ParamVector g = proto_term
                          ? backward_with_embedding_term(
                                state.params, shape, mb,
                                [&](const Matrix& emb) {
                                  return detail::proto_term_signal(emb, mb.labels, state.memory, fed.proto_loss_weight);
                                },
                                &batch_loss)
                          : backward(state.params, shape, mb, &batch_loss);
      loss_sum += batch_loss;
      ++loss_count;
      if (!g.all_finite()) throw NumericError("client " + std::to_string(state.client_id) + ": non-finite gradient");
      state.params.axpy(-fed.local_lr, g);
      epoch_grad += g;
      ++batches;
      ++out.local_steps;
    }
    trajectory_grad.axpy(1.0 / double(batches), epoch_grad);
  }
  trajectory_grad *= 1.0 / double(fed.local_epochs);
  out.train_loss = loss_sum / double(loss_count);

  // Previous-task gradients at the round-start parameters.
  std::vector<std::pair<std::size_t, ParamVector>> previous;
  for (std::size_t task : state.memory.tasks()) {
    if (task >= state.task) continue;
    if (fed.cache_previous_gradients) {
      auto it = state.cached_gradients.find(task);
      if (it == state.cached_gradients.end()) {
        auto g = task_gradient_from_memory(state.memory, task, global, shape, fed.task_gradient_mode);
        if (!g) continue;
        it = state.cached_gradients.emplace(task, std::move(*g)).first;
      }
      previous.emplace_back(task, it->second);
    } else if (auto g = task_gradient_from_memory(state.memory, task, global, shape, fed.task_gradient_mode)) {
      previous.emplace_back(task, std::move(*g));
    }
  }

  if (fed.tam) {
    std::vector<ParamVector> inputs;
    for (const auto& [task, g] : previous) inputs.push_back(g);
    inputs.push_back(trajectory_grad);
    out.gm_inputs = inputs.size();
    const double n_inputs = double(inputs.size());
    ParamVector direction = gradient_match(std::move(inputs), cfg.tam_gm);
    if (cfg.tam_gm.normalize_inputs) direction = detail::rescaled(std::move(direction), norm(trajectory_grad));
    // Sum form: the task gradients are added rather than averaged, which is
    // the mean-form output scaled by the number of tasks.
    if (fed.tam_sum) direction *= n_inputs;
    state.params = global;
    state.params.axpy(-fed.local_lr * double(out.local_steps), direction);
  }
  if (!state.params.all_finite()) throw NumericError("client " + std::to_string(state.client_id) + ": non-finite update");

  const ParamVector applied = global - state.params;  // descent direction actually taken
  for (const auto& [task, g] : previous) {
    const auto c = cosine(applied, g);
    if (!c.degenerate) out.temporal_cosines.emplace_back(task, c.value);
  }
  out.uploaded = state.params;
  return out;
}

struct AggregateResult {
  ParamVector update;  // theta_old - theta_new
  std::vector<std::pair<std::size_t, double>> spatial_cosines;  // (client, cos(update, delta_u))
};

// Pseudo-gradients delta_u = theta_old - theta_u (ascending client id);
// theta_new = theta_old - global_lr * (SAM ? GM(deltas) : mean(deltas)).
inline AggregateResult server_aggregate(std::vector<std::pair<std::size_t, ParamVector>> updates,
                                        ServerState& server, const SimConfig& cfg) {
  if (updates.empty()) throw ConfigError("server_aggregate: no client updates");
  std::sort(updates.begin(), updates.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<ParamVector> deltas;
  for (const auto& [id, theta] : updates) {
    if (theta.size() != server.params.size()) throw ShapeError("server_aggregate: update length mismatch");
    deltas.push_back(server.params - theta);
  }
  ParamVector direction;
  if (cfg.fed.sam) {
    double mean_norm = 0.0;
    for (const auto& d : deltas) mean_norm += norm(d) / double(deltas.size());
    direction = gradient_match(deltas, cfg.sam_gm);
    if (cfg.sam_gm.normalize_inputs) direction = detail::rescaled(std::move(direction), mean_norm);
  } else {
    direction = ParamVector(server.params.size());
    for (const auto& d : deltas) direction += d;
    direction *= 1.0 / double(deltas.size());
  }
  AggregateResult res;
  res.update = cfg.fed.global_lr * direction;
  server.params -= res.update;
  if (!server.params.all_finite()) throw NumericError("server_aggregate: non-finite global parameters");
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    const auto c = cosine(res.update, deltas[k]);
    if (!c.degenerate) res.spatial_cosines.emplace_back(updates[k].first, c.value);
  }
  ++server.round;
  return res;
}

struct ExperimentResult {
  std::vector<MetricRecord> records;
  AccuracyMatrix accuracy;
  std::vector<CosineRecord> cosines;
  ParamVector final_params;
  std::vector<ClientState> clients;
  std::size_t gm_input_total = 0;

  double final_mean_accuracy() const { return accuracy.mean_row(accuracy.num_tasks() - 1); }
  std::optional<double> forgetting() const {
    if (accuracy.num_tasks() < 2) return std::nullopt;
    return averaged_forgetting(accuracy);
  }
  double mean_cosine(CosineScope scope) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& c : cosines) {
      if (c.scope == scope) {
        s += c.value;
        ++n;
      }
    }
    return n ? s / double(n) : 0.0;
  }
};

// Resume point captured at a task boundary.
struct TaskBoundaryState {
  std::size_t completed_task = 0;
  ParamVector global_params;
  std::vector<ReplayMemory> memories;
  std::vector<std::vector<double>> accuracy_rows;
};

struct RunHooks {
  std::function<void(const TaskBoundaryState&, const std::vector<ClientState>&)> on_task_end;
  std::function<void(std::size_t task, std::size_t round, const ParamVector& global,
                     const std::vector<ClientRoundResult>&)>
      on_round_end;
  std::function<void(const MetricRecord&)> on_record;
  std::function<void(const CosineRecord&)> on_cosine;
};

inline double mean_accuracy_on_task(const ParamVector& params, const FederationData& data, std::size_t task) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t u = 0; u < data.test.size(); ++u) {
    if (task >= data.test[u].size() || data.test[u][task].size() == 0) continue;
    s += accuracy(params, data.shape, data.test[u][task]);
    ++n;
  }
  return n ? s / double(n) : 0.0;
}

// Drives T tasks x R rounds. At each task boundary the global model is
// evaluated on every earlier task (accuracy matrix row) and every client
// ingests the finished task into its replay memory (coreset selection with
// PCS, a random K-subset without).
inline ExperimentResult run_experiment(const SimConfig& cfg, const FederationData& data, const std::string& run_id,
                                       const RunHooks& hooks = {},
                                       const std::optional<TaskBoundaryState>& resume = std::nullopt) {
  cfg.validate();
  const auto& fed = cfg.fed;
  const std::size_t U = fed.num_clients;
  const std::size_t T = fed.num_tasks;
  if (data.streams.size() != U || data.train.size() != U) throw ConfigError("federation data does not match num_clients");
  for (std::size_t u = 0; u < U; ++u) {
    if (data.train[u].size() < T || data.test[u].size() < T) throw ConfigError("client task stream shorter than num_tasks");
  }
  const std::string algo = fed.algorithm_name();

  ExperimentResult res;
  res.accuracy = AccuracyMatrix(T);
  ServerState server;
  server.params = init_params(data.shape, derived_rng(fed.seed, rng_purpose::init, 0, 0, 0)());
  std::vector<ClientState> clients(U);
  for (std::size_t u = 0; u < U; ++u) {
    clients[u].client_id = u;
    clients[u].memory = ReplayMemory(fed.memory_per_class);
  }
  std::size_t first_task = 0;
  if (resume) {
    if (resume->global_params.size() != server.params.size()) throw ConfigError("resume: parameter length mismatch");
    if (resume->memories.size() != U) throw ConfigError("resume: client count mismatch");
    server.params = resume->global_params;
    for (std::size_t u = 0; u < U; ++u) clients[u].memory = resume->memories[u];
    for (std::size_t t = 0; t < resume->accuracy_rows.size(); ++t) {
      for (std::size_t i = 0; i < resume->accuracy_rows[t].size(); ++i) res.accuracy.set(t, i, resume->accuracy_rows[t][i]);
    }
    first_task = resume->completed_task + 1;
  }

  auto record = [&](std::size_t task, std::size_t round, const std::string& client, const std::string& metric,
                    double value) {
    res.records.push_back({run_id, algo, fed.seed, task, round, client, metric, value});
    if (hooks.on_record) hooks.on_record(res.records.back());
  };
  auto log_cosine = [&](CosineRecord c) {
    res.cosines.push_back(std::move(c));
    if (hooks.on_cosine) hooks.on_cosine(res.cosines.back());
  };

  for (std::size_t t = first_task; t < T; ++t) {
    server.task = t;
    for (auto& c : clients) {
      c.task = t;
      c.cached_gradients.clear();
    }
    for (std::size_t r = 0; r < fed.rounds_per_task; ++r) {
      const auto chosen = sample_clients(U, fed.participation_fraction, fed.seed, t, r);
      std::vector<ClientRoundResult> results(chosen.size());
      auto work = [&](std::size_t k) {
        auto& c = clients[chosen[k]];
        auto rng = derived_rng(fed.seed, rng_purpose::local, t, r, c.client_id);
        results[k] = client_local_round(c, server.params, data.train[c.client_id][t], data.shape, cfg, rng);
      };
      if (fed.jobs > 1) {
        for (std::size_t start = 0; start < chosen.size(); start += fed.jobs) {
          std::vector<std::future<void>> wave;
          for (std::size_t k = start; k < std::min(chosen.size(), start + fed.jobs); ++k) {
            wave.push_back(std::async(std::launch::async, work, k));
          }
          for (auto& f : wave) f.get();
        }
      } else {
        for (std::size_t k = 0; k < chosen.size(); ++k) work(k);
      }

      std::vector<std::pair<std::size_t, ParamVector>> updates;
      std::vector<double> locals, globals_same_clients;
      double loss_sum = 0.0;
      std::size_t active = 0;
      for (const auto& cr : results) {
        if (cr.skipped) continue;
        updates.emplace_back(cr.client_id, cr.uploaded);
        res.gm_input_total += cr.gm_inputs;
        loss_sum += cr.train_loss;
        ++active;
        for (const auto& [task, value] : cr.temporal_cosines) {
          log_cosine({t, r, CosineScope::temporal,
                                 "c" + std::to_string(cr.client_id) + ":t" + std::to_string(task), value});
        }
      }
      if (updates.empty()) throw ConfigError("round " + std::to_string(r) + " of task " + std::to_string(t) + ": every sampled client had no data");
      const ParamVector before = server.params;
      const auto agg = server_aggregate(updates, server, cfg);
      for (const auto& [client, value] : agg.spatial_cosines) {
        log_cosine({t, r, CosineScope::spatial, "c" + std::to_string(client) + ":agg", value});
      }

      for (const auto& cr : results) {
        if (cr.skipped) continue;
        const auto& test = data.test[cr.client_id][t];
        if (test.size() == 0) continue;
        const double local = accuracy(cr.uploaded, data.shape, test);
        locals.push_back(local);
        globals_same_clients.push_back(accuracy(server.params, data.shape, test));
        record(t, r, std::to_string(cr.client_id), "local_accuracy", local);
      }
      record(t, r, "global", "train_loss", active ? loss_sum / double(active) : 0.0);
      record(t, r, "global", "current_task_accuracy", mean_accuracy_on_task(server.params, data, t));
      if (!locals.empty()) {
        const double g = std::accumulate(globals_same_clients.begin(), globals_same_clients.end(), 0.0) /
                         double(globals_same_clients.size());
        record(t, r, "global", "generalization_gap", generalization_gap(locals, g));
      }
      {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& cr : results) {
          for (const auto& [task, value] : cr.temporal_cosines) {
            s += value;
            ++n;
          }
        }
        if (n) record(t, r, "global", "temporal_cosine", s / double(n));
      }
      if (!agg.spatial_cosines.empty()) {
        double s = 0.0;
        for (const auto& [client, value] : agg.spatial_cosines) s += value;
        record(t, r, "global", "spatial_cosine", s / double(agg.spatial_cosines.size()));
      }
      record(t, r, "global", "update_norm", norm(before - server.params));
      if (hooks.on_round_end) hooks.on_round_end(t, r, server.params, results);
    }

    const std::size_t boundary = fed.rounds_per_task;
    for (std::size_t i = 0; i <= t; ++i) {
      const double a = mean_accuracy_on_task(server.params, data, i);
      res.accuracy.set(t, i, a);
      record(t, boundary, "global", "task_accuracy_" + std::to_string(i), a);
    }
    record(t, boundary, "global", "mean_accuracy", res.accuracy.mean_row(t));

    for (std::size_t u = 0; u < U; ++u) {
      auto& c = clients[u];
      c.params = server.params;
      const Batch& b = data.train[u][t];
      std::map<std::size_t, std::vector<std::vector<double>>> rows;
      for (std::size_t i = 0; i < b.size(); ++i) rows[b.labels[i]].emplace_back(b.inputs.row(i).begin(), b.inputs.row(i).end());
      std::map<std::size_t, Matrix> per_class;
      for (auto& [cls, rs] : rows) per_class.emplace(cls, Matrix::from_rows(rs));
      auto rng = derived_rng(fed.seed, rng_purpose::ingest, t, 0, u);
      if (fed.pcs) {
        ingest_task(c.memory, per_class, t, server.params, data.shape, cfg.ingest, rng);
      } else {
        ingest_task_random(c.memory, per_class, t, server.params, data.shape, rng);
      }
    }

    if (hooks.on_task_end) {
      TaskBoundaryState st{t, server.params, {}, {}};
      for (const auto& c : clients) st.memories.push_back(c.memory);
      for (std::size_t tt = 0; tt <= t; ++tt) {
        std::vector<double> row;
        for (std::size_t i = 0; i <= tt; ++i) row.push_back(res.accuracy.at(tt, i));
        st.accuracy_rows.push_back(std::move(row));
      }
      hooks.on_task_end(st, clients);
    }
  }

  const std::size_t last = T - 1;
  record(last, fed.rounds_per_task, "global", "final_mean_accuracy", res.final_mean_accuracy());
  if (const auto af = res.forgetting()) record(last, fed.rounds_per_task, "global", "averaged_forgetting", *af);
  res.final_params = server.params;
  res.clients = std::move(clients);
  return res;
}

}  // namespace stamp
