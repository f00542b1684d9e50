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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "stamp/fedsim.hpp"

namespace stamp {
namespace {

Dataset small_dataset(std::uint64_t seed = 3) {
  SyntheticDatasetConfig dc;
  dc.num_classes = 6;
  dc.input_dim = 8;
  dc.samples_per_class = 30;
  dc.class_center_scale = 2.0;
  dc.seed = seed;
  return generate_synthetic(dc);
}

const ModelShape kShape{8, {10}, 6};

SimConfig base_config() {
  SimConfig cfg;
  cfg.fed.num_clients = 2;
  cfg.fed.local_epochs = 1;
  cfg.fed.rounds_per_task = 2;
  cfg.fed.num_tasks = 3;
  cfg.fed.local_lr = 0.1;
  cfg.fed.batch_size = 1000;
  cfg.fed.sam = cfg.fed.tam = cfg.fed.pcs = false;
  cfg.fed.memory_per_class = 5;
  cfg.tam_gm.inner_rounds = 200;
  cfg.sam_gm.inner_rounds = 200;
  return cfg;
}

double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::map<std::size_t, Matrix> by_class(const Batch& b) {
  std::map<std::size_t, std::vector<std::vector<double>>> rows;
  for (std::size_t i = 0; i < b.size(); ++i) rows[b.labels[i]].emplace_back(b.inputs.row(i).begin(), b.inputs.row(i).end());
  std::map<std::size_t, Matrix> out;
  for (auto& [c, r] : rows) out.emplace(c, Matrix::from_rows(r));
  return out;
}

TEST(ClientLocalRound, SingleSgdStepWhenTamDisabled) {
  const auto ds = small_dataset();
  const Batch data = select_classes(ds.train, {0, 1});
  const auto cfg = base_config();
  const ParamVector theta = init_params(kShape, 11);
  ClientState st;
  st.memory = ReplayMemory(5);
  std::mt19937_64 rng(1);
  const auto res = client_local_round(st, theta, data, kShape, cfg, rng);
  ParamVector expected = theta;
  expected.axpy(-cfg.fed.local_lr, backward(theta, kShape, data));
  EXPECT_EQ(res.local_steps, 1u);
  EXPECT_LT(max_abs_diff(res.uploaded, expected), 1e-12);
  EXPECT_EQ(res.gm_inputs, 0u);
}

TEST(ClientLocalRound, TamOnFirstTaskScalesDisplacementByOnePlusKappa) {
  const auto ds = small_dataset();
  const Batch data = select_classes(ds.train, {0, 1});
  auto cfg = base_config();
  cfg.fed.local_epochs = 3;
  cfg.fed.batch_size = 16;
  const ParamVector theta = init_params(kShape, 12);

  ClientState a, b;
  a.memory = b.memory = ReplayMemory(5);
  std::mt19937_64 ra(5), rb(5);
  const auto plain = client_local_round(a, theta, data, kShape, cfg, ra);
  cfg.fed.tam = true;
  const auto matched = client_local_round(b, theta, data, kShape, cfg, rb);
  EXPECT_EQ(matched.gm_inputs, 1u);
  const ParamVector d_plain = theta - plain.uploaded;
  const ParamVector d_tam = theta - matched.uploaded;
  const double k = 1.0 + cfg.tam_gm.kappa;
  EXPECT_LT(max_abs_diff(d_tam, k * d_plain), 1e-12 * (1.0 + norm(d_plain)));
}

TEST(ClientLocalRound, ThirdTaskFeedsThreeGradientsToMatching) {
  const auto ds = small_dataset();
  auto cfg = base_config();
  cfg.fed.tam = true;
  const ParamVector theta = init_params(kShape, 13);
  ClientState st;
  st.memory = ReplayMemory(5);
  std::mt19937_64 rng(2);
  ingest_task_random(st.memory, by_class(select_classes(ds.train, {0, 1})), 0, theta, kShape, rng);
  ingest_task_random(st.memory, by_class(select_classes(ds.train, {2, 3})), 1, theta, kShape, rng);
  st.task = 2;
  const auto res = client_local_round(st, theta, select_classes(ds.train, {4, 5}), kShape, cfg, rng);
  EXPECT_EQ(res.gm_inputs, 3u);
  EXPECT_EQ(res.temporal_cosines.size(), 2u);

  // Only one previous task has anything stored.
  ClientState partial;
  partial.memory = ReplayMemory(5);
  ingest_task_random(partial.memory, by_class(select_classes(ds.train, {0, 1})), 0, theta, kShape, rng);
  partial.task = 2;
  EXPECT_EQ(client_local_round(partial, theta, select_classes(ds.train, {4, 5}), kShape, cfg, rng).gm_inputs, 2u);
}

TEST(ClientLocalRound, SumFormIsMeanFormTimesTaskCount) {
  const auto ds = small_dataset();
  auto cfg = base_config();
  cfg.fed.tam = true;
  const ParamVector theta = init_params(kShape, 17);
  ClientState st;
  st.memory = ReplayMemory(5);
  std::mt19937_64 fill(2);
  ingest_task_random(st.memory, by_class(select_classes(ds.train, {0, 1})), 0, theta, kShape, fill);
  ingest_task_random(st.memory, by_class(select_classes(ds.train, {2, 3})), 1, theta, kShape, fill);
  st.task = 2;
  ClientState other = st;
  const Batch data = select_classes(ds.train, {4, 5});
  std::mt19937_64 ra(9), rb(9);
  const auto summed = client_local_round(st, theta, data, kShape, cfg, ra);
  cfg.fed.tam_sum = false;
  const auto averaged = client_local_round(other, theta, data, kShape, cfg, rb);
  const ParamVector d_mean = theta - averaged.uploaded;
  EXPECT_LT(max_abs_diff(theta - summed.uploaded, 3.0 * d_mean), 1e-12 * (1.0 + norm(d_mean)));
}

TEST(ClientLocalRound, EmptyTaskDataIsSkipped) {
  const auto cfg = base_config();
  const ParamVector theta = init_params(kShape, 14);
  ClientState st;
  st.memory = ReplayMemory(5);
  std::mt19937_64 rng(2);
  const auto res = client_local_round(st, theta, Batch{Matrix(0, 8), {}}, kShape, cfg, rng);
  EXPECT_TRUE(res.skipped);
  EXPECT_EQ(res.uploaded, theta);
}

TEST(ClientLocalRound, NonFiniteGradientAborts) {
  const auto ds = small_dataset();
  Batch data = select_classes(ds.train, {0, 1});
  data.inputs(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto cfg = base_config();
  ClientState st;
  st.memory = ReplayMemory(5);
  std::mt19937_64 rng(2);
  EXPECT_THROW(client_local_round(st, init_params(kShape, 1), data, kShape, cfg, rng), NumericError);
}

TEST(TaskGradientFromMemory, CoresetHoldingWholeTaskEqualsFullGradient) {
  const auto ds = small_dataset();
  const Batch data = select_classes(ds.train, {0, 1});
  const ParamVector theta = init_params(kShape, 15);
  ReplayMemory mem(1000);
  std::mt19937_64 rng(3);
  ingest_task_random(mem, by_class(data), 0, theta, kShape, rng);
  const auto g = task_gradient_from_memory(mem, 0, theta, kShape, TaskGradientMode::coreset);
  ASSERT_TRUE(g.has_value());
  EXPECT_LT(max_abs_diff(*g, backward(theta, kShape, data)), 1e-9);
  EXPECT_FALSE(task_gradient_from_memory(mem, 1, theta, kShape, TaskGradientMode::coreset).has_value());
}

TEST(TaskGradientFromMemory, PrototypeModeLeavesEncoderSliceZero) {
  const auto ds = small_dataset();
  const ParamVector theta = init_params(kShape, 16);
  ReplayMemory mem(5);
  std::mt19937_64 rng(3);
  ingest_task_random(mem, by_class(select_classes(ds.train, {2, 4})), 0, theta, kShape, rng);
  const auto g = task_gradient_from_memory(mem, 0, theta, kShape, TaskGradientMode::prototype);
  ASSERT_TRUE(g.has_value());
  for (std::size_t i = 0; i < kShape.head_offset(); ++i) ASSERT_EQ((*g)[i], 0.0) << i;
  double head = 0.0;
  for (std::size_t i = kShape.head_offset(); i < g->size(); ++i) head += std::abs((*g)[i]);
  EXPECT_GT(head, 0.0);
}

TEST(TaskGradientFromMemory, PrototypeOnDecisionBoundaryIsSymmetric) {
  // Head with equal logits for classes 0 and 1 at a zero embedding.
  const ModelShape shape{2, {2}, 2};
  ParamVector theta(shape.param_count());
  ReplayMemory mem(3);
  auto& s0 = mem.slot(0);
  s0.task_id = 0;
  s0.prototype = {0, {0.0, 0.0}, 1};
  auto& s1 = mem.slot(1);
  s1.task_id = 0;
  s1.prototype = {1, {0.0, 0.0}, 1};
  const auto f = forward(theta, shape, Batch{Matrix(1, 2), {0}});
  EXPECT_NEAR(f.loss, std::log(2.0), 1e-15);
  const auto g = task_gradient_from_memory(mem, 0, theta, shape, TaskGradientMode::prototype);
  ASSERT_TRUE(g.has_value());
  // Label 0 and label 1 pull the biases in opposite directions and cancel.
  for (std::size_t i = 0; i < g->size(); ++i) EXPECT_NEAR((*g)[i], 0.0, 1e-15);
}

TEST(ServerAggregate, FedAvgRecoversMean) {
  auto cfg = base_config();
  ServerState server{init_params(kShape, 20), 0, 0};
  const ParamVector t1 = init_params(kShape, 21), t2 = init_params(kShape, 22), t3 = init_params(kShape, 23);
  server_aggregate({{2, t3}, {0, t1}, {1, t2}}, server, cfg);
  for (std::size_t i = 0; i < t1.size(); ++i) EXPECT_NEAR(server.params[i], (t1[i] + t2[i] + t3[i]) / 3.0, 1e-12);
  EXPECT_EQ(server.round, 1u);
}

TEST(ServerAggregate, SamOnIdenticalUploads) {
  auto cfg = base_config();
  cfg.fed.sam = true;
  const ParamVector old = init_params(kShape, 30), target = init_params(kShape, 31);
  ServerState server{old, 0, 0};
  server_aggregate({{0, target}, {1, target}, {2, target}}, server, cfg);
  const double k = cfg.fed.global_lr * (1.0 + cfg.sam_gm.kappa);
  for (std::size_t i = 0; i < old.size(); ++i) EXPECT_NEAR(server.params[i], old[i] - k * (old[i] - target[i]), 1e-12);

  cfg.fed.global_lr = 1.0 / (1.0 + cfg.sam_gm.kappa);
  ServerState s2{old, 0, 0};
  server_aggregate({{0, target}, {1, target}}, s2, cfg);
  EXPECT_LT(max_abs_diff(s2.params, target), 1e-12);
}

TEST(ServerAggregate, OrderOfUpdatesDoesNotMatter) {
  auto cfg = base_config();
  cfg.fed.sam = true;
  const ParamVector old = init_params(kShape, 40);
  std::vector<std::pair<std::size_t, ParamVector>> ups;
  for (std::size_t u = 0; u < 4; ++u) ups.emplace_back(u, init_params(kShape, 41 + u));
  ServerState a{old, 0, 0}, b{old, 0, 0};
  server_aggregate(ups, a, cfg);
  std::reverse(ups.begin(), ups.end());
  server_aggregate(ups, b, cfg);
  EXPECT_EQ(a.params, b.params);
}

TEST(ServerAggregate, RejectsEmptyAndMismatched) {
  const auto cfg = base_config();
  ServerState server{init_params(kShape, 1), 0, 0};
  EXPECT_THROW(server_aggregate({}, server, cfg), ConfigError);
  EXPECT_THROW(server_aggregate({{0, ParamVector(3)}}, server, cfg), ShapeError);
}

TEST(SampleClients, HalfOfTenIsUniformWithoutReplacement) {
  std::vector<int> counts(10, 0);
  const int rounds = 1000;
  for (int r = 0; r < rounds; ++r) {
    const auto ids = sample_clients(10, 0.5, 77, 0, std::size_t(r));
    ASSERT_EQ(ids.size(), 5u);
    ASSERT_TRUE(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    for (auto id : ids) ++counts[id];
  }
  const double expected = rounds * 0.5;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 9 degrees of freedom, p = 0.001 critical value.
  EXPECT_LT(chi2, 27.88);
}

TEST(SampleClients, FullParticipationAndMinimumOne) {
  EXPECT_EQ(sample_clients(4, 1.0, 1, 0, 0), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(sample_clients(10, 0.01, 1, 0, 0).size(), 1u);
}

FederationData small_federation(const Dataset& ds, std::size_t U, std::size_t T, std::uint64_t seed) {
  return build_federation_data(ds, kShape, build_task_streams(ds.num_classes, 2, U, T, seed, false), std::nullopt, seed);
}

TEST(RunExperiment, DegenerateFederationMatchesCentralizedSgd) {
  const auto ds = small_dataset();
  auto cfg = base_config();
  cfg.fed.num_clients = 1;
  cfg.fed.num_tasks = 1;
  cfg.fed.rounds_per_task = 1;
  const auto data = small_federation(ds, 1, 1, 4);
  const auto res = run_experiment(cfg, data, "r");
  ParamVector expected = init_params(kShape, derived_rng(cfg.fed.seed, rng_purpose::init, 0, 0, 0)());
  expected.axpy(-cfg.fed.local_lr, backward(expected, kShape, data.train[0][0]));
  EXPECT_LT(max_abs_diff(res.final_params, expected), 1e-12);
}

TEST(RunExperiment, DeterministicAcrossRunsAndWorkerCounts) {
  const auto ds = small_dataset();
  auto cfg = base_config();
  cfg.fed.sam = cfg.fed.tam = cfg.fed.pcs = true;
  cfg.fed.num_clients = 4;
  cfg.fed.participation_fraction = 0.75;
  cfg.fed.batch_size = 8;
  const auto data = small_federation(ds, 4, 3, 5);
  const auto a = run_experiment(cfg, data, "r");
  const auto b = run_experiment(cfg, data, "r");
  cfg.fed.jobs = 3;
  const auto c = run_experiment(cfg, data, "r");
  ASSERT_EQ(a.records.size(), b.records.size());
  ASSERT_EQ(a.records.size(), c.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i], b.records[i]) << i;
    EXPECT_EQ(a.records[i], c.records[i]) << i;
  }
  EXPECT_EQ(a.final_params, c.final_params);
}

TEST(RunExperiment, ShapesAndMemoryStayConsistent) {
  const auto ds = small_dataset();
  auto cfg = base_config();
  cfg.fed.sam = cfg.fed.tam = cfg.fed.pcs = true;
  cfg.fed.batch_size = 16;
  const auto data = small_federation(ds, 2, 3, 6);
  std::size_t boundaries = 0;
  RunHooks hooks;
  hooks.on_task_end = [&](const TaskBoundaryState& st, const std::vector<ClientState>& clients) {
    EXPECT_EQ(st.completed_task, boundaries);
    EXPECT_EQ(st.global_params.size(), kShape.param_count());
    for (const auto& c : clients) EXPECT_TRUE(c.memory.within_capacity());
    ++boundaries;
  };
  const auto res = run_experiment(cfg, data, "r", hooks);
  EXPECT_EQ(boundaries, 3u);
  EXPECT_EQ(res.final_params.size(), kShape.param_count());
  // Tasks 2 and 3 each see 1 + (number of earlier tasks) gradients per client round.
  EXPECT_EQ(res.gm_input_total, 2u * 2u * (1u + 2u + 3u));
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t i = 0; i <= t; ++i) EXPECT_NO_THROW(res.accuracy.at(t, i));
  }
  EXPECT_TRUE(res.forgetting().has_value());
}

TEST(RunExperiment, ResumeFromBoundaryReproducesRun) {
  const auto ds = small_dataset();
  auto cfg = base_config();
  cfg.fed.sam = cfg.fed.tam = cfg.fed.pcs = true;
  cfg.fed.batch_size = 16;
  const auto data = small_federation(ds, 2, 3, 7);
  std::optional<TaskBoundaryState> saved;
  RunHooks hooks;
  hooks.on_task_end = [&](const TaskBoundaryState& st, const std::vector<ClientState>&) {
    if (st.completed_task == 0) saved = st;
  };
  const auto full = run_experiment(cfg, data, "r", hooks);
  ASSERT_TRUE(saved.has_value());
  const auto resumed = run_experiment(cfg, data, "r", {}, saved);
  EXPECT_EQ(full.final_params, resumed.final_params);
  EXPECT_EQ(full.accuracy.at(2, 0), resumed.accuracy.at(2, 0));
}

TEST(RunExperiment, FedAvgLearnsFirstTask) {
  const auto ds = small_dataset();
  auto cfg = base_config();
  cfg.fed.num_tasks = 1;
  cfg.fed.rounds_per_task = 10;
  cfg.fed.local_epochs = 3;
  cfg.fed.batch_size = 16;
  const auto res = run_experiment(cfg, small_federation(ds, 2, 1, 8), "r");
  EXPECT_GT(res.accuracy.at(0, 0), 0.8);
}

TEST(FedConfig, ValidatesAndNames) {
  FedConfig c;
  EXPECT_EQ(c.algorithm_name(), "stamp");
  c.sam = c.tam = c.pcs = false;
  EXPECT_EQ(c.algorithm_name(), "fedavg");
  c.tam = c.pcs = true;
  EXPECT_EQ(c.algorithm_name(), "tam+pcs");
  c.participation_fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace stamp
