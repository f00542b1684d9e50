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

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stamp/config.hpp"
#include "stamp/runner.hpp"

#ifndef STAMP_SOURCE_DIR
#error "STAMP_SOURCE_DIR must be defined"
#endif
#ifndef STAMP_CLI_PATH
#error "STAMP_CLI_PATH must be defined"
#endif

namespace stamp {
namespace {

namespace fs = std::filesystem;

fs::path source(const std::string& rel) { return fs::path(STAMP_SOURCE_DIR) / rel; }

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("stamp_cli_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig minimal() { return load_config(source("configs/minimal.json").string()); }

TEST(Config, DefaultShipsReferenceHyperparameters) {
  const auto c = load_config(source("configs/default.json").string());
  EXPECT_EQ(c.sim.tam_gm.kappa, 0.5);
  EXPECT_EQ(c.sim.sam_gm.kappa, 0.5);
  EXPECT_EQ(c.sim.tam_gm.inner_lr, 25.0);
  EXPECT_EQ(c.sim.tam_gm.scheduler_step, 30u);
  EXPECT_EQ(c.sim.fed.local_epochs, 5u);
  EXPECT_EQ(c.sim.fed.rounds_per_task, 25u);
  EXPECT_EQ(c.sim.fed.num_clients, 10u);
  EXPECT_EQ(c.sim.fed.memory_per_class, 20u);
  EXPECT_EQ(c.sim.fed.batch_size, 128u);
  EXPECT_EQ(c.sim.fed.local_lr, 0.005);
  EXPECT_EQ(c.sim.fed.participation_fraction, 1.0);
}

TEST(Config, CanonicalRoundTrip) {
  for (const char* name : {"configs/default.json", "configs/benchmark.json", "configs/minimal.json"}) {
    const auto text = slurp(source(name));
    const auto once = serialize_config(parse_config(text));
    EXPECT_EQ(once, text) << name;
    EXPECT_EQ(serialize_config(parse_config(once)), once) << name;
  }
  const auto partial = parse_config(R"({"fed": {"num_clients": 3}, "tam_gm": {"kappa": 0.1}})");
  EXPECT_EQ(partial.sim.fed.num_clients, 3u);
  EXPECT_EQ(partial.sim.tam_gm.kappa, 0.1);
  EXPECT_EQ(partial.sim.sam_gm.kappa, 0.5);
  EXPECT_EQ(serialize_config(parse_config(serialize_config(partial))), serialize_config(partial));
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, StrictParsingNamesTheField) {
  EXPECT_NE(config_error(R"({"fed": {"num_clinets": 3}})").find("'fed.num_clinets'"), std::string::npos);
  EXPECT_NE(config_error(R"({"extra": 1})").find("'extra'"), std::string::npos);
  EXPECT_NE(config_error(R"({"fed": {"local_lr": "fast"}})").find("'fed.local_lr'"), std::string::npos);
  EXPECT_NE(config_error(R"({"mixstyle": {"mode": "wild"}})").find("fixed, beta"), std::string::npos);
  EXPECT_NE(config_error(R"({"fed": 3})").find("'fed'"), std::string::npos);
  EXPECT_NE(config_error(R"({"seeds": []})").find("seeds"), std::string::npos);
  EXPECT_NE(config_error(R"({"tam_gm": {"kappa": -1}})").find("kappa"), std::string::npos);
  EXPECT_NE(config_error("{not json").find("invalid JSON"), std::string::npos);
}

TEST(Config, DigestTracksResultAffectingFieldsOnly) {
  const auto c = minimal();
  auto d = c;
  d.output_dir = "elsewhere";
  d.sim.fed.jobs = 7;
  d.seeds = {9, 10};
  EXPECT_EQ(config_digest(c), config_digest(d));
  d.sim.tam_gm.kappa = 0.75;
  EXPECT_NE(config_digest(c), config_digest(d));
}

TEST(Config, WithParam) {
  const auto c = minimal();
  const auto k = with_param(c, "kappa", 0.1);
  EXPECT_EQ(k.sim.tam_gm.kappa, 0.1);
  EXPECT_EQ(k.sim.sam_gm.kappa, 0.1);
  EXPECT_EQ(with_param(c, "sam_gm.kappa", 0.2).sim.tam_gm.kappa, c.sim.tam_gm.kappa);
  EXPECT_EQ(with_param(c, "fed.local_lr", parse_param_value("0.01")).sim.fed.local_lr, 0.01);
  EXPECT_EQ(with_param(c, "seed", 4).seeds, std::vector<std::uint64_t>{4});
  EXPECT_EQ(with_param(c, "task_pool.mode", parse_param_value("shared")).task_pool.mode, TaskMode::shared);
  try {
    with_param(c, "kapa", 0.1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("fed.local_lr"), std::string::npos);
  }
  EXPECT_THROW(with_param(c, "fed.nope", 1), ConfigError);
}

TEST(Runner, MinimalRunIsFastCompleteAndDeterministic) {
  const auto out = fresh_dir("minimal");
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_config(minimal(), out / "a");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 10.0);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].status, "ok");
  const auto seed_dir = out / "a" / "minimal" / "run" / "seed_0";
  for (const char* f : {"metrics.csv", "cosines.csv", "summary.json", "checkpoint_task_0.json", "checkpoint_task_1.json",
                        "memory_task_0.jsonl", "memory_task_1.jsonl"}) {
    EXPECT_TRUE(fs::exists(seed_dir / f)) << f;
  }
  for (const char* f : {"config.json", "summary.csv", "aggregate.csv"}) EXPECT_TRUE(fs::exists(out / "a" / "minimal" / f)) << f;
  EXPECT_TRUE(std::isfinite(rows[0].final_mean_accuracy));
  EXPECT_TRUE(std::isfinite(rows[0].averaged_forgetting));

  auto parallel = minimal();
  parallel.sim.fed.jobs = 2;
  run_config(parallel, out / "b");
  EXPECT_EQ(slurp(seed_dir / "metrics.csv"), slurp(out / "b" / "minimal" / "run" / "seed_0" / "metrics.csv"));
  EXPECT_EQ(slurp(seed_dir / "cosines.csv"), slurp(out / "b" / "minimal" / "run" / "seed_0" / "cosines.csv"));
}

TEST(Runner, GapMatchesPerRoundRecords) {
  const auto out = fresh_dir("gap");
  run_config(minimal(), out);
  std::ifstream in(out / "minimal" / "run" / "seed_0" / "metrics.csv");
  const auto records = read_metrics_csv(in);
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> locals;
  std::map<std::pair<std::size_t, std::size_t>, double> global, gap;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.task, r.round);
    if (r.metric == "local_accuracy") locals[key].push_back(r.value);
    if (r.metric == "current_task_accuracy") global[key] = r.value;
    if (r.metric == "generalization_gap") gap[key] = r.value;
  }
  ASSERT_FALSE(gap.empty());
  for (const auto& [key, g] : gap) {
    double m = 0.0;
    for (double v : locals[key]) m += v / double(locals[key].size());
    EXPECT_NEAR(g, m - global.at(key), 1e-12);
  }
}

TEST(Runner, SweepKappaGivesOneRowPerValue) {
  const auto out = fresh_dir("sweep");
  const auto rows = sweep(minimal(), "kappa", {"0.1", "0.5", "0.75"}, out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].label, "kappa=0.1");
  EXPECT_EQ(rows[2].label, "kappa=0.75");
  for (const auto& r : rows) EXPECT_EQ(r.status, "ok");
  EXPECT_NE(rows[0].config_digest, rows[1].config_digest);
  std::ifstream agg(out / "minimal" / "sweep_kappa" / "aggregate.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(agg, line)) ++lines;
  EXPECT_EQ(lines, 4u);
}

TEST(Runner, SingleValueSweepEqualsPlainRun) {
  const auto out = fresh_dir("sweep_one");
  run_config(minimal(), out);
  sweep(minimal(), "inner_lr", {"25"}, out);
  EXPECT_EQ(slurp(out / "minimal" / "run" / "seed_0" / "metrics.csv"),
            slurp(out / "minimal" / "sweep_inner_lr" / "inner_lr=25" / "seed_0" / "metrics.csv"));
}

TEST(Runner, AggregateReportsPerSeedSpread) {
  std::vector<RunSummary> rows(3);
  const double acc[3] = {0.5, 0.6, 0.7};
  for (int i = 0; i < 3; ++i) {
    rows[i].label = "cell";
    rows[i].seed = std::uint64_t(i);
    rows[i].final_mean_accuracy = acc[i];
    rows[i].averaged_forgetting = 0.1;
  }
  rows.push_back(rows[0]);
  rows.back().status = "failed";
  const auto agg = aggregate(rows);
  ASSERT_EQ(agg.size(), 1u);
  EXPECT_EQ(agg[0].runs, 4u);
  EXPECT_EQ(agg[0].failed, 1u);
  EXPECT_NEAR(agg[0].acc_mean, 0.6, 1e-15);
  EXPECT_NEAR(agg[0].acc_std, 0.1, 1e-15);
  EXPECT_NEAR(agg[0].af_std, 0.0, 1e-15);
}

TEST(Runner, AblationHasSevenCellsAndFedAvgMatchesStandalone) {
  const auto out = fresh_dir("ablate");
  const auto rows = ablate(minimal(), out);
  ASSERT_EQ(rows.size(), 7u);
  const std::vector<std::string> labels{"fedavg", "sam", "tam", "sam+tam", "sam+pcs", "tam+pcs", "stamp"};
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(rows[i].label, labels[i]);

  auto fedavg = minimal();
  fedavg.sim.fed.sam = fedavg.sim.fed.tam = fedavg.sim.fed.pcs = false;
  run_config(fedavg, out / "standalone");
  EXPECT_EQ(slurp(out / "minimal" / "ablate" / "fedavg" / "seed_0" / "metrics.csv"),
            slurp(out / "standalone" / "minimal" / "run" / "seed_0" / "metrics.csv"));
}

TEST(Runner, ResumeReproducesArtifactsAndRefusesOtherConfigs) {
  const auto out = fresh_dir("resume");
  auto cfg = minimal();
  cfg.sim.fed.num_tasks = 3;
  run_config(cfg, out);
  const auto dir = out / "minimal" / "run" / "seed_0";
  const auto metrics = slurp(dir / "metrics.csv");
  const auto cosines = slurp(dir / "cosines.csv");

  const auto row = run_seed(cfg, 0, dir, "run", dir / "checkpoint_task_0.json");
  EXPECT_EQ(row.status, "ok");
  EXPECT_EQ(slurp(dir / "metrics.csv"), metrics);
  EXPECT_EQ(slurp(dir / "cosines.csv"), cosines);

  auto other = cfg;
  other.sim.tam_gm.kappa = 0.1;
  try {
    run_seed(other, 0, dir, "run", dir / "checkpoint_task_0.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("refusing to resume"), std::string::npos);
  }
  EXPECT_THROW(run_seed(cfg, 1, dir, "run", dir / "checkpoint_task_0.json"), ConfigError);
}

TEST(Runner, ReportReproducesSummaries) {
  const auto out = fresh_dir("report");
  auto cfg = minimal();
  cfg.seeds = {0, 1};
  run_config(cfg, out);
  const auto root = out / "minimal";
  const auto before = slurp(root / "summary.csv");
  const auto agg_before = slurp(root / "aggregate.csv");
  fs::remove(root / "summary.csv");
  const auto rows = report(root);
  EXPECT_EQ(rows.size(), 2u);
  EXPECT_EQ(slurp(root / "summary.csv"), before);
  EXPECT_EQ(slurp(root / "aggregate.csv"), agg_before);
}

TEST(Runner, NumericFailureLeavesPartialArtifactsAndFailureRecord) {
  const auto out = fresh_dir("failure");
  auto cfg = minimal();
  cfg.sim.fed.local_lr = 1e300;
  const auto rows = run_config(cfg, out);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].status, "failed");
  EXPECT_FALSE(rows[0].error.empty());
  const auto dir = out / "minimal" / "run" / "seed_0";
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  const auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(j.at("status"), "failed");
}

int cli(const std::string& args) {
  const std::string cmd = std::string(STAMP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

TEST(Binary, ExitCodes) {
  const auto out = fresh_dir("binary");
  const auto cfg = source("configs/minimal.json").string();
  EXPECT_EQ(cli("run --config " + cfg + " --out " + (out / "ok").string()), 0);
  EXPECT_EQ(cli("report --out " + (out / "ok" / "minimal").string()), 0);
  EXPECT_EQ(cli("run --config " + (out / "missing.json").string()), 1);
  std::ofstream(out / "bad.json") << R"({"fed": {"bogus": true}})";
  EXPECT_EQ(cli("run --config " + (out / "bad.json").string()), 1);
  EXPECT_EQ(cli("sweep --config " + cfg + " --param nope --values 1 --out " + out.string()), 1);
  EXPECT_EQ(cli("run"), 1);
  std::ofstream(out / "diverge.json") << R"({"run_id": "d", "fed": {"num_clients": 2, "num_tasks": 2, "rounds_per_task": 1, "local_lr": 1e300}})";
  EXPECT_EQ(cli("run --config " + (out / "diverge.json").string() + " --out " + out.string()), 2);
  EXPECT_EQ(cli("sweep --config " + cfg + " --param kappa --values 0.1,0.5 --seed 3 --jobs 2 --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "minimal" / "sweep_kappa" / "kappa=0.5" / "seed_3" / "metrics.csv"));
}

}  // namespace
}  // namespace stamp
