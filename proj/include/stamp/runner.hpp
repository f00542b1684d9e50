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

// Experiment runner: writes per-seed artifacts, resumes from task-boundary
// checkpoints, and drives sweeps, ablations and reports.
//
// Layout under <out>/<run_id>/:
//   config.json                      canonical config
//   <cell>/seed_<s>/metrics.csv      one row per metric record
//   <cell>/seed_<s>/cosines.csv      task,round,scope,pair,value
//   <cell>/seed_<s>/checkpoint_task_<t>.json + memory_task_<t>.jsonl
//   <cell>/seed_<s>/summary.json
//   summary.csv, aggregate.csv       one row per (cell, seed) / per cell
// A plain run uses the cell "run".

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stamp/config.hpp"
#include "stamp/fedsim.hpp"
#include "stamp/metrics.hpp"

namespace stamp {

namespace fs = std::filesystem;

struct RunSummary {
  std::string label;
  std::string algorithm;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string status = "ok";
  std::string error;
  double final_mean_accuracy = std::numeric_limits<double>::quiet_NaN();
  double averaged_forgetting = std::numeric_limits<double>::quiet_NaN();
  double mean_temporal_cosine = std::numeric_limits<double>::quiet_NaN();
  double mean_spatial_cosine = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr const char* kCosineHeader = "task,round,scope,pair,value";
inline constexpr const char* kSummaryHeader =
    "label,algorithm,seed,status,final_mean_accuracy_pct,averaged_forgetting_pct,mean_temporal_cosine,"
    "mean_spatial_cosine,config_digest,error";
inline constexpr const char* kAggregateHeader =
    "label,algorithm,runs,failed,accuracy_mean_pct,accuracy_std_pct,forgetting_mean_pct,forgetting_std_pct,"
    "temporal_cosine_mean,temporal_cosine_std,spatial_cosine_mean,spatial_cosine_std";

inline const char* scope_name(CosineScope s) { return s == CosineScope::temporal ? "temporal" : "spatial"; }

inline void write_cosine_row(std::ostream& os, const CosineRecord& c) {
  os << c.task << ',' << c.round << ',' << scope_name(c.scope) << ',' << c.pair << ',' << format_value(c.value) << '\n';
}

inline std::vector<CosineRecord> read_cosines_csv(std::istream& is) {
  std::vector<CosineRecord> out;
  std::string line;
  if (!std::getline(is, line) || line != kCosineHeader) throw ConfigError("cosines file: bad header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw ConfigError("cosines file: expected 5 columns in '" + line + "'");
    const auto scope = f[2] == "temporal" ? CosineScope::temporal : CosineScope::spatial;
    out.push_back({std::stoul(f[0]), std::stoul(f[1]), scope, f[3], std::stod(f[4])});
  }
  return out;
}

namespace detail {

inline std::string csv_safe(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  }
  return s;
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / double(v.size());
}

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

inline std::string pct(double v) { return std::isfinite(v) ? format_value(100.0 * v) : ""; }
inline std::string num(double v) { return std::isfinite(v) ? format_value(v) : ""; }

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

// Summary numbers derived from the emitted artifacts alone, so a run and a
// later report agree.
inline void summarize_records(const std::vector<MetricRecord>& records, const std::vector<CosineRecord>& cosines,
                              RunSummary& s) {
  std::map<std::size_t, std::map<std::size_t, double>> rows;
  const std::string prefix = "task_accuracy_";
  for (const auto& r : records) {
    if (r.client != "global" || r.metric.rfind(prefix, 0) != 0) continue;
    rows[r.task][std::stoul(r.metric.substr(prefix.size()))] = r.value;
    s.algorithm = r.algorithm;
  }
  if (!rows.empty() && rows.rbegin()->first + 1 == rows.size()) {
    std::vector<std::vector<double>> m;
    bool complete = true;
    for (const auto& [t, row] : rows) {
      std::vector<double> r;
      for (std::size_t i = 0; i <= t; ++i) {
        auto it = row.find(i);
        if (it == row.end()) {
          complete = false;
          break;
        }
        r.push_back(it->second);
      }
      m.push_back(std::move(r));
    }
    if (complete) {
      const auto acc = AccuracyMatrix::from_rows(m);
      s.final_mean_accuracy = acc.mean_row(acc.num_tasks() - 1);
      if (acc.num_tasks() >= 2) s.averaged_forgetting = averaged_forgetting(acc);
    }
  }
  std::vector<double> temporal, spatial;
  for (const auto& c : cosines) (c.scope == CosineScope::temporal ? temporal : spatial).push_back(c.value);
  s.mean_temporal_cosine = detail::mean_of(temporal);
  s.mean_spatial_cosine = detail::mean_of(spatial);
}

inline nlohmann::json summary_to_json(const RunSummary& s) {
  return {{"label", s.label},
          {"algorithm", s.algorithm},
          {"seed", s.seed},
          {"config_digest", s.config_digest},
          {"status", s.status},
          {"error", s.error},
          {"final_mean_accuracy", detail::finite_or_null(s.final_mean_accuracy)},
          {"averaged_forgetting", detail::finite_or_null(s.averaged_forgetting)},
          {"mean_temporal_cosine", detail::finite_or_null(s.mean_temporal_cosine)},
          {"mean_spatial_cosine", detail::finite_or_null(s.mean_spatial_cosine)}};
}

inline void write_summary_csv(std::ostream& os, const std::vector<RunSummary>& rows) {
  os << kSummaryHeader << '\n';
  for (const auto& s : rows) {
    os << s.label << ',' << s.algorithm << ',' << s.seed << ',' << s.status << ',' << detail::pct(s.final_mean_accuracy)
       << ',' << detail::pct(s.averaged_forgetting) << ',' << detail::num(s.mean_temporal_cosine) << ','
       << detail::num(s.mean_spatial_cosine) << ',' << s.config_digest << ',' << detail::csv_safe(s.error) << '\n';
  }
}

struct CellAggregate {
  std::string label;
  std::string algorithm;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double acc_mean = 0, acc_std = 0, af_mean = 0, af_std = 0, tcos_mean = 0, tcos_std = 0, scos_mean = 0, scos_std = 0;
};

// Mean and sample standard deviation over seeds, per label, in first-seen
// label order. Failed runs are counted but not averaged.
inline std::vector<CellAggregate> aggregate(const std::vector<RunSummary>& rows) {
  std::vector<CellAggregate> out;
  std::map<std::string, std::array<std::vector<double>, 4>> values;
  for (const auto& s : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& a) { return a.label == s.label; });
    if (it == out.end()) {
      out.push_back({s.label, s.algorithm});
      it = out.end() - 1;
    }
    ++it->runs;
    if (s.status != "ok") {
      ++it->failed;
      continue;
    }
    auto& v = values[s.label];
    const double xs[4] = {s.final_mean_accuracy, s.averaged_forgetting, s.mean_temporal_cosine, s.mean_spatial_cosine};
    for (int k = 0; k < 4; ++k) {
      if (std::isfinite(xs[k])) v[k].push_back(xs[k]);
    }
  }
  for (auto& a : out) {
    auto& v = values[a.label];
    a.acc_mean = detail::mean_of(v[0]);
    a.acc_std = detail::sample_std(v[0]);
    a.af_mean = detail::mean_of(v[1]);
    a.af_std = detail::sample_std(v[1]);
    a.tcos_mean = detail::mean_of(v[2]);
    a.tcos_std = detail::sample_std(v[2]);
    a.scos_mean = detail::mean_of(v[3]);
    a.scos_std = detail::sample_std(v[3]);
  }
  return out;
}

inline void write_aggregate_csv(std::ostream& os, const std::vector<CellAggregate>& rows) {
  using detail::num;
  using detail::pct;
  os << kAggregateHeader << '\n';
  for (const auto& a : rows) {
    os << a.label << ',' << a.algorithm << ',' << a.runs << ',' << a.failed << ',' << pct(a.acc_mean) << ','
       << pct(a.acc_std) << ',' << pct(a.af_mean) << ',' << pct(a.af_std) << ',' << num(a.tcos_mean) << ','
       << num(a.tcos_std) << ',' << num(a.scos_mean) << ',' << num(a.scos_std) << '\n';
  }
}

inline void print_table(std::ostream& os, const std::vector<CellAggregate>& rows) {
  os << std::left << std::setw(18) << "cell" << std::setw(10) << "algorithm" << std::right << std::setw(6) << "runs"
     << std::setw(18) << "accuracy %" << std::setw(18) << "forgetting %" << std::setw(12) << "temporal" << std::setw(12)
     << "spatial" << '\n';
  auto pm = [](double m, double s, double scale) {
    if (!std::isfinite(m)) return std::string("-");
    std::ostringstream o;
    o << std::fixed << std::setprecision(scale > 1 ? 2 : 3) << m * scale << " +/- " << s * scale;
    return o.str();
  };
  for (const auto& a : rows) {
    os << std::left << std::setw(18) << a.label << std::setw(10) << a.algorithm << std::right << std::setw(6) << a.runs
       << std::setw(18) << pm(a.acc_mean, a.acc_std, 100) << std::setw(18) << pm(a.af_mean, a.af_std, 100)
       << std::setw(12) << pm(a.tcos_mean, 0, 1).substr(0, 6) << std::setw(12) << pm(a.scos_mean, 0, 1).substr(0, 6)
       << '\n';
  }
}

struct SeedData {
  Dataset dataset;
  FederationData federation;
};

inline SeedData build_seed_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto dc = cfg.dataset;
  dc.seed = seed;
  Dataset ds = generate_synthetic(dc);
  const auto& f = cfg.sim.fed;
  auto streams = cfg.task_pool.mode == TaskMode::ltp
                     ? build_task_streams(dc.num_classes, cfg.task_pool.classes_per_task, f.num_clients, f.num_tasks,
                                          seed, cfg.task_pool.disjoint)
                     : build_shared_task_stream(dc.num_classes, cfg.task_pool.classes_per_task, f.num_clients,
                                                f.num_tasks, seed);
  auto fd = build_federation_data(ds, cfg.model_shape(), std::move(streams), cfg.task_pool.dirichlet_alpha, seed);
  return {std::move(ds), std::move(fd)};
}

inline fs::path checkpoint_path(const fs::path& dir, std::size_t task) {
  return dir / ("checkpoint_task_" + std::to_string(task) + ".json");
}

inline void write_checkpoint(const fs::path& dir, const std::string& digest, std::uint64_t seed,
                             const TaskBoundaryState& st) {
  const std::string mem_name = "memory_task_" + std::to_string(st.completed_task) + ".jsonl";
  {
    std::ofstream mem(dir / mem_name);
    for (std::size_t u = 0; u < st.memories.size(); ++u) write_memory_snapshot(mem, u, st.memories[u]);
  }
  nlohmann::json protos = nlohmann::json::array();
  for (std::size_t u = 0; u < st.memories.size(); ++u) {
    for (const auto& [cls, store] : st.memories[u].classes()) {
      protos.push_back({{"client_id", u},
                        {"class_id", cls},
                        {"task_id", store.task_id},
                        {"seen_count", store.prototype.seen_count},
                        {"mean_embedding", store.prototype.mean_embedding}});
    }
  }
  nlohmann::json j{{"config_digest", digest},
                   {"seed", seed},
                   {"completed_task", st.completed_task},
                   {"global_params", st.global_params.values()},
                   {"accuracy_rows", st.accuracy_rows},
                   {"memory_snapshot", mem_name},
                   {"prototypes", protos}};
  std::ofstream(checkpoint_path(dir, st.completed_task)) << j.dump() << '\n';
}

// Loads a checkpoint written by write_checkpoint. Refuses checkpoints made
// under a different configuration or seed.
inline TaskBoundaryState read_checkpoint(const fs::path& path, const std::string& digest, std::uint64_t seed,
                                         std::size_t num_clients, std::size_t capacity) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint '" + path.string() + "': " + e.what());
  }
  if (j.at("config_digest").get<std::string>() != digest) {
    throw ConfigError("checkpoint '" + path.string() + "' was written with config digest " +
                      j.at("config_digest").get<std::string>() + ", current config is " + digest +
                      "; refusing to resume");
  }
  if (j.at("seed").get<std::uint64_t>() != seed) throw ConfigError("checkpoint seed does not match the run seed");
  TaskBoundaryState st;
  st.completed_task = j.at("completed_task").get<std::size_t>();
  const auto params = j.at("global_params").get<std::vector<double>>();
  st.global_params = ParamVector(params.size());
  std::copy(params.begin(), params.end(), st.global_params.span().begin());
  st.accuracy_rows = j.at("accuracy_rows").get<std::vector<std::vector<double>>>();
  const fs::path mem_path = path.parent_path() / j.at("memory_snapshot").get<std::string>();
  for (std::size_t u = 0; u < num_clients; ++u) {
    std::ifstream in(mem_path);
    if (!in) throw ConfigError("cannot read memory snapshot '" + mem_path.string() + "'");
    st.memories.push_back(read_memory_snapshot(in, u, capacity));
  }
  for (const auto& p : j.at("prototypes")) {
    const auto u = p.at("client_id").get<std::size_t>();
    if (u >= num_clients) throw ConfigError("checkpoint prototype for unknown client");
    const auto cls = p.at("class_id").get<std::size_t>();
    auto& store = st.memories[u].slot(cls);
    store.task_id = p.at("task_id").get<std::size_t>();
    store.prototype = {cls, p.at("mean_embedding").get<std::vector<double>>(), p.at("seen_count").get<std::size_t>()};
  }
  return st;
}

// Runs one seed into dir. Metrics and cosines are streamed so a failing run
// leaves partial artifacts; failures are reported in the summary rather
// than thrown (configuration errors still throw).
inline RunSummary run_seed(const ExperimentConfig& base, std::uint64_t seed, const fs::path& dir,
                           const std::string& label, const std::optional<fs::path>& resume_from = std::nullopt) {
  ExperimentConfig cfg = base;
  cfg.seeds = {seed};
  cfg.sim.fed.seed = seed;
  cfg.validate();
  fs::create_directories(dir);
  RunSummary summary;
  summary.label = label;
  summary.seed = seed;
  summary.algorithm = cfg.sim.fed.algorithm_name();
  summary.config_digest = config_digest(cfg);

  std::optional<TaskBoundaryState> resume;
  std::vector<MetricRecord> kept_metrics;
  std::vector<CosineRecord> kept_cosines;
  if (resume_from) {
    resume = read_checkpoint(*resume_from, summary.config_digest, seed, cfg.sim.fed.num_clients,
                             cfg.sim.fed.memory_per_class);
    std::istringstream m(detail::read_file(dir / "metrics.csv")), c(detail::read_file(dir / "cosines.csv"));
    for (auto& r : read_metrics_csv(m)) {
      if (r.task <= resume->completed_task && r.metric != "final_mean_accuracy" && r.metric != "averaged_forgetting") {
        kept_metrics.push_back(std::move(r));
      }
    }
    for (auto& r : read_cosines_csv(c)) {
      if (r.task <= resume->completed_task) kept_cosines.push_back(std::move(r));
    }
  }

  std::ofstream metrics(dir / "metrics.csv"), cosines(dir / "cosines.csv");
  if (!metrics || !cosines) throw ConfigError("cannot write artifacts under '" + dir.string() + "'");
  metrics << kMetricsHeader << '\n';
  cosines << kCosineHeader << '\n';
  std::vector<MetricRecord> all_metrics = kept_metrics;
  std::vector<CosineRecord> all_cosines = kept_cosines;
  for (const auto& r : kept_metrics) write_metrics_row(metrics, r);
  for (const auto& r : kept_cosines) write_cosine_row(cosines, r);

  RunHooks hooks;
  hooks.on_record = [&](const MetricRecord& r) {
    write_metrics_row(metrics, r);
    all_metrics.push_back(r);
  };
  hooks.on_cosine = [&](const CosineRecord& r) {
    write_cosine_row(cosines, r);
    all_cosines.push_back(r);
  };
  hooks.on_task_end = [&](const TaskBoundaryState& st, const std::vector<ClientState>&) {
    metrics.flush();
    cosines.flush();
    write_checkpoint(dir, summary.config_digest, seed, st);
  };

  try {
    const auto data = build_seed_data(cfg, seed);
    run_experiment(cfg.sim, data.federation, cfg.run_id, hooks, resume);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    summary.status = "failed";
    summary.error = e.what();
  }
  metrics.close();
  cosines.close();
  summarize_records(all_metrics, all_cosines, summary);
  if (summary.algorithm.empty()) summary.algorithm = cfg.sim.fed.algorithm_name();
  std::ofstream(dir / "summary.json") << summary_to_json(summary).dump(2) << '\n';
  return summary;
}

inline void write_collation(const fs::path& root, const std::vector<RunSummary>& rows, std::ostream* table) {
  fs::create_directories(root);
  std::ofstream(root / "summary.csv") << [&] {
    std::ostringstream os;
    write_summary_csv(os, rows);
    return os.str();
  }();
  const auto agg = aggregate(rows);
  std::ofstream(root / "aggregate.csv") << [&] {
    std::ostringstream os;
    write_aggregate_csv(os, agg);
    return os.str();
  }();
  if (table) print_table(*table, agg);
}

inline fs::path run_root(const ExperimentConfig& cfg, const std::optional<fs::path>& out) {
  return (out ? *out : fs::path(cfg.output_dir)) / cfg.run_id;
}

inline std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

inline std::vector<RunSummary> run_cells(const std::vector<std::pair<std::string, ExperimentConfig>>& cells,
                                         const fs::path& root, std::ostream* log) {
  std::vector<RunSummary> rows;
  for (const auto& [label, cfg] : cells) {
    for (std::uint64_t seed : cfg.seeds) {
      if (log) *log << "[" << label << "] seed " << seed << " ..." << std::flush;
      rows.push_back(run_seed(cfg, seed, root / label / seed_dir(seed), label));
      if (log) *log << " " << rows.back().status << '\n';
    }
  }
  return rows;
}

inline std::vector<RunSummary> run_config(const ExperimentConfig& cfg, const std::optional<fs::path>& out,
                                          std::ostream* log = nullptr) {
  const auto root = run_root(cfg, out);
  fs::create_directories(root);
  std::ofstream(root / "config.json") << serialize_config(cfg);
  auto rows = run_cells({{"run", cfg}}, root, log);
  write_collation(root, rows, log);
  return rows;
}

inline std::vector<RunSummary> sweep(const ExperimentConfig& cfg, const std::string& param,
                                     const std::vector<std::string>& values, const std::optional<fs::path>& out,
                                     std::ostream* log = nullptr) {
  if (values.empty()) throw ConfigError("sweep: no values given");
  std::vector<std::pair<std::string, ExperimentConfig>> cells;
  for (const auto& v : values) cells.emplace_back(param + "=" + v, with_param(cfg, param, parse_param_value(v)));
  const auto root = run_root(cfg, out) / ("sweep_" + param);
  fs::create_directories(root);
  std::ofstream(root / "config.json") << serialize_config(cfg);
  auto rows = run_cells(cells, root, log);
  write_collation(root, rows, log);
  return rows;
}

// The seven component subsets: FedAvg, SAM, TAM, SAM+TAM, SAM+PCS, TAM+PCS
// and full STAMP.
inline std::vector<std::pair<std::string, ExperimentConfig>> ablation_cells(const ExperimentConfig& cfg) {
  const bool grid[7][3] = {{false, false, false}, {true, false, false}, {false, true, false}, {true, true, false},
                           {true, false, true},   {false, true, true},  {true, true, true}};
  std::vector<std::pair<std::string, ExperimentConfig>> cells;
  for (const auto& g : grid) {
    ExperimentConfig c = cfg;
    c.sim.fed.sam = g[0];
    c.sim.fed.tam = g[1];
    c.sim.fed.pcs = g[2];
    cells.emplace_back(c.sim.fed.algorithm_name(), c);
  }
  return cells;
}

inline std::vector<RunSummary> ablate(const ExperimentConfig& cfg, const std::optional<fs::path>& out,
                                      std::ostream* log = nullptr) {
  const auto root = run_root(cfg, out) / "ablate";
  fs::create_directories(root);
  std::ofstream(root / "config.json") << serialize_config(cfg);
  auto rows = run_cells(ablation_cells(cfg), root, log);
  write_collation(root, rows, log);
  return rows;
}

// Rebuilds summaries from every <cell>/seed_<s>/ directory under root using
// only metrics.csv and cosines.csv (plus summary.json for status), then
// rewrites summary.csv and aggregate.csv there.
inline std::vector<RunSummary> report(const fs::path& root, std::ostream* log = nullptr) {
  if (!fs::is_directory(root)) throw ConfigError("report: '" + root.string() + "' is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "metrics.csv") dirs.push_back(e.path().parent_path());
  }
  if (dirs.empty()) throw ConfigError("report: no metrics.csv under '" + root.string() + "'");
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunSummary> rows;
  for (const auto& d : dirs) {
    RunSummary s;
    const auto seed_name = d.filename().string();
    s.label = d.parent_path() == root ? std::string("run") : fs::relative(d.parent_path(), root).string();
    if (seed_name.rfind("seed_", 0) == 0) s.seed = std::stoull(seed_name.substr(5));
    if (fs::exists(d / "summary.json")) {
      const auto j = nlohmann::json::parse(detail::read_file(d / "summary.json"));
      s.status = j.value("status", "ok");
      s.error = j.value("error", "");
      s.config_digest = j.value("config_digest", "");
      s.algorithm = j.value("algorithm", "");
      s.label = j.value("label", s.label);
    }
    std::istringstream m(detail::read_file(d / "metrics.csv"));
    std::vector<CosineRecord> cos;
    if (fs::exists(d / "cosines.csv")) {
      std::istringstream c(detail::read_file(d / "cosines.csv"));
      cos = read_cosines_csv(c);
    }
    summarize_records(read_metrics_csv(m), cos, s);
    rows.push_back(std::move(s));
  }
  write_collation(root, rows, log);
  return rows;
}

}  // namespace stamp
