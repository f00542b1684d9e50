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

// stamp: command-line front end.
//
//   stamp run    --config FILE [--seed S...] [--out DIR] [--jobs N] [--resume CHECKPOINT]
//   stamp sweep  --config FILE --param NAME --values V1,V2,... [--seed S...] [--out DIR] [--jobs N]
//   stamp ablate --config FILE [--seed S...] [--out DIR] [--jobs N]
//   stamp report --out DIR
//
// Exit status: 0 success, 1 configuration error, 2 runtime failure.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stamp/runner.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct Options {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t jobs = 0;
  std::string param;
  std::vector<std::string> values;
  std::string resume;
};

stamp::ExperimentConfig load(const Options& o) {
  auto cfg = stamp::load_config(o.config);
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.jobs > 0) cfg.sim.fed.jobs = o.jobs;
  cfg.validate();
  return cfg;
}

std::optional<std::filesystem::path> out_dir(const Options& o) {
  if (o.out.empty()) return std::nullopt;
  return std::filesystem::path(o.out);
}

int status_of(const std::vector<stamp::RunSummary>& rows) {
  for (const auto& r : rows) {
    if (r.status != "ok") {
      std::cerr << "run failed: " << r.label << " seed " << r.seed << ": " << r.error << '\n';
      return kRuntimeError;
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated continual learning simulator with spatio-temporal gradient matching"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required();
    sub->add_option("--seed", o.seeds, "seed(s) to run instead of the config's list")->delimiter(',');
    sub->add_option("--out", o.out, "output root (default: the config's output_dir)");
    sub->add_option("--jobs", o.jobs, "parallel client workers");
  };

  auto* run = app.add_subcommand("run", "run every seed of a config");
  add_common(run);
  run->add_option("--resume", o.resume, "continue a single-seed run from a task-boundary checkpoint");

  auto* sw = app.add_subcommand("sweep", "run the config once per value of one parameter");
  add_common(sw);
  sw->add_option("--param", o.param, "parameter name, e.g. kappa or fed.local_lr")->required();
  sw->add_option("--values", o.values, "comma-separated values")->delimiter(',')->required();

  auto* ab = app.add_subcommand("ablate", "run the seven component subsets");
  add_common(ab);

  auto* rep = app.add_subcommand("report", "re-summarize existing artifacts");
  rep->add_option("--out", o.out, "directory holding run artifacts")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (run->parsed()) {
      const auto cfg = load(o);
      if (!o.resume.empty()) {
        if (cfg.seeds.size() != 1) throw stamp::ConfigError("--resume needs exactly one seed");
        const auto seed = cfg.seeds.front();
        const auto root = stamp::run_root(cfg, out_dir(o));
        const auto row = stamp::run_seed(cfg, seed, root / "run" / stamp::seed_dir(seed), "run",
                                         std::filesystem::path(o.resume));
        stamp::report(root, &std::cout);
        return status_of({row});
      }
      return status_of(stamp::run_config(cfg, out_dir(o), &std::cout));
    }
    if (sw->parsed()) return status_of(stamp::sweep(load(o), o.param, o.values, out_dir(o), &std::cout));
    if (ab->parsed()) return status_of(stamp::ablate(load(o), out_dir(o), &std::cout));
    if (rep->parsed()) return status_of(stamp::report(o.out, &std::cout));
  } catch (const stamp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
