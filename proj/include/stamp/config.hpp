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

// Experiment configuration: strict JSON parsing (unknown keys rejected with
// their dotted path), canonical serialization and a content digest.

#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stamp/errors.hpp"
#include "stamp/fedsim.hpp"

namespace stamp {

enum class TaskMode { ltp, shared };

struct TaskPoolConfig {
  std::size_t classes_per_task = 2;
  TaskMode mode = TaskMode::ltp;
  bool disjoint = false;
  std::optional<double> dirichlet_alpha;
};

struct ExperimentConfig {
  std::string run_id = "default";
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  SyntheticDatasetConfig dataset;
  TaskPoolConfig task_pool;
  std::vector<std::size_t> hidden{64, 32};
  SimConfig sim;

  ModelShape model_shape() const { return {dataset.input_dim, hidden, dataset.num_classes}; }

  void validate() const {
    if (run_id.empty()) throw ConfigError("run_id must be nonempty");
    if (run_id.find_first_of("/\\,\n") != std::string::npos) throw ConfigError("run_id must not contain '/', '\\\\' or ','");
    if (seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (hidden.empty()) throw ConfigError("model.hidden must list at least one layer");
    dataset.validate();
    model_shape().validate();
    if (task_pool.classes_per_task < 1) throw ConfigError("task_pool.classes_per_task must be >= 1");
    if (task_pool.dirichlet_alpha && !(*task_pool.dirichlet_alpha > 0.0)) {
      throw ConfigError("task_pool.dirichlet_alpha must be > 0");
    }
    sim.validate();
  }
};

namespace detail {

// Reads the keys of one JSON object, remembering which were consumed so the
// leftovers can be reported.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + display() + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: '" + field(key) + "' has the wrong type");
    }
  }

  template <typename Fn>
  void sub(const char* key, Fn&& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    StrictObject child(*it, field(key));
    fn(child);
    child.finish();
  }

  template <typename E>
  void get_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_string()) throw ConfigError("config: '" + field(key) + "' must be a string");
    const auto s = it->template get<std::string>();
    std::string valid;
    for (const auto& [n, v] : names) {
      if (s == n) {
        out = v;
        return;
      }
      valid += valid.empty() ? n : std::string(", ") + n;
    }
    throw ConfigError("config: '" + field(key) + "' must be one of " + valid + " (got '" + s + "')");
  }

  bool has(const char* key) const { return j_.contains(key); }
  const nlohmann::json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + field(it.key().c_str()) + "'");
    }
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_gm(StrictObject& o, GMConfig& g) {
  o.get("kappa", g.kappa);
  o.get("inner_lr", g.inner_lr);
  o.get("momentum", g.momentum);
  o.get("inner_rounds", g.inner_rounds);
  o.get("scheduler_step", g.scheduler_step);
  o.get("scheduler_gamma", g.scheduler_gamma);
  o.get("normalize_inputs", g.normalize_inputs);
  o.get("degenerate_eps", g.degenerate_eps);
}

inline nlohmann::json write_gm(const GMConfig& g) {
  return {{"kappa", g.kappa},
          {"inner_lr", g.inner_lr},
          {"momentum", g.momentum},
          {"inner_rounds", g.inner_rounds},
          {"scheduler_step", g.scheduler_step},
          {"scheduler_gamma", g.scheduler_gamma},
          {"normalize_inputs", g.normalize_inputs},
          {"degenerate_eps", g.degenerate_eps}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::StrictObject root(j, "");
  root.get("run_id", c.run_id);
  root.get("seeds", c.seeds);
  root.get("output_dir", c.output_dir);
  root.sub("dataset", [&](detail::StrictObject& o) {
    o.get("num_classes", c.dataset.num_classes);
    o.get("input_dim", c.dataset.input_dim);
    o.get("samples_per_class", c.dataset.samples_per_class);
    o.get("class_center_scale", c.dataset.class_center_scale);
    o.get("within_class_std", c.dataset.within_class_std);
  });
  root.sub("task_pool", [&](detail::StrictObject& o) {
    o.get("classes_per_task", c.task_pool.classes_per_task);
    o.get_enum("mode", c.task_pool.mode, {{"ltp", TaskMode::ltp}, {"shared", TaskMode::shared}});
    o.get("disjoint", c.task_pool.disjoint);
    if (o.has("dirichlet_alpha")) {
      const auto& a = o.raw("dirichlet_alpha");
      if (a.is_null()) {
        c.task_pool.dirichlet_alpha.reset();
      } else if (a.is_number()) {
        c.task_pool.dirichlet_alpha = a.get<double>();
      } else {
        throw ConfigError("config: 'task_pool.dirichlet_alpha' must be a number or null");
      }
    }
  });
  root.sub("model", [&](detail::StrictObject& o) { o.get("hidden", c.hidden); });
  root.sub("fed", [&](detail::StrictObject& o) {
    auto& f = c.sim.fed;
    o.get("num_clients", f.num_clients);
    o.get("participation_fraction", f.participation_fraction);
    o.get("local_epochs", f.local_epochs);
    o.get("rounds_per_task", f.rounds_per_task);
    o.get("num_tasks", f.num_tasks);
    o.get("local_lr", f.local_lr);
    o.get("global_lr", f.global_lr);
    o.get("batch_size", f.batch_size);
    o.get("sam", f.sam);
    o.get("tam", f.tam);
    o.get("pcs", f.pcs);
    o.get("tam_sum", f.tam_sum);
    o.get("memory_per_class", f.memory_per_class);
    o.get("proto_loss_weight", f.proto_loss_weight);
    o.get_enum("task_gradient_mode", f.task_gradient_mode,
               {{"coreset", TaskGradientMode::coreset}, {"prototype", TaskGradientMode::prototype}});
    o.get("cache_previous_gradients", f.cache_previous_gradients);
    o.get("jobs", f.jobs);
  });
  root.sub("tam_gm", [&](detail::StrictObject& o) { detail::read_gm(o, c.sim.tam_gm); });
  root.sub("sam_gm", [&](detail::StrictObject& o) { detail::read_gm(o, c.sim.sam_gm); });
  root.sub("mixstyle", [&](detail::StrictObject& o) {
    auto& m = c.sim.ingest.mixstyle;
    o.get_enum("mode", m.mode, {{"fixed", MixStyleConfig::Mode::fixed}, {"beta", MixStyleConfig::Mode::beta}});
    o.get("lambda", m.lambda);
    o.get("alpha", m.alpha);
  });
  root.sub("coreset", [&](detail::StrictObject& o) {
    auto& s = c.sim.ingest.solver;
    o.get("normal_equation_limit", s.normal_equation_limit);
    o.get("max_iterations", s.max_iterations);
    o.get("tolerance", s.tolerance);
    o.get_enum("selection", s.selection,
               {{"greedy", CoresetSelection::greedy}, {"top_abs", CoresetSelection::top_abs}});
  });
  root.finish();
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  const auto& f = c.sim.fed;
  const auto& m = c.sim.ingest.mixstyle;
  const auto& s = c.sim.ingest.solver;
  nlohmann::json j;
  j["run_id"] = c.run_id;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["dataset"] = {{"num_classes", c.dataset.num_classes},
                  {"input_dim", c.dataset.input_dim},
                  {"samples_per_class", c.dataset.samples_per_class},
                  {"class_center_scale", c.dataset.class_center_scale},
                  {"within_class_std", c.dataset.within_class_std}};
  j["task_pool"] = {{"classes_per_task", c.task_pool.classes_per_task},
                    {"mode", c.task_pool.mode == TaskMode::ltp ? "ltp" : "shared"},
                    {"disjoint", c.task_pool.disjoint},
                    {"dirichlet_alpha", c.task_pool.dirichlet_alpha ? nlohmann::json(*c.task_pool.dirichlet_alpha)
                                                                    : nlohmann::json(nullptr)}};
  j["model"] = {{"hidden", c.hidden}};
  j["fed"] = {{"num_clients", f.num_clients},
              {"participation_fraction", f.participation_fraction},
              {"local_epochs", f.local_epochs},
              {"rounds_per_task", f.rounds_per_task},
              {"num_tasks", f.num_tasks},
              {"local_lr", f.local_lr},
              {"global_lr", f.global_lr},
              {"batch_size", f.batch_size},
              {"sam", f.sam},
              {"tam", f.tam},
              {"pcs", f.pcs},
              {"tam_sum", f.tam_sum},
              {"memory_per_class", f.memory_per_class},
              {"proto_loss_weight", f.proto_loss_weight},
              {"task_gradient_mode", f.task_gradient_mode == TaskGradientMode::coreset ? "coreset" : "prototype"},
              {"cache_previous_gradients", f.cache_previous_gradients},
              {"jobs", f.jobs}};
  j["tam_gm"] = detail::write_gm(c.sim.tam_gm);
  j["sam_gm"] = detail::write_gm(c.sim.sam_gm);
  j["mixstyle"] = {{"mode", m.mode == MixStyleConfig::Mode::fixed ? "fixed" : "beta"},
                   {"lambda", m.lambda},
                   {"alpha", m.alpha}};
  j["coreset"] = {{"normal_equation_limit", s.normal_equation_limit},
                  {"max_iterations", s.max_iterations},
                  {"tolerance", s.tolerance},
                  {"selection", s.selection == CoresetSelection::greedy ? "greedy" : "top_abs"}};
  return j;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Canonical form: every field present, keys sorted, fixed indentation.
inline std::string serialize_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

// FNV-1a over the canonical form of everything that influences results
// (output_dir, seeds and worker count excluded).
inline std::string config_digest(const ExperimentConfig& c) {
  auto j = config_to_json(c);
  j.erase("output_dir");
  j.erase("seeds");
  j["fed"].erase("jobs");
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

// Every settable dotted path, plus the shortcuts that set both matching
// instances ("kappa" sets tam_gm.kappa and sam_gm.kappa) and "seed".
inline std::vector<std::string> settable_params(const ExperimentConfig& c) {
  std::vector<std::string> out;
  const auto j = config_to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it->is_object()) {
      for (auto jt = it->begin(); jt != it->end(); ++jt) out.push_back(it.key() + "." + jt.key());
    } else {
      out.push_back(it.key());
    }
  }
  const auto gm = detail::write_gm(GMConfig{});
  for (auto it = gm.begin(); it != gm.end(); ++it) out.push_back(it.key());
  out.push_back("seed");
  return out;
}

// Value text is read as JSON when it parses ("0.5", "true", "[1,2]") and as
// a plain string otherwise.
inline nlohmann::json parse_param_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return text;
  }
}

inline ExperimentConfig with_param(const ExperimentConfig& c, const std::string& name, const nlohmann::json& value) {
  auto j = config_to_json(c);
  auto valid = [&] {
    std::string s;
    for (const auto& p : settable_params(c)) s += (s.empty() ? "" : ", ") + p;
    return s;
  };
  if (name == "seed") {
    j["seeds"] = nlohmann::json::array({value});
  } else if (const auto dot = name.find('.'); dot != std::string::npos) {
    const auto head = name.substr(0, dot), tail = name.substr(dot + 1);
    if (!j.contains(head) || !j[head].is_object() || !j[head].contains(tail)) {
      throw ConfigError("unknown parameter '" + name + "'; valid: " + valid());
    }
    j[head][tail] = value;
  } else if (j.contains(name) && !j[name].is_object()) {
    j[name] = value;
  } else if (j["tam_gm"].contains(name)) {
    j["tam_gm"][name] = value;
    j["sam_gm"][name] = value;
  } else {
    throw ConfigError("unknown parameter '" + name + "'; valid: " + valid());
  }
  return config_from_json(j);
}

}  // namespace stamp
