// Copyright (C) 2026 The hpfl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Scenario configuration files (JSON via nlohmann) and flat `key=value`
// overrides. Every hyperparameter of the spec has a named key:
//
//   seed
//   population.{n_clients, n_clusters, input_dim, n_classes, model_types[], probe}
//   pretrain.{steps, lr, samples, prototype_scale, noise, task_seed}
//   tasks.{tasks_per_client, prototype_scale, sample_noise, cluster_shift,
//          label_conflict, task_rotation, task_perturbation,
//          train_per_task, test_per_task,
//          public_samples, unseen_train, unseen_test, mode}
//   federation.{rounds, local_steps, eval_every, rank, n_blocks, tau, alpha,
//               mask_ratio, noise_mu, probe_every, batch_size, lr_pq,
//               lr_other, momentum, fast_steps, fast_eval_every}
//   alignment.{lambda, lr, epochs, batch_size, ridge_relative}
//
// population.n_clients and population.model_types are required; everything
// else defaults to the values in ScenarioConfig. Unknown keys are errors.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hpfl/bench.hpp"
#include "json.hpp"

namespace hpfl {

using Json = nlohmann::ordered_json;

/// Configuration problem; `what()` names the field (and line when known).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Json to_json(const ModelTypeConfig& m) {
  return Json{{"id", m.id}, {"width", m.width}, {"depth", m.depth}};
}

/// Canonical, fully populated form (also the input of the config hash).
inline Json to_json(const ScenarioConfig& c) {
  Json types = Json::array();
  for (const auto& m : c.model_types) types.push_back(to_json(m));
  return Json{
      {"seed", c.seed},
      {"population",
       {{"n_clients", c.n_clients},
        {"n_clusters", c.n_clusters},
        {"input_dim", c.input_dim},
        {"n_classes", c.n_classes},
        {"model_types", types},
        {"probe", to_json(c.probe)}}},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"lr", c.pretrain.lr},
        {"samples", c.pretrain.samples},
        {"prototype_scale", c.pretrain.prototype_scale},
        {"noise", c.pretrain.noise},
        {"task_seed", c.pretrain.task_seed}}},
      {"tasks",
       {{"tasks_per_client", c.tasks_per_client},
        {"prototype_scale", c.prototype_scale},
        {"sample_noise", c.sample_noise},
        {"cluster_shift", c.cluster_shift},
        {"label_conflict", c.label_conflict},
        {"task_rotation", c.task_rotation},
        {"task_perturbation", c.task_perturbation},
        {"train_per_task", c.train_per_task},
        {"test_per_task", c.test_per_task},
        {"public_samples", c.public_samples},
        {"unseen_train", c.unseen_train},
        {"unseen_test", c.unseen_test},
        {"mode", to_string(c.mode)}}},
      {"federation",
       {{"rounds", c.rounds},
        {"local_steps", c.local_steps},
        {"eval_every", c.eval_every},
        {"rank", c.rank},
        {"n_blocks", c.n_blocks},
        {"tau", c.tau},
        {"alpha", c.alpha},
        {"mask_ratio", c.mask_ratio},
        {"noise_mu", c.noise_mu},
        {"probe_every", c.probe_every},
        {"batch_size", c.batch_size},
        {"lr_pq", c.lr_pq},
        {"lr_other", c.lr_other},
        {"momentum", c.momentum},
        {"fast_steps", c.fast_steps},
        {"fast_eval_every", c.fast_eval_every}}},
      {"alignment",
       {{"lambda", c.align.lambda},
        {"lr", c.align.lr},
        {"epochs", c.align.epochs},
        {"batch_size", c.align.batch_size},
        {"ridge_relative", c.align.ridge_relative}}},
  };
}

namespace detail {

// Reads typed fields out of one JSON object, remembering which keys were
// consumed so leftovers can be reported as unknown.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  template <class T>
  void get(const char* key, T& out, bool required = false) {
    seen_.emplace_back(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) {
      if (required) throw ConfigError("missing required field '" + where(key) + "'");
      return;
    }
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_unsigned()) throw ConfigError("expected a non-negative integer");
        out = it->template get<T>();
      } else if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("expected a number");
        out = it->template get<double>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("expected a string");
        out = it->template get<std::string>();
      } else {
        static_assert(sizeof(T) == 0, "unsupported field type");
      }
    } catch (const ConfigError& e) {
      throw ConfigError("field '" + where(key) + "': " + e.what());
    }
  }

  const Json* child(const char* key, bool required = false) {
    seen_.emplace_back(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) {
      if (required) throw ConfigError("missing required field '" + where(key) + "'");
      return nullptr;
    }
    return &*it;
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  void reject_unknown() const {
    for (const auto& [k, v] : obj_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ConfigError("unknown field '" + where(k) + "'");
      }
    }
  }

 private:
  const Json& obj_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline ModelTypeConfig model_type_from_json(const Json& j, const std::string& path) {
  ModelTypeConfig m;
  FieldReader r(j, path);
  r.get("id", m.id, true);
  r.get("width", m.width, true);
  r.get("depth", m.depth, true);
  r.reject_unknown();
  return m;
}

/// 1-based line of the first occurrence of `"key"` in `text` (0 if absent).
inline std::size_t locate_key(std::string_view text, std::string_view key) {
  const std::string needle = "\"" + std::string(key) + "\"";
  const auto pos = text.find(needle);
  if (pos == std::string_view::npos) return 0;
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + pos, '\n'));
}

}  // namespace detail

/// Builds a config from JSON; does not run ScenarioConfig::validate().
inline ScenarioConfig config_from_json(const Json& j) {
  ScenarioConfig c;
  detail::FieldReader top(j, "");
  top.get("seed", c.seed);
  if (const Json* p = top.child("population", true)) {
    detail::FieldReader r(*p, "population");
    r.get("n_clients", c.n_clients, true);
    r.get("n_clusters", c.n_clusters);
    r.get("input_dim", c.input_dim);
    r.get("n_classes", c.n_classes);
    const Json* types = r.child("model_types", true);
    if (!types->is_array()) throw ConfigError("field 'population.model_types': expected an array");
    c.model_types.clear();
    for (std::size_t t = 0; t < types->size(); ++t) {
      c.model_types.push_back(detail::model_type_from_json(
          (*types)[t], "population.model_types." + std::to_string(t)));
    }
    if (const Json* pr = r.child("probe")) c.probe = detail::model_type_from_json(*pr, "population.probe");
    r.reject_unknown();
  }
  if (const Json* p = top.child("pretrain")) {
    detail::FieldReader r(*p, "pretrain");
    r.get("steps", c.pretrain.steps);
    r.get("lr", c.pretrain.lr);
    r.get("samples", c.pretrain.samples);
    r.get("prototype_scale", c.pretrain.prototype_scale);
    r.get("noise", c.pretrain.noise);
    r.get("task_seed", c.pretrain.task_seed);
    r.reject_unknown();
  }
  if (const Json* p = top.child("tasks")) {
    detail::FieldReader r(*p, "tasks");
    r.get("tasks_per_client", c.tasks_per_client);
    r.get("prototype_scale", c.prototype_scale);
    r.get("sample_noise", c.sample_noise);
    r.get("cluster_shift", c.cluster_shift);
    r.get("label_conflict", c.label_conflict);
    r.get("task_rotation", c.task_rotation);
    r.get("task_perturbation", c.task_perturbation);
    r.get("train_per_task", c.train_per_task);
    r.get("test_per_task", c.test_per_task);
    r.get("public_samples", c.public_samples);
    r.get("unseen_train", c.unseen_train);
    r.get("unseen_test", c.unseen_test);
    std::string mode = to_string(c.mode);
    r.get("mode", mode);
    try {
      c.mode = stream_mode_from_string(mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("field 'tasks.mode': ") + e.what());
    }
    r.reject_unknown();
  }
  if (const Json* p = top.child("federation")) {
    detail::FieldReader r(*p, "federation");
    r.get("rounds", c.rounds);
    r.get("local_steps", c.local_steps);
    r.get("eval_every", c.eval_every);
    r.get("rank", c.rank);
    r.get("n_blocks", c.n_blocks);
    r.get("tau", c.tau);
    r.get("alpha", c.alpha);
    r.get("mask_ratio", c.mask_ratio);
    r.get("noise_mu", c.noise_mu);
    r.get("probe_every", c.probe_every);
    r.get("batch_size", c.batch_size);
    r.get("lr_pq", c.lr_pq);
    r.get("lr_other", c.lr_other);
    r.get("momentum", c.momentum);
    r.get("fast_steps", c.fast_steps);
    r.get("fast_eval_every", c.fast_eval_every);
    r.reject_unknown();
  }
  if (const Json* p = top.child("alignment")) {
    detail::FieldReader r(*p, "alignment");
    r.get("lambda", c.align.lambda);
    r.get("lr", c.align.lr);
    r.get("epochs", c.align.epochs);
    r.get("batch_size", c.align.batch_size);
    r.get("ridge_relative", c.align.ridge_relative);
    r.reject_unknown();
  }
  top.reject_unknown();
  return c;
}

/// Parses and validates config text. Syntax errors carry nlohmann's line and
/// column; field errors name the dotted key and, when found, its line.
inline ScenarioConfig parse_config(std::string_view text, const std::string& source = "config") {
  Json j;
  try {
    j = Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  try {
    ScenarioConfig c = config_from_json(j);
    c.validate();
    return c;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    // Anchor to the line of the innermost key mentioned in the message.
    const auto q1 = msg.find('\'');
    const auto q2 = q1 == std::string::npos ? q1 : msg.find('\'', q1 + 1);
    std::string key = q1 == std::string::npos ? "" : msg.substr(q1 + 1, q2 - q1 - 1);
    if (key.empty()) key = msg.substr(0, msg.find(':'));
    // A missing key has no line of its own; fall back to its enclosing section.
    std::size_t line = 0;
    for (std::string k = key; !k.empty() && line == 0;) {
      const auto dot = k.find_last_of('.');
      line = detail::locate_key(text, k.substr(dot == std::string::npos ? 0 : dot + 1));
      k = dot == std::string::npos ? "" : k.substr(0, dot);
    }
    throw ConfigError(source + (line ? ":" + std::to_string(line) : "") + ": " + msg);
  }
}

inline ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

/// Applies a flat `dotted.key=value` override. Keys must already exist in
/// the canonical form (known keys only); array elements are addressed by
/// index, e.g. `population.model_types.1.width=24`. Values are parsed as
/// JSON, falling back to a bare string.
inline ScenarioConfig apply_override(const ScenarioConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "': expected key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  std::string pointer;
  std::stringstream parts(key);
  for (std::string part; std::getline(parts, part, '.');) pointer += "/" + part;
  Json j = to_json(cfg);
  const Json::json_pointer ptr(pointer);
  if (!j.contains(ptr) || j.at(ptr).is_structured()) {
    throw ConfigError("override '" + key + "': unknown key");
  }
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::parse_error&) {
    value = raw;
  }
  j[ptr] = value;
  try {
    ScenarioConfig out = config_from_json(j);
    out.validate();
    return out;
  } catch (const std::exception& e) {
    throw ConfigError("override '" + assignment + "': " + e.what());
  }
}

/// Keys whose value shapes the generated datasets.
inline bool affects_data(const std::string& key) {
  return key.starts_with("population.") || key.starts_with("tasks.");
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return s;
}

/// FNV-1a of the canonical JSON dump, as 16 hex digits.
inline std::string config_hash(const ScenarioConfig& cfg) {
  return hex64(fnv1a(to_json(cfg).dump()));
}

}  // namespace hpfl
