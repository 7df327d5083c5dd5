#pragma once
// Run configuration with a strict JSON schema: every key is known, every leaf
// type-checked, and any miss reported by its dotted path.

#include "resdis/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

#include <array>
#include <string>
#include <vector>

namespace resdis {

using json = nlohmann::json;

struct GridConfig {
  double min = 1e-2;
  double max = 1e6;
  std::int64_t count = 10;
};

struct RunConfig {
  struct Paths {
    std::string train_store, target_store, alignment, probe_store, pairs, neural, electrodes, words;
    std::string output_dir = "out";
  } paths;
  std::uint64_t seed = 0;
  std::int64_t threads = 1;  ///< 0 = hardware concurrency

  struct Probing {
    double epsilon = 0.01;
    std::int64_t folds = 5;
    double reg = 1.0;
    double bow_threshold = 0.6;
  } probing;

  struct Residual {
    GridConfig grid;
    std::int64_t folds = 4;
  } residual;

  struct Encoding {
    GridConfig grid;
    std::int64_t folds = 5;
    std::int64_t boot_b = 5;
    std::int64_t chunk_l = 32;
    double window_s = 2.0;
    double rate_hz = 32.0;
    double val_fraction = 0.2;
    std::int64_t ci_resamples = 50;
  } encoding;

  struct Stats {
    std::int64_t shuffles = 500;
    double z_threshold = 3.95;
    bool freeze_alpha = true;
  } stats;

  struct Report {
    double top_fraction = 0.10;
    double fdr_q = 0.05;
    std::string region_map;
    std::vector<std::string> test_groups = {"visual-cortex"};
  } report;

  struct Validation {
    std::int64_t audit_columns = 512;
  } validation;

  struct Synth {
    std::int64_t n_layers = 33;
    std::int64_t n_tokens = 5000;
    std::int64_t dim = 256;
    std::int64_t subspace = 0;
    std::vector<std::int64_t> injection = {0, 6, 20, 30};
    double mixing = 0.05;
    double noise = 0.005;
    std::int64_t probe_pairs = 200;
    std::int64_t syntax_tasks = 3;
    std::int64_t electrodes = 64;
    std::int64_t events = 2000;
    double fs = 128.0;
    double neural_noise = 1.0;
  } synth;
};

namespace detail {

/// Calls f(path, field) for every leaf of the config.
template <class Cfg, class F>
void visit_config(Cfg& c, F&& f) {
  f("paths.train_store", c.paths.train_store);
  f("paths.target_store", c.paths.target_store);
  f("paths.alignment", c.paths.alignment);
  f("paths.probe_store", c.paths.probe_store);
  f("paths.pairs", c.paths.pairs);
  f("paths.neural", c.paths.neural);
  f("paths.electrodes", c.paths.electrodes);
  f("paths.words", c.paths.words);
  f("paths.output_dir", c.paths.output_dir);
  f("seed", c.seed);
  f("threads", c.threads);
  f("probing.epsilon", c.probing.epsilon);
  f("probing.folds", c.probing.folds);
  f("probing.reg", c.probing.reg);
  f("probing.bow_threshold", c.probing.bow_threshold);
  f("residual.grid.min", c.residual.grid.min);
  f("residual.grid.max", c.residual.grid.max);
  f("residual.grid.count", c.residual.grid.count);
  f("residual.folds", c.residual.folds);
  f("encoding.grid.min", c.encoding.grid.min);
  f("encoding.grid.max", c.encoding.grid.max);
  f("encoding.grid.count", c.encoding.grid.count);
  f("encoding.folds", c.encoding.folds);
  f("encoding.boot_b", c.encoding.boot_b);
  f("encoding.chunk_l", c.encoding.chunk_l);
  f("encoding.window_s", c.encoding.window_s);
  f("encoding.rate_hz", c.encoding.rate_hz);
  f("encoding.val_fraction", c.encoding.val_fraction);
  f("encoding.ci_resamples", c.encoding.ci_resamples);
  f("stats.shuffles", c.stats.shuffles);
  f("stats.z_threshold", c.stats.z_threshold);
  f("stats.freeze_alpha", c.stats.freeze_alpha);
  f("report.top_fraction", c.report.top_fraction);
  f("report.fdr_q", c.report.fdr_q);
  f("report.region_map", c.report.region_map);
  f("report.test_groups", c.report.test_groups);
  f("validation.audit_columns", c.validation.audit_columns);
  f("synth.n_layers", c.synth.n_layers);
  f("synth.n_tokens", c.synth.n_tokens);
  f("synth.dim", c.synth.dim);
  f("synth.subspace", c.synth.subspace);
  f("synth.injection", c.synth.injection);
  f("synth.mixing", c.synth.mixing);
  f("synth.noise", c.synth.noise);
  f("synth.probe_pairs", c.synth.probe_pairs);
  f("synth.syntax_tasks", c.synth.syntax_tasks);
  f("synth.electrodes", c.synth.electrodes);
  f("synth.events", c.synth.events);
  f("synth.fs", c.synth.fs);
  f("synth.neural_noise", c.synth.neural_noise);
}

inline json::json_pointer to_pointer(const std::string& dotted) {
  std::string p;
  std::size_t start = 0;
  for (;;) {
    auto dot = dotted.find('.', start);
    p += "/" + dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return json::json_pointer(p);
}

template <class T>
void read_leaf(const json& j, const std::string& path, T& out) {
  auto bad = [&](const char* want) { return ConfigError(path + ": expected " + want + ", got " + j.dump()); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw bad("boolean");
    out = j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw bad("string");
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!j.is_number()) throw bad("number");
    out = j.get<double>();
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
      throw bad("non-negative integer");
    out = j.get<std::uint64_t>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw bad("integer");
    out = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
    if (!j.is_array()) throw bad("array of strings");
    out.clear();
    for (const auto& e : j) {
      if (!e.is_string()) throw bad("array of strings");
      out.push_back(e.get<std::string>());
    }
  } else if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
    if (!j.is_array()) throw bad("array of integers");
    out.clear();
    for (const auto& e : j) {
      if (!e.is_number_integer()) throw bad("array of integers");
      out.push_back(e.get<std::int64_t>());
    }
  }
}

inline void collect_leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  if (j.is_object() && !j.empty()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      collect_leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.push_back(prefix);
  }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j = json::object();
  detail::visit_config(c, [&](const std::string& path, const auto& v) { j[detail::to_pointer(path)] = v; });
  return j;
}

inline void validate_config(const RunConfig& c) {
  auto need = [](bool ok, const char* path, const char* what) {
    if (!ok) throw ConfigError(std::string(path) + ": " + what);
  };
  need(c.threads >= 0, "threads", "must be >= 0");
  need(c.probing.epsilon > 0, "probing.epsilon", "must be positive");
  need(c.probing.folds >= 2, "probing.folds", "must be >= 2");
  need(c.probing.reg > 0, "probing.reg", "must be positive");
  need(c.probing.bow_threshold >= 0 && c.probing.bow_threshold <= 1, "probing.bow_threshold", "must lie in [0, 1]");
  for (const auto* g : {&c.residual.grid, &c.encoding.grid}) {
    const char* which = g == &c.residual.grid ? "residual.grid" : "encoding.grid";
    if (!(g->min > 0 && g->max > g->min && g->count >= 2))
      throw ConfigError(std::string(which) + ": needs 0 < min < max and count >= 2");
  }
  need(c.residual.folds >= 2, "residual.folds", "must be >= 2");
  need(c.encoding.folds >= 2, "encoding.folds", "must be >= 2");
  need(c.encoding.boot_b >= 1, "encoding.boot_b", "must be >= 1");
  need(c.encoding.chunk_l >= 1, "encoding.chunk_l", "must be >= 1");
  need(c.encoding.window_s > 0, "encoding.window_s", "must be positive");
  need(c.encoding.rate_hz > 0, "encoding.rate_hz", "must be positive");
  need(c.encoding.val_fraction > 0 && c.encoding.val_fraction < 1, "encoding.val_fraction", "must lie in (0, 1)");
  need(c.encoding.ci_resamples >= 0, "encoding.ci_resamples", "must be >= 0");
  need(c.stats.shuffles >= 2, "stats.shuffles", "must be >= 2");
  need(c.report.top_fraction > 0 && c.report.top_fraction <= 1, "report.top_fraction", "must lie in (0, 1]");
  need(c.report.fdr_q > 0 && c.report.fdr_q < 1, "report.fdr_q", "must lie in (0, 1)");
  need(c.validation.audit_columns >= 1, "validation.audit_columns", "must be >= 1");
  need(c.synth.injection.size() == 4, "synth.injection", "needs 4 layers (lexicon, syntax, meaning, reasoning)");
  need(c.synth.electrodes >= 1 && c.synth.events >= 2, "synth.events", "needs >= 1 electrode and >= 2 events");
  need(c.synth.syntax_tasks >= 1, "synth.syntax_tasks", "must be >= 1");
  need(!c.paths.output_dir.empty(), "paths.output_dir", "must not be empty");
}

/// Defaults overlaid with `j`. Unknown keys and wrong types raise ConfigError.
inline RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("<root>: config must be a JSON object");
  RunConfig c;
  std::vector<std::string> leaves;
  detail::collect_leaves(j, "", leaves);
  std::vector<std::string> known;
  detail::visit_config(c, [&](const std::string& path, auto&) { known.push_back(path); });
  for (const auto& leaf : leaves) {
    if (leaf.empty()) continue;
    if (std::find(known.begin(), known.end(), leaf) == known.end()) {
      bool is_section = false;
      for (const auto& k : known) is_section = is_section || k.rfind(leaf + ".", 0) == 0;
      if (is_section && j.at(detail::to_pointer(leaf)).is_object()) continue;  // empty section
      throw ConfigError(leaf + (is_section ? ": expected an object" : ": unknown key"));
    }
  }
  detail::visit_config(c, [&](const std::string& path, auto& field) {
    auto ptr = detail::to_pointer(path);
    if (j.contains(ptr)) detail::read_leaf(j.at(ptr), path, field);
  });
  validate_config(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Leaves whose value differs from the defaults, keyed by dotted path.
inline json config_overrides(const RunConfig& c) {
  const json now = to_json(c).flatten(), base = to_json(RunConfig{}).flatten();
  json out = json::object();
  for (auto it = now.begin(); it != now.end(); ++it) {
    auto b = base.find(it.key());
    if (b == base.end() || *b != it.value()) {
      std::string key = it.key().substr(1);
      std::replace(key.begin(), key.end(), '/', '.');
      out[key] = it.value();
    }
  }
  return out;
}

}  // namespace resdis
