/**
 * \file config.hpp
 * \brief Minimal TOML-subset run configuration: [section] headers and
 *        key = value lines (numbers, quoted strings, booleans), with typed
 *        adapters into the module parameter structs.
 */
#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <string>

#include "refpose/losses.hpp"
#include "refpose/matching.hpp"
#include "refpose/metrics.hpp"
#include "refpose/types.hpp"

namespace refpose::io {

/// \brief Flat key-value store; keys are "section.name" (or bare "name"
///        before any section header).
class RunConfig {
 public:
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  double number(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size())
        throw FormatError("config: '" + key + "' is not a number: " + it->second);
      return v;
    } catch (const std::exception&) {
      throw FormatError("config: '" + key + "' is not a number: " + it->second);
    }
  }

  int integer(const std::string& key, int fallback) const {
    const double v = number(key, static_cast<double>(fallback));
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
      throw FormatError("config: '" + key + "' is not an integer");
    return i;
  }

  std::string str(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  bool flag(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw FormatError("config: '" + key + "' is not a boolean: " + it->second);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& all() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

/// Removes a trailing comment that starts outside any quoted string.
inline std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

}  // namespace detail

/// \brief Parses the TOML subset; malformed lines raise FormatError with the
///        line number.
inline RunConfig parse_config(std::istream& is, const std::string& origin) {
  RunConfig cfg;
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string body = detail::trim(detail::strip_comment(line));
    if (body.empty()) continue;
    const auto err = [&](const char* what) {
      return FormatError("config: " + std::string(what) + " at " + origin + ":" +
                         std::to_string(line_no));
    };
    if (body.front() == '[') {
      if (body.back() != ']') throw err("unterminated section header");
      section = detail::trim(body.substr(1, body.size() - 2));
      if (section.empty()) throw err("empty section name");
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw err("expected key = value");
    const std::string key = detail::trim(body.substr(0, eq));
    std::string value = detail::trim(body.substr(eq + 1));
    if (key.empty()) throw err("empty key");
    if (value.empty()) throw err("empty value");
    if (value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') throw err("unterminated string");
      value = value.substr(1, value.size() - 2);
    }
    cfg.set(section.empty() ? key : section + "." + key, value);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("config: cannot open " + path);
  return parse_config(is, path);
}

// ---------------------------------------------------------------------------
// Typed adapters. Every knob falls back to the module default.
// ---------------------------------------------------------------------------

inline losses::LossWeights loss_weights_from(const RunConfig& cfg) {
  losses::LossWeights w;
  w.alpha = cfg.number("losses.alpha", w.alpha);
  w.eta = cfg.number("losses.eta", w.eta);
  w.sigma = cfg.number("losses.sigma", w.sigma);
  w.lambda = cfg.number("losses.lambda", w.lambda);
  w.w_scale = cfg.number("losses.scale_weight", w.w_scale);
  w.w_edge = cfg.number("losses.edge_weight", w.w_edge);
  w.w_norm = cfg.number("losses.norm_weight", w.w_norm);
  w.w_reg = cfg.number("losses.reg_weight", w.w_reg);
  w.levels = cfg.integer("losses.levels", w.levels);
  return w;
}

inline matching::MatchConfig match_config_from(const RunConfig& cfg) {
  matching::MatchConfig m;
  m.tau = cfg.number("matcher.tau", m.tau);
  m.theta_c = cfg.number("matcher.theta_c", m.theta_c);
  m.window = cfg.integer("matcher.window", m.window);
  m.tau_fine = cfg.number("matcher.tau_fine", m.tau_fine);
  m.validate();
  return m;
}

/// \brief Robust registration knobs.
struct SolverParams {
  double threshold = 0.01;
  int max_iters = 2048;
};

inline SolverParams solver_params_from(const RunConfig& cfg) {
  SolverParams p;
  p.threshold = cfg.number("solver.threshold", p.threshold);
  p.max_iters = cfg.integer("solver.max_iters", p.max_iters);
  if (!(p.threshold > 0.0) || p.max_iters < 1)
    throw InvalidInputError("config: solver threshold/max_iters out of range");
  return p;
}

/// \brief Pose-metric knobs shared by eval-pose.
struct MetricParams {
  double vsd_delta = 0.015;
  metrics::VsdVariant vsd_variant = metrics::VsdVariant::mean_absolute;
  double vsd_step_tolerance = 0.02;
};

inline MetricParams metric_params_from(const RunConfig& cfg) {
  MetricParams p;
  p.vsd_delta = cfg.number("metrics.vsd_delta", p.vsd_delta);
  p.vsd_step_tolerance = cfg.number("metrics.vsd_step_tolerance", p.vsd_step_tolerance);
  const std::string variant = cfg.str("metrics.vsd_variant", "mean_absolute");
  if (variant == "mean_absolute") {
    p.vsd_variant = metrics::VsdVariant::mean_absolute;
  } else if (variant == "step_cost") {
    p.vsd_variant = metrics::VsdVariant::step_cost;
  } else {
    throw FormatError("config: unknown metrics.vsd_variant '" + variant + "'");
  }
  return p;
}

/// \brief Metric working range for depth loaders.
struct DepthRange {
  double depth_min = kDepthMin;
  double depth_max = kDepthMax;
};

inline DepthRange depth_range_from(const RunConfig& cfg) {
  DepthRange r;
  r.depth_min = cfg.number("data.depth_min", r.depth_min);
  r.depth_max = cfg.number("data.depth_max", r.depth_max);
  if (!(r.depth_min > 0.0) || !(r.depth_max > r.depth_min))
    throw InvalidInputError("config: bad data.depth_min/depth_max range");
  return r;
}

}  // namespace refpose::io
