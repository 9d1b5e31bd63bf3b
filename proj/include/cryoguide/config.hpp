#pragma once

#include "cryoguide/core.hpp"

#include <charconv>
#include <limits>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cryoguide {

/// Flat key=value configuration. '#' starts a comment; blank lines are ignored.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source = "config") {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = strip(line);
      if (t.empty()) continue;
      kv.set_assignment(t, source + ":" + std::to_string(lineno));
    }
    return kv;
  }

  static KeyValues read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    return parse(in, path);
  }

  /// Applies "key=value"; `where` names the origin for error messages.
  void set_assignment(const std::string& text, const std::string& where = "override") {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + text + "'");
    const std::string key = strip(text.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    values_[key] = strip(text.substr(eq + 1));
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::optional<std::string> get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

 private:
  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
  }
  std::map<std::string, std::string> values_;
};

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(key + ": not a number: '" + v + "'");
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": not a non-negative integer: '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": not a boolean: '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

}  // namespace detail

/// Everything a guided (or unguided) run needs. Paths are relative to the working directory.
struct RunConfig {
  // Inputs
  std::string map;
  std::optional<double> resolution;  // falls back to the map header
  std::string reference;
  std::string alt_reference;
  std::string template_path;          // defaults to the first prior mode
  std::vector<std::string> prior_modes;  // PDB files, one per mixture mode
  std::vector<double> prior_weights;     // defaults to uniform
  double prior_tau = 1.0;
  std::string condition = "prior";

  // Sampling
  std::string schedule = "synthetic";  // synthetic | experimental | custom
  std::vector<std::size_t> stages;     // custom stage lengths
  std::size_t n_steps = 200;
  std::size_t n_samples = 25;
  std::size_t n_replicates = 3;
  std::uint64_t seed = 0;
  double sigma_min = 0.004, sigma_max = 160.0, rho = 7.0, step_scale = 1.0;
  double gamma_0 = 0.8, gamma_min = 1.0, noise_scale = 1.0;

  // Guidance
  double lambda_global_start = 0.25, lambda_global_end = 0.05, lambda_local = 0.5;
  std::string calibration = "normalized";  // normalized | likelihood
  double sinkhorn_epsilon = 1.0, sinkhorn_reach = 10.0, sinkhorn_tol = 1e-6;
  std::size_t sinkhorn_iters = 500;
  double cloud_threshold = 0.0;
  std::size_t cloud_dust = 0;
  std::size_t cloud_k = 0;  // 0: cluster_count(n_atoms, voxel size)
  bool cloud_weighted = false;
  double blur_sigma = 0.0;
  bool dock = true;
  bool dock_per_sample = false;  // dock a fresh unguided sample for every trajectory
  std::size_t dock_rotations = 576;

  std::string output = "out";

  static RunConfig from(const KeyValues& kv) {
    using namespace detail;
    RunConfig c;
    for (const auto& [k, v] : kv.values()) {
      if (k == "map") c.map = v;
      else if (k == "resolution") c.resolution = to_double(k, v);
      else if (k == "reference") c.reference = v;
      else if (k == "alt_reference") c.alt_reference = v;
      else if (k == "template") c.template_path = v;
      else if (k == "prior_modes") c.prior_modes = split_list(v);
      else if (k == "prior_weights") {
        c.prior_weights.clear();
        for (const auto& w : split_list(v)) c.prior_weights.push_back(to_double(k, w));
      } else if (k == "prior_tau") c.prior_tau = to_double(k, v);
      else if (k == "condition") c.condition = v;
      else if (k == "schedule") c.schedule = v;
      else if (k == "stages") {
        c.stages.clear();
        for (const auto& s : split_list(v)) c.stages.push_back(to_uint(k, s));
      } else if (k == "n_steps") c.n_steps = to_uint(k, v);
      else if (k == "n_samples") c.n_samples = to_uint(k, v);
      else if (k == "n_replicates") c.n_replicates = to_uint(k, v);
      else if (k == "seed") c.seed = to_uint(k, v);
      else if (k == "sigma_min") c.sigma_min = to_double(k, v);
      else if (k == "sigma_max") c.sigma_max = to_double(k, v);
      else if (k == "rho") c.rho = to_double(k, v);
      else if (k == "step_scale") c.step_scale = to_double(k, v);
      else if (k == "gamma_0") c.gamma_0 = to_double(k, v);
      else if (k == "gamma_min") c.gamma_min = to_double(k, v);
      else if (k == "noise_scale") c.noise_scale = to_double(k, v);
      else if (k == "lambda_global_start") c.lambda_global_start = to_double(k, v);
      else if (k == "lambda_global_end") c.lambda_global_end = to_double(k, v);
      else if (k == "lambda_local") c.lambda_local = to_double(k, v);
      else if (k == "calibration") c.calibration = v;
      else if (k == "sinkhorn_epsilon") c.sinkhorn_epsilon = to_double(k, v);
      else if (k == "sinkhorn_reach") c.sinkhorn_reach = to_double(k, v);
      else if (k == "sinkhorn_tol") c.sinkhorn_tol = to_double(k, v);
      else if (k == "sinkhorn_iters") c.sinkhorn_iters = to_uint(k, v);
      else if (k == "cloud_threshold") c.cloud_threshold = to_double(k, v);
      else if (k == "cloud_dust") c.cloud_dust = to_uint(k, v);
      else if (k == "cloud_k") c.cloud_k = to_uint(k, v);
      else if (k == "cloud_weighted") c.cloud_weighted = to_bool(k, v);
      else if (k == "blur_sigma") c.blur_sigma = to_double(k, v);
      else if (k == "dock") c.dock = to_bool(k, v);
      else if (k == "dock_per_sample") c.dock_per_sample = to_bool(k, v);
      else if (k == "dock_rotations") c.dock_rotations = to_uint(k, v);
      else if (k == "output") c.output = v;
      else throw ConfigError("unknown config key '" + k + "'");
    }
    c.validate();
    return c;
  }

  void validate() const {
    if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
    if (n_replicates < 1) throw ConfigError("n_replicates must be >= 1");
    if (prior_modes.empty()) throw ConfigError("prior_modes: at least one mode PDB is required");
    if (!prior_weights.empty() && prior_weights.size() != prior_modes.size())
      throw ConfigError("prior_weights must list one weight per prior mode");
    if (!(prior_tau > 0.0)) throw ConfigError("prior_tau must be > 0");
    if (resolution && !(*resolution > 0.0)) throw ConfigError("resolution must be > 0");
    if (schedule != "synthetic" && schedule != "experimental" && schedule != "custom")
      throw ConfigError("schedule must be synthetic, experimental or custom");
    if (schedule == "custom" && stages.size() != 4) throw ConfigError("custom schedule needs stages=a,b,c,d");
    if (calibration != "normalized" && calibration != "likelihood")
      throw ConfigError("calibration must be normalized or likelihood");
  }
};

}  // namespace cryoguide
