#pragma once

// Experiment configuration: one JSON document with problem, solver, output
// and replicate blocks. Unknown keys are rejected so typos fail loudly.

#include "sparse_ekp/driver.hpp"
#include "sparse_ekp/problems.hpp"

#include "json.hpp"

#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace sparse_ekp {

using json = nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

class ConfigError : public Error {
public:
  using Error::Error;
};

enum class ProblemKind { Linear, Transport, Elliptic };

struct ProblemSpec {
  ProblemKind kind = ProblemKind::Linear;
  std::uint64_t seed = 0;
  // linear
  Index d = 300;
  Index k = 30;
  Index sparsity = 4;
  double noise_variance = 0.01;
  // transport / elliptic
  Index grid = 21;
  Index modes = 30;
  double sigma = 0.1;
  // elliptic
  Index nonzeros = 6;
  FaceAveraging averaging = FaceAveraging::Harmonic;
  // linear / elliptic truth magnitudes
  double magnitude_lo = 1.0;
  double magnitude_hi = 2.0;
};

struct SolverSpec {
  InnerVariant variant = InnerVariant::Iekf;
  Index ensemble_size = 100;
  int iterations = 20;
  double alpha = 0.5;
  StoppingRule stopping = StoppingRule::FixedIterations;
  double pinv_tol = kDefaultPinvTol;
  double r = 1.0;
  double beta = 1.5;
  json vartheta = 1.0;  // scalar or per-component array
  json theta0 = 1.0;    // scalar or per-component array
  int outer_iterations = 0;  // theta updates after the vanilla solve
  std::optional<double> rel_tol;
  double theta_floor = kDefaultThetaFloor;
};

struct OutputSpec {
  std::string directory = "results";
  bool write_json = true;
  bool write_csv = true;
  bool record_ensembles = false;
};

struct ExperimentConfig {
  std::string description;
  ProblemSpec problem;
  SolverSpec solver;
  OutputSpec output;
  std::vector<std::uint64_t> seeds{0};
};

inline std::string to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::Linear: return "linear";
    case ProblemKind::Transport: return "transport";
    case ProblemKind::Elliptic: return "elliptic";
  }
  return "?";
}

namespace detail {

inline void reject_unknown(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
}

template <typename T>
T get_or(const json& obj, const std::string& where, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "'");
  }
}

inline Index get_index(const json& obj, const std::string& where, const char* key, Index fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) throw ConfigError("'" + where + "." + key + "' must be an integer");
  return v.get<Index>();
}

inline void check_scalar_or_array(const json& v, const std::string& name) {
  if (v.is_number()) return;
  if (v.is_array() && !v.empty()) {
    for (const auto& e : v)
      if (!e.is_number()) throw ConfigError("'" + name + "' entries must be numbers");
    return;
  }
  throw ConfigError("'" + name + "' must be a number or a non-empty array of numbers");
}

/// Expands a scalar-or-array setting to a vector of length d.
inline Vector expand(const json& v, Index d, const std::string& name) {
  if (v.is_number()) return Vector::Constant(d, v.get<double>());
  if (static_cast<Index>(v.size()) != d)
    throw ConfigError("'" + name + "' has " + std::to_string(v.size()) + " entries, expected " +
                      std::to_string(d));
  Vector out(d);
  for (Index i = 0; i < d; ++i) out(i) = v.at(static_cast<std::size_t>(i)).get<double>();
  return out;
}

inline void parse_magnitudes(const json& obj, const std::string& where, ProblemSpec& p) {
  if (!obj.contains("magnitudes")) return;
  const json& m = obj.at("magnitudes");
  if (!m.is_array() || m.size() != 2 || !m[0].is_number() || !m[1].is_number())
    throw ConfigError("'" + where + ".magnitudes' must be [lo, hi]");
  p.magnitude_lo = m[0].get<double>();
  p.magnitude_hi = m[1].get<double>();
  if (!(p.magnitude_lo >= 0.0 && p.magnitude_lo <= p.magnitude_hi))
    throw ConfigError("'" + where + ".magnitudes' needs 0 <= lo <= hi");
}

}  // namespace detail

inline ProblemSpec parse_problem(const json& obj) {
  const std::string w = "problem";
  if (!obj.is_object()) throw ConfigError("problem must be a JSON object");
  const std::string kind = detail::get_or<std::string>(obj, w, "kind", "");
  ProblemSpec p;
  if (kind == "linear") {
    detail::reject_unknown(obj, w, {"kind", "seed", "d", "k", "sparsity", "noise_variance", "magnitudes"});
    p.kind = ProblemKind::Linear;
    p.d = detail::get_index(obj, w, "d", 300);
    p.k = detail::get_index(obj, w, "k", 30);
    p.sparsity = detail::get_index(obj, w, "sparsity", 4);
    p.noise_variance = detail::get_or(obj, w, "noise_variance", 0.01);
    p.magnitude_lo = 1.0;
    p.magnitude_hi = 2.0;
    if (p.d < 1 || p.k < 1) throw ConfigError("problem dimensions must be positive");
    if (p.sparsity < 0 || p.sparsity > p.d) throw ConfigError("sparsity must lie in [0, d]");
    if (!(p.noise_variance > 0.0)) throw ConfigError("noise_variance must be positive");
  } else if (kind == "transport") {
    detail::reject_unknown(obj, w, {"kind", "seed", "grid", "modes", "sigma"});
    p.kind = ProblemKind::Transport;
    p.grid = detail::get_index(obj, w, "grid", 21);
    p.modes = detail::get_index(obj, w, "modes", 30);
    p.sigma = detail::get_or(obj, w, "sigma", 0.1);
    if (p.grid < 2 || p.modes < 6) throw ConfigError("transport needs grid >= 2 and modes >= 6");
  } else if (kind == "elliptic") {
    detail::reject_unknown(obj, w, {"kind", "seed", "grid", "modes", "sigma", "nonzeros", "magnitudes",
                                    "averaging"});
    p.kind = ProblemKind::Elliptic;
    p.grid = detail::get_index(obj, w, "grid", 15);
    p.modes = detail::get_index(obj, w, "modes", 20);
    p.sigma = detail::get_or(obj, w, "sigma", 0.1);
    p.nonzeros = detail::get_index(obj, w, "nonzeros", 6);
    p.magnitude_lo = 0.5;
    p.magnitude_hi = 1.5;
    const std::string avg = detail::get_or<std::string>(obj, w, "averaging", "harmonic");
    if (avg == "harmonic") p.averaging = FaceAveraging::Harmonic;
    else if (avg == "arithmetic") p.averaging = FaceAveraging::Arithmetic;
    else throw ConfigError("problem.averaging must be 'harmonic' or 'arithmetic'");
    if (p.grid < 3 || p.modes < 1) throw ConfigError("elliptic needs grid >= 3 and modes >= 1");
    if (p.nonzeros < 0 || p.nonzeros > p.modes * p.modes)
      throw ConfigError("nonzeros must lie in [0, modes^2]");
  } else {
    throw ConfigError("problem.kind must be 'linear', 'transport' or 'elliptic'");
  }
  detail::parse_magnitudes(obj, w, p);
  if (obj.contains("seed")) {
    if (!obj.at("seed").is_number_unsigned()) throw ConfigError("problem.seed must be a non-negative integer");
    p.seed = obj.at("seed").get<std::uint64_t>();
  }
  if (p.kind != ProblemKind::Linear && !(p.sigma >= 0.0)) throw ConfigError("sigma must be non-negative");
  return p;
}

inline SolverSpec parse_solver(const json& obj) {
  const std::string w = "solver";
  detail::reject_unknown(obj, w, {"variant", "ensemble_size", "iterations", "alpha", "stopping", "pinv_tol", "r",
                                  "beta", "vartheta", "theta0", "outer_iterations", "rel_tol", "theta_floor"});
  SolverSpec s;
  const std::string variant = detail::get_or<std::string>(obj, w, "variant", "iekf");
  if (variant == "iekf") s.variant = InnerVariant::Iekf;
  else if (variant == "iekf-sl") s.variant = InnerVariant::IekfSl;
  else throw ConfigError("solver.variant must be 'iekf' or 'iekf-sl'");

  s.ensemble_size = detail::get_index(obj, w, "ensemble_size", 100);
  s.iterations = static_cast<int>(detail::get_index(obj, w, "iterations", 20));
  s.alpha = detail::get_or(obj, w, "alpha", 0.5);
  const std::string stop = detail::get_or<std::string>(obj, w, "stopping", "fixed");
  if (stop == "fixed") s.stopping = StoppingRule::FixedIterations;
  else if (stop == "morozov") s.stopping = StoppingRule::Morozov;
  else throw ConfigError("solver.stopping must be 'fixed' or 'morozov'");
  s.pinv_tol = detail::get_or(obj, w, "pinv_tol", kDefaultPinvTol);
  s.theta_floor = detail::get_or(obj, w, "theta_floor", kDefaultThetaFloor);
  s.outer_iterations = static_cast<int>(detail::get_index(obj, w, "outer_iterations", 0));
  if (obj.contains("rel_tol") && !obj.at("rel_tol").is_null())
    s.rel_tol = detail::get_or(obj, w, "rel_tol", 0.0);

  s.r = detail::get_or(obj, w, "r", 1.0);
  if (s.r == 0.0) throw ConfigError("solver.r must be nonzero");
  if (obj.contains("beta")) {
    s.beta = detail::get_or(obj, w, "beta", 0.0);
  } else if (s.r > 0.0) {
    s.beta = 1.5 / s.r;
  } else {
    throw ConfigError("solver.beta is required when r <= 0");
  }
  if (s.r > 0.0 && std::abs(s.r * s.beta - 1.5) > 1e-9)
    throw ConfigError("closed-form theta update needs r*beta = 3/2 (got " + std::to_string(s.r * s.beta) + ")");
  if (s.r < 0.0 && s.r != -1.0)
    throw ConfigError("negative r is supported only as r = -1 (inverse-gamma)");
  if (s.r == -1.0 && !(s.beta >= 0.0)) throw ConfigError("inverse-gamma path needs beta >= 0");

  s.vartheta = obj.contains("vartheta") ? obj.at("vartheta") : json(1.0);
  s.theta0 = obj.contains("theta0") ? obj.at("theta0") : json(1.0);
  detail::check_scalar_or_array(s.vartheta, "solver.vartheta");
  detail::check_scalar_or_array(s.theta0, "solver.theta0");

  if (s.ensemble_size < 2) throw ConfigError("solver.ensemble_size must be at least 2");
  if (s.iterations < 1) throw ConfigError("solver.iterations must be at least 1");
  if (!(s.alpha > 0.0)) throw ConfigError("solver.alpha must be positive");
  if (s.outer_iterations < 0) throw ConfigError("solver.outer_iterations must be non-negative");
  if (s.rel_tol && !(*s.rel_tol > 0.0)) throw ConfigError("solver.rel_tol must be positive");
  if (!(s.pinv_tol > 0.0)) throw ConfigError("solver.pinv_tol must be positive");
  if (!(s.theta_floor > 0.0)) throw ConfigError("solver.theta_floor must be positive");
  if (s.alpha > 1.0) std::cerr << "warning: step size alpha = " << s.alpha << " lies outside (0, 1]\n";
  return s;
}

inline OutputSpec parse_output(const json& obj) {
  const std::string w = "output";
  detail::reject_unknown(obj, w, {"directory", "formats", "record_ensembles"});
  OutputSpec o;
  o.directory = detail::get_or<std::string>(obj, w, "directory", "results");
  o.record_ensembles = detail::get_or(obj, w, "record_ensembles", false);
  if (obj.contains("formats")) {
    const json& f = obj.at("formats");
    if (!f.is_array()) throw ConfigError("output.formats must be an array");
    o.write_json = o.write_csv = false;
    for (const auto& e : f) {
      const std::string s = e.is_string() ? e.get<std::string>() : "";
      if (s == "json") o.write_json = true;
      else if (s == "csv") o.write_csv = true;
      else throw ConfigError("output.formats entries must be 'json' or 'csv'");
    }
  }
  return o;
}

inline ExperimentConfig parse_config(const json& root) {
  detail::reject_unknown(root, "config", {"description", "problem", "solver", "output", "replicates"});
  if (!root.contains("problem")) throw ConfigError("config needs a 'problem' block");
  ExperimentConfig c;
  c.description = detail::get_or<std::string>(root, "config", "description", "");
  c.problem = parse_problem(root.at("problem"));
  c.solver = parse_solver(root.contains("solver") ? root.at("solver") : json::object());
  c.output = parse_output(root.contains("output") ? root.at("output") : json::object());
  if (root.contains("replicates")) {
    const json& rep = root.at("replicates");
    detail::reject_unknown(rep, "replicates", {"seeds"});
    if (rep.contains("seeds")) {
      const json& s = rep.at("seeds");
      if (!s.is_array() || s.empty()) throw ConfigError("replicates.seeds must be a non-empty array");
      c.seeds.clear();
      for (const auto& e : s) {
        if (!e.is_number_unsigned()) throw ConfigError("replicate seeds must be non-negative integers");
        c.seeds.push_back(e.get<std::uint64_t>());
      }
    }
  }
  return c;
}

/// Canonical (fully resolved) form; feeding it back to parse_config
/// reproduces the same configuration.
inline json to_json(const ExperimentConfig& c) {
  json p{{"kind", to_string(c.problem.kind)}, {"seed", c.problem.seed}};
  switch (c.problem.kind) {
    case ProblemKind::Linear:
      p["d"] = c.problem.d;
      p["k"] = c.problem.k;
      p["sparsity"] = c.problem.sparsity;
      p["noise_variance"] = c.problem.noise_variance;
      p["magnitudes"] = {c.problem.magnitude_lo, c.problem.magnitude_hi};
      break;
    case ProblemKind::Transport:
      p["grid"] = c.problem.grid;
      p["modes"] = c.problem.modes;
      p["sigma"] = c.problem.sigma;
      break;
    case ProblemKind::Elliptic:
      p["grid"] = c.problem.grid;
      p["modes"] = c.problem.modes;
      p["sigma"] = c.problem.sigma;
      p["nonzeros"] = c.problem.nonzeros;
      p["magnitudes"] = {c.problem.magnitude_lo, c.problem.magnitude_hi};
      p["averaging"] = c.problem.averaging == FaceAveraging::Harmonic ? "harmonic" : "arithmetic";
      break;
  }
  const SolverSpec& s = c.solver;
  json sv{{"variant", to_string(s.variant)},
          {"ensemble_size", s.ensemble_size},
          {"iterations", s.iterations},
          {"alpha", s.alpha},
          {"stopping", s.stopping == StoppingRule::Morozov ? "morozov" : "fixed"},
          {"pinv_tol", s.pinv_tol},
          {"r", s.r},
          {"beta", s.beta},
          {"vartheta", s.vartheta},
          {"theta0", s.theta0},
          {"outer_iterations", s.outer_iterations},
          {"rel_tol", s.rel_tol ? json(*s.rel_tol) : json(nullptr)},
          {"theta_floor", s.theta_floor}};
  json formats = json::array();
  if (c.output.write_json) formats.push_back("json");
  if (c.output.write_csv) formats.push_back("csv");
  json out{{"directory", c.output.directory},
           {"formats", formats},
           {"record_ensembles", c.output.record_ensembles}};
  return json{{"description", c.description},
              {"problem", p},
              {"solver", sv},
              {"output", out},
              {"replicates", {{"seeds", c.seeds}}}};
}

// ---------------------------------------------------------------------------

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + path + "': " + e.what());
  }
}

/// Applies "a.b.c=value"; the value is parsed as JSON when possible and
/// taken as a plain string otherwise. Intermediate objects are created, so
/// typos surface later as unknown keys.
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }

  json* node = &root;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("empty path segment in override: " + assignment);
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError("override path crosses a non-object: " + path);
    node = &next;
  }
  (*node)[parts.back()] = std::move(value);
}

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

inline std::string config_hash(const ExperimentConfig& c) {
  const std::string dump = to_json(c).dump();
  return hex64(fnv1a(dump.data(), dump.size()));
}

// ---------------------------------------------------------------------------

inline InverseProblem build_problem(const ProblemSpec& p) {
  switch (p.kind) {
    case ProblemKind::Linear: {
      LinearProblemOptions o;
      o.d = p.d;
      o.k = p.k;
      o.sparsity = p.sparsity;
      o.noise_variance = p.noise_variance;
      o.magnitude_lo = p.magnitude_lo;
      o.magnitude_hi = p.magnitude_hi;
      o.seed = p.seed;
      return make_linear_problem(o).problem;
    }
    case ProblemKind::Transport: {
      TransportProblemOptions o;
      o.grid = p.grid;
      o.modes = p.modes;
      o.sigma = p.sigma;
      o.seed = p.seed;
      return make_transport_problem(o);
    }
    case ProblemKind::Elliptic: {
      EllipticProblemOptions o;
      o.settings.grid = p.grid;
      o.settings.modes = p.modes;
      o.settings.averaging = p.averaging;
      o.truth.nonzeros = p.nonzeros;
      o.truth.magnitude_lo = p.magnitude_lo;
      o.truth.magnitude_hi = p.magnitude_hi;
      o.sigma = p.sigma;
      o.seed = p.seed;
      return make_elliptic_problem(o);
    }
  }
  throw ConfigError("unknown problem kind");
}

/// Hash of the problem block together with the generated data and truth.
inline std::string problem_hash(const ExperimentConfig& c, const InverseProblem& problem) {
  const std::string dump = to_json(c)["problem"].dump();
  std::uint64_t h = fnv1a(dump.data(), dump.size());
  h = fnv1a(problem.y.data(), static_cast<std::size_t>(problem.y.size()) * sizeof(double), h);
  if (problem.truth)
    h = fnv1a(problem.truth->data(), static_cast<std::size_t>(problem.truth->size()) * sizeof(double), h);
  return hex64(h);
}

inline OuterConfig outer_config(const SolverSpec& s, Index d) {
  OuterConfig cfg;
  cfg.inner.ensemble_size = s.ensemble_size;
  cfg.inner.alpha = s.alpha;
  cfg.inner.max_iterations = s.iterations;
  cfg.inner.stopping = s.stopping;
  cfg.inner.pinv_tol = s.pinv_tol;
  cfg.hp = HyperParams{s.r, s.beta, detail::expand(s.vartheta, d, "solver.vartheta")};
  cfg.theta0 = detail::expand(s.theta0, d, "solver.theta0");
  cfg.max_outer = s.outer_iterations + 1;
  cfg.rel_tol = s.rel_tol;
  cfg.variant = s.variant;
  cfg.theta_floor = s.theta_floor;
  try {
    cfg.validate(d);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

}  // namespace sparse_ekp
