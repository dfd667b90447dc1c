#pragma once

// Command implementations behind the sparse_ekp executable. Each returns a
// process exit code:
//   0 success, 1 configuration or input error, 2 divergence, 3 selfcheck failure.

#include "sparse_ekp/config.hpp"
#include "sparse_ekp/parallel.hpp"
#include "sparse_ekp/results.hpp"

#include <array>
#include <chrono>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace sparse_ekp {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitDiverged = 2, kExitSelfcheck = 3 };

/// Runs every replicate seed; seeds run concurrently, each with its share of
/// the thread budget. Output does not depend on the split.
inline ExperimentResult run_experiment(const ExperimentConfig& config, unsigned threads = 0) {
  const InverseProblem problem = build_problem(config.problem);
  OuterConfig cfg = outer_config(config.solver, problem.input_dim());
  cfg.record_ensembles = config.output.record_ensembles;

  const unsigned budget = threads == 0 ? thread_budget() : threads;
  const auto n_seeds = static_cast<long>(config.seeds.size());
  const unsigned seed_workers = static_cast<unsigned>(std::min<long>(budget, n_seeds));
  cfg.inner.threads = std::max(1u, budget / std::max(1u, seed_workers));

  ExperimentResult result;
  result.config = config;
  result.config_hash = config_hash(config);
  result.problem_hash = problem_hash(config, problem);
  result.method = method_label(cfg.variant, cfg.hp, cfg.max_outer);
  result.truth = problem.truth;
  result.support = problem.support();
  result.runs.resize(config.seeds.size());
  parallel_for(n_seeds, seed_workers, [&](long s) {
    result.runs[static_cast<std::size_t>(s)] = run_outer(problem, cfg, config.seeds[static_cast<std::size_t>(s)]);
  });
  return result;
}

struct RunOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::string> out_dir;
};

inline std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("seed list must be comma-separated non-negative integers: " + text);
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("seed out of range: " + item);
    }
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  return seeds;
}

inline ExperimentConfig load_config(const RunOptions& opt) {
  json root = load_json_file(opt.config_path);
  for (const auto& o : opt.overrides) apply_override(root, o);
  ExperimentConfig config = parse_config(root);
  if (opt.seeds) config.seeds = *opt.seeds;
  if (opt.out_dir) config.output.directory = *opt.out_dir;
  return config;
}

inline int cmd_run(const RunOptions& opt, std::ostream& out, std::ostream& err) {
  ExperimentConfig config;
  try {
    config = load_config(opt);
  } catch (const Error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  ExperimentResult result;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    result = run_experiment(config);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  try {
    write_outputs(result, config.output.directory);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  std::ostringstream elapsed;
  elapsed << std::fixed << std::setprecision(1) << secs;
  out << result.method << " on " << to_string(config.problem.kind) << ": " << result.runs.size()
      << " seed(s) in " << elapsed.str() << " s -> " << config.output.directory << "\n";
  for (const RunRecord& rec : result.runs) {
    out << "  seed " << rec.seed << ": ";
    if (!rec.iterations.empty()) {
      const auto& last = rec.iterations.back();
      out << "outer " << last.outer;
      if (last.metrics.l2_error) out << "  l2_error " << *last.metrics.l2_error;
      out << "  avg_width " << last.metrics.avg_width;
    }
    if (rec.diverged) out << "  diverged (" << rec.message << ")";
    out << "\n";
  }
  if (result.any_diverged()) {
    err << "warning: at least one replicate diverged; partial results were written\n";
    return kExitDiverged;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareOptions {
  std::vector<std::string> results;
  std::string out_dir = "compare";
  std::optional<std::vector<int>> iterations;
};

struct MethodSummary {
  std::string label;
  std::string file;
  // outer iteration -> seed-averaged value
  std::map<int, double> l2_error;
  std::map<int, double> avg_width;
};

inline MethodSummary summarize_results(const json& doc, const std::string& file) {
  MethodSummary s;
  s.label = doc.at("method").get<std::string>();
  s.file = file;
  std::map<int, std::pair<double, int>> err, wid;
  for (const auto& run : doc.at("runs")) {
    for (const auto& it : run.at("iterations")) {
      const int l = it.at("outer").get<int>();
      if (it.at("l2_error").is_number()) {
        err[l].first += it.at("l2_error").get<double>();
        err[l].second += 1;
      }
      if (it.at("avg_width").is_number()) {
        wid[l].first += it.at("avg_width").get<double>();
        wid[l].second += 1;
      }
    }
  }
  for (const auto& [l, acc] : err) s.l2_error[l] = acc.first / acc.second;
  for (const auto& [l, acc] : wid) s.avg_width[l] = acc.first / acc.second;
  return s;
}

inline std::string ordinal(int n) {
  const int m100 = n % 100;
  const char* suffix = "th";
  if (m100 < 11 || m100 > 13) {
    if (n % 10 == 1) suffix = "st";
    else if (n % 10 == 2) suffix = "nd";
    else if (n % 10 == 3) suffix = "rd";
  }
  return std::to_string(n) + suffix;
}

inline std::vector<int> parse_iteration_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("iteration list must be comma-separated non-negative integers: " + text);
    out.push_back(std::stoi(item));
  }
  if (out.empty()) throw ConfigError("iteration list is empty");
  return out;
}

inline int cmd_compare(const CompareOptions& opt, std::ostream& out, std::ostream& err) {
  if (opt.results.size() < 2) {
    err << "compare needs at least two results files\n";
    return kExitConfig;
  }
  std::vector<MethodSummary> rows;
  std::string hash;
  for (const auto& file : opt.results) {
    try {
      const json doc = load_json_file(file);
      if (!doc.contains("schema_version") || doc.at("schema_version") != kSchemaVersion)
        throw ConfigError("'" + file + "' is not a results file of schema version " +
                          std::to_string(kSchemaVersion));
      const std::string h = doc.at("problem_hash").get<std::string>();
      if (hash.empty()) hash = h;
      if (h != hash) throw ConfigError("problem hash of '" + file + "' differs from '" + opt.results[0] + "'");
      rows.push_back(summarize_results(doc, file));
    } catch (const ConfigError& e) {
      err << "error: " << e.what() << "\n";
      return kExitConfig;
    } catch (const json::exception& e) {
      err << "error: malformed results file '" << file << "': " << e.what() << "\n";
      return kExitConfig;
    }
  }

  // Disambiguate repeated method labels.
  std::map<std::string, int> seen;
  for (auto& r : rows) {
    const int n = ++seen[r.label];
    if (n > 1) r.label += " #" + std::to_string(n);
  }

  std::vector<int> cols;
  if (opt.iterations) {
    cols = *opt.iterations;
  } else {
    std::set<int> all;
    for (const auto& r : rows)
      for (const auto& [l, _] : r.l2_error) all.insert(l);
    for (const auto& r : rows)
      for (const auto& [l, _] : r.avg_width) all.insert(l);
    cols.assign(all.begin(), all.end());
  }

  auto cell = [](const std::map<int, double>& m, int l) -> std::optional<double> {
    auto it = m.find(l);
    if (it == m.end()) return std::nullopt;
    return it->second;
  };

  CsvWriter table, diffs;
  std::vector<std::string> header{"method", "metric"};
  for (int l : cols) header.push_back("iter_" + std::to_string(l));
  table.row(header);
  diffs.row(header);
  const MethodSummary& ref = rows.front();
  for (const char* metric : {"l2_error", "avg_width"}) {
    for (const auto& r : rows) {
      const auto& m = std::string(metric) == "l2_error" ? r.l2_error : r.avg_width;
      const auto& mref = std::string(metric) == "l2_error" ? ref.l2_error : ref.avg_width;
      std::vector<std::string> row{r.label, metric}, drow{r.label, metric};
      for (int l : cols) {
        const auto v = cell(m, l);
        const auto v0 = cell(mref, l);
        row.push_back(v ? format_double(*v) : "");
        drow.push_back(v && v0 ? format_double(*v - *v0) : "");
      }
      table.row(row);
      diffs.row(drow);
    }
  }

  std::ostringstream text;
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  for (const char* metric : {"l2_error", "avg_width"}) {
    text << metric << " (seed average)\n";
    text << std::left << std::setw(static_cast<int>(width) + 2) << "method";
    for (int l : cols) text << std::right << std::setw(10) << ordinal(l);
    text << "\n";
    for (const auto& r : rows) {
      const auto& m = std::string(metric) == "l2_error" ? r.l2_error : r.avg_width;
      text << std::left << std::setw(static_cast<int>(width) + 2) << r.label;
      for (int l : cols) {
        const auto v = cell(m, l);
        std::ostringstream num;
        if (v) num << std::fixed << std::setprecision(4) << *v;
        else num << "-";
        text << std::right << std::setw(10) << num.str();
      }
      text << "\n";
    }
    text << "\n";
  }

  try {
    const std::filesystem::path dir(opt.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory '" + dir.string() + "'");
    write_text_file(dir / "compare.csv", table.text());
    write_text_file(dir / "differences.csv", diffs.text());
    write_text_file(dir / "compare.txt", text.str());
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  out << text.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// selfcheck
// ---------------------------------------------------------------------------

using ThetaUpdateFn = std::function<Vector(const Vector&, const HyperParams&)>;

struct SelfcheckOptions {
  ThetaUpdateFn theta_update = [](const Vector& u, const HyperParams& hp) { return sparse_ekp::theta_update(u, hp); };
};

namespace detail {

/// Golden-section minimum of a unimodal f on [a, b].
inline double golden_section(const std::function<double(double)>& f, double a, double b, int iters = 200) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = f(c), fd = f(d);
  for (int i = 0; i < iters; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

/// Scalar theta objective u^2/(2 theta) + theta^r / vartheta - eta log theta,
/// minimized over log theta on [1e-12, 1e6].
inline double theta_argmin(double u, double r, double beta, double vartheta) {
  const double eta = r * beta - 1.5;
  auto f = [&](double s) {
    const double th = std::exp(s);
    return u * u / (2.0 * th) + std::pow(th, r) / vartheta - eta * s;
  };
  return std::exp(golden_section(f, std::log(1e-12), std::log(1e6), 300));
}

}  // namespace detail

inline int cmd_selfcheck(std::ostream& out, const SelfcheckOptions& opt = {}) {
  int failures = 0;
  auto report = [&](const std::string& name, bool ok, const std::string& detail) {
    out << (ok ? "PASS  " : "FAIL  ") << name << "  (" << detail << ")\n";
    if (!ok) ++failures;
  };
  auto guarded = [&](const std::string& name, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      report(name, false, std::string("exception: ") + e.what());
    }
  };

  Rng rng = make_rng({20240501, Purpose::Generic, 0, 0, 0});
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  guarded("theta update vs golden-section search", [&] {
    double worst = 0.0;
    for (int k = 0; k < 60; ++k) {
      const double r = std::array<double, 3>{1.0 / 3.0, 0.5, 1.0}[static_cast<std::size_t>(k % 3)];
      const double u = 4.0 * unif(rng) - 2.0;
      const double vt = 0.1 + 9.9 * unif(rng);
      const HyperParams hp = HyperParams::gengamma(r, Vector::Constant(1, vt));
      const double got = opt.theta_update(Vector::Constant(1, u), hp)(0);
      const double ref = detail::theta_argmin(u, r, hp.beta, vt);
      worst = std::max(worst, std::abs(got - ref) / ref);
    }
    std::ostringstream s;
    s << "max rel err " << worst;
    report("theta update vs golden-section search", worst <= 1e-6, s.str());
  });

  guarded("inverse-gamma theta update vs golden-section search", [&] {
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
      const double u = 4.0 * unif(rng) - 2.0;
      const double vt = 0.1 + 9.9 * unif(rng);
      const double beta = 2.0 * unif(rng);
      const HyperParams hp = HyperParams::invgamma(beta, Vector::Constant(1, vt));
      const double got = opt.theta_update(Vector::Constant(1, u), hp)(0);
      const double ref = detail::theta_argmin(u, -1.0, beta, vt);
      worst = std::max(worst, std::abs(got - ref) / ref);
    }
    std::ostringstream s;
    s << "max rel err " << worst;
    report("inverse-gamma theta update vs golden-section search", worst <= 1e-6, s.str());
  });

  guarded("J(u, theta*(u)) = Jp(u)", [&] {
    LinearProblemOptions lo;
    lo.d = 10;
    lo.k = 6;
    lo.sparsity = 3;
    lo.seed = 7;
    const InverseProblem prob = make_linear_problem(lo).problem;
    double worst = 0.0;
    for (double r : {1.0 / 3.0, 1.0}) {
      const HyperParams hp = HyperParams::gengamma(r, 10, 1.0);
      for (int k = 0; k < 20; ++k) {
        const Vector u = standard_normal(10, rng);
        const Vector th = opt.theta_update(u, hp);
        const double j = objective_J(u, th, prob, hp);
        const double jp = objective_Jp(u, prob, hp);
        worst = std::max(worst, std::abs(j - jp) / std::max(1.0, std::abs(jp)));
      }
    }
    std::ostringstream s;
    s << "max rel diff " << worst;
    report("J(u, theta*(u)) = Jp(u)", worst <= 1e-10, s.str());
  });

  guarded("pseudoinverse Penrose identities", [&] {
    Matrix B(5, 3);
    for (Index j = 0; j < 3; ++j) B.col(j) = standard_normal(5, rng);
    const Matrix P = B * B.transpose();
    const Matrix X = pseudoinverse(P);
    const double scale = P.norm();
    const double e1 = (P * X * P - P).norm() / scale;
    const double e2 = (X * P * X - X).norm() / X.norm();
    const double e3 = ((P * X).transpose() - P * X).norm();
    const double e4 = ((X * P).transpose() - X * P).norm();
    const double worst = std::max({e1, e2, e3, e4});
    std::ostringstream s;
    s << "max residual " << worst;
    report("pseudoinverse Penrose identities", worst <= 1e-10, s.str());
  });

  guarded("elliptic discrete residual", [&] {
    const EllipticModel model;
    double worst = 0.0;
    for (int k = 0; k < 3; ++k) {
      const Vector c = 0.1 * standard_normal(model.input_dim(), rng);
      const auto sys = model.assemble(c);
      const Vector v = model.solve(sys);
      worst = std::max(worst, (sys.A * v - sys.b).norm() / sys.b.norm());
    }
    std::ostringstream s;
    s << "max |Av - b| / |b| = " << worst;
    report("elliptic discrete residual", worst <= 1e-10, s.str());
  });

  guarded("transport finite-difference consistency", [&] {
    const Vector c = 0.3 * standard_normal(60, rng);
    auto residual = [&](Index n) {
      const TransportModel m(n, 30);
      const Vector v = m.apply(c);
      const double h = 1.0 / static_cast<double>(n - 1);
      double worst = 0.0;
      for (Index i2 = 1; i2 + 1 < n; ++i2) {
        for (Index i1 = 1; i1 + 1 < n; ++i1) {
          const double dx1 = (v(i2 * n + i1 + 1) - v(i2 * n + i1 - 1)) / (2.0 * h);
          const double dx2 = (v((i2 + 1) * n + i1) - v((i2 - 1) * n + i1)) / (2.0 * h);
          const double u = TransportModel::coefficient_function(c, m.node(i1));
          worst = std::max(worst, std::abs(dx1 - dx2 - u * v(i2 * n + i1)));
        }
      }
      return worst;
    };
    const double r1 = residual(41), r2 = residual(81), r3 = residual(161);
    std::ostringstream s;
    s << "max residual " << r1 << " -> " << r2 << " -> " << r3;
    report("transport finite-difference consistency", r2 < 0.55 * r1 && r3 < 0.55 * r2, s.str());
  });

  out << (failures == 0 ? "selfcheck passed" : "selfcheck FAILED: " + std::to_string(failures) + " check(s)")
      << "\n";
  return failures == 0 ? kExitOk : kExitSelfcheck;
}

}  // namespace sparse_ekp
