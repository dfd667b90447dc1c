#pragma once

// Persistence of run records: results.json, estimates.csv and metrics.csv.
// CSV follows RFC 4180 (CRLF line breaks, quoted fields when needed).

#include "sparse_ekp/config.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace sparse_ekp {

/// Shortest round-trip decimal form; empty for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class CsvWriter {
public:
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) text_ += ',';
      text_ += csv_field(fields[i]);
    }
    text_ += "\r\n";
  }
  const std::string& text() const { return text_; }

private:
  std::string text_;
};

/// Minimal RFC 4180 reader (used by tests and compare round trips).
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (any || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline json vector_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(std::isfinite(v(i)) ? json(v(i)) : json(nullptr));
  return a;
}

inline json optional_json(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}

/// Everything one `run` invocation produced.
struct ExperimentResult {
  ExperimentConfig config;
  std::string config_hash;
  std::string problem_hash;
  std::string method;
  std::optional<Vector> truth;
  std::vector<Index> support;
  std::vector<RunRecord> runs;

  bool any_diverged() const {
    for (const auto& r : runs)
      if (r.diverged) return true;
    return false;
  }
};

inline json to_json(const IterationRecord& it) {
  json j{{"outer", it.outer},
         {"estimate", vector_json(it.estimate)},
         {"theta", vector_json(it.theta)},
         {"lower", vector_json(it.lower)},
         {"upper", vector_json(it.upper)},
         {"l2_error", optional_json(it.metrics.l2_error)},
         {"avg_width", optional_json(it.metrics.avg_width)},
         {"off_support_norm", optional_json(it.metrics.off_support_norm)},
         {"misfit", optional_json(it.misfit)},
         {"inner_iterations", it.inner_iterations}};
  if (it.ensemble) {
    json cols = json::array();
    for (Index n = 0; n < it.ensemble->cols(); ++n) cols.push_back(vector_json(it.ensemble->col(n)));
    j["ensemble"] = std::move(cols);
  }
  return j;
}

inline json to_json(const ExperimentResult& r) {
  json runs = json::array();
  for (const RunRecord& rec : r.runs) {
    json its = json::array();
    for (const auto& it : rec.iterations) its.push_back(to_json(it));
    runs.push_back(json{{"seed", rec.seed},
                        {"status", rec.diverged ? "diverged" : "ok"},
                        {"stopped_by_tolerance", rec.stopped_by_tolerance},
                        {"message", rec.message},
                        {"iterations", std::move(its)}});
  }
  return json{{"schema_version", kSchemaVersion},
              {"version", kVersion},
              {"config", to_json(r.config)},
              {"config_hash", r.config_hash},
              {"problem_hash", r.problem_hash},
              {"method", r.method},
              {"truth", r.truth ? vector_json(*r.truth) : json(nullptr)},
              {"support", r.support},
              {"runs", std::move(runs)}};
}

inline std::string metrics_csv(const ExperimentResult& r) {
  CsvWriter w;
  w.row({"method", "seed", "outer", "status", "l2_error", "avg_width", "off_support_norm", "misfit",
         "inner_iterations"});
  for (const RunRecord& rec : r.runs) {
    const std::string seed = std::to_string(rec.seed);
    for (const auto& it : rec.iterations) {
      w.row({r.method, seed, std::to_string(it.outer), "ok",
             it.metrics.l2_error ? format_double(*it.metrics.l2_error) : "",
             format_double(it.metrics.avg_width),
             it.metrics.off_support_norm ? format_double(*it.metrics.off_support_norm) : "",
             format_double(it.misfit), std::to_string(it.inner_iterations)});
    }
    if (rec.diverged) {
      w.row({r.method, seed, std::to_string(rec.iterations.size()), "diverged", "", "", "", "", ""});
    }
  }
  return w.text();
}

inline std::string estimates_csv(const ExperimentResult& r) {
  CsvWriter w;
  w.row({"seed", "outer", "component", "truth", "estimate", "lower", "upper"});
  for (const RunRecord& rec : r.runs) {
    const std::string seed = std::to_string(rec.seed);
    for (const auto& it : rec.iterations) {
      const std::string outer = std::to_string(it.outer);
      for (Index i = 0; i < it.estimate.size(); ++i) {
        w.row({seed, outer, std::to_string(i), r.truth ? format_double((*r.truth)(i)) : "",
               format_double(it.estimate(i)), format_double(it.lower(i)), format_double(it.upper(i))});
      }
    }
  }
  return w.text();
}

inline void write_outputs(const ExperimentResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
  if (r.config.output.write_json) write_text_file(dir / "results.json", to_json(r).dump(2) + "\n");
  if (r.config.output.write_csv) {
    write_text_file(dir / "metrics.csv", metrics_csv(r));
    write_text_file(dir / "estimates.csv", estimates_csv(r));
  }
}

}  // namespace sparse_ekp
