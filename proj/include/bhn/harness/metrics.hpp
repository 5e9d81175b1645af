#pragma once

// Run outputs: line-delimited JSON metrics and flat CSV tables.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "bhn/error.hpp"

namespace bhn::harness {

using json = nlohmann::json;

/// Shortest decimal that round-trips; "nan"/"inf" spelled out.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

/// Append-only metric records with a non-decreasing step.
class MetricLog {
 public:
  explicit MetricLog(std::string run_id = "run") : run_id_(std::move(run_id)) {}

  /// `wall_clock` is recorded only when given, so reruns stay byte-identical.
  void record(std::size_t step, const std::map<std::string, double>& values, const std::string& phase = "",
              std::optional<double> wall_clock = std::nullopt) {
    if (!lines_.empty() && step < last_step_) throw ConfigError("metric steps must be non-decreasing");
    last_step_ = step;
    json j = {{"run", run_id_}, {"step", step}};
    if (!phase.empty()) j["phase"] = phase;
    json m = json::object();
    for (const auto& [k, v] : values) {
      if (std::isfinite(v))
        m[k] = v;
      else
        m[k] = nullptr;
    }
    j["metrics"] = std::move(m);
    if (wall_clock) j["wall_clock_s"] = *wall_clock;
    lines_.push_back(std::move(j));
  }

  const std::vector<json>& lines() const { return lines_; }
  const std::string& run_id() const { return run_id_; }

  std::string str() const {
    std::string out;
    for (const auto& l : lines_) out += l.dump() + "\n";
    return out;
  }

 private:
  std::string run_id_;
  std::vector<json> lines_;
  std::size_t last_step_ = 0;
};

/// Fixed-column table; cells are numbers or strings.
class Table {
 public:
  using Cell = std::variant<double, std::string>;

  Table() = default;
  explicit Table(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add(std::vector<Cell> row) {
    if (row.size() != columns_.size())
      throw ConfigError("table row has " + std::to_string(row.size()) + " cells, expected " +
                        std::to_string(columns_.size()));
    rows_.push_back(std::move(row));
  }

  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<Cell>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i)
      if (columns_[i] == name) return i;
    throw ConfigError("table has no column '" + name + "'");
  }
  double number(std::size_t row, const std::string& col) const { return std::get<double>(rows_.at(row)[column(col)]); }
  const std::string& text(std::size_t row, const std::string& col) const {
    return std::get<std::string>(rows_.at(row)[column(col)]);
  }

  std::string csv() const {
    std::string out;
    for (std::size_t i = 0; i < columns_.size(); ++i) out += (i ? "," : "") + columns_[i];
    out += "\n";
    for (const auto& r : rows_) {
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (i) out += ",";
        if (const auto* d = std::get_if<double>(&r[i]))
          out += format_number(*d);
        else
          out += std::get<std::string>(r[i]);
      }
      out += "\n";
    }
    return out;
  }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<Cell>> rows_;
};

/// Everything an experiment emits.
struct RunOutput {
  MetricLog metrics;
  Table summary;
  Table curves;
  json report = json::object();  // structured result, also printed by the CLI
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

/// metrics.jsonl, summary.csv and curves.csv under `dir` (created if needed).
inline void write_outputs(const std::filesystem::path& dir, const RunOutput& out) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
  write_text(dir / "metrics.jsonl", out.metrics.str());
  write_text(dir / "summary.csv", out.summary.csv());
  write_text(dir / "curves.csv", out.curves.csv());
}

}  // namespace bhn::harness
