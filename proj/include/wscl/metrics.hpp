#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "wscl/errors.hpp"

namespace wscl {

// Lower-triangular accuracy table: at(k, i) is the accuracy on task i's
// classes measured right after training on task k finished (i <= k).
class MetricsMatrix {
 public:
  explicit MetricsMatrix(std::size_t num_tasks = 0) : rows_(num_tasks) {}

  std::size_t num_tasks() const { return rows_.size(); }

  void record_eval(std::size_t k, std::vector<double> per_task) {
    if (k >= rows_.size()) throw UsageError("record_eval: task index " + std::to_string(k) + " out of range");
    if (rows_[k]) throw UsageError("record_eval: row " + std::to_string(k) + " already recorded");
    if (per_task.size() != k + 1)
      throw UsageError("record_eval: row " + std::to_string(k) + " needs " + std::to_string(k + 1) + " entries");
    for (double a : per_task)
      if (!(a >= 0.0 && a <= 1.0)) throw UsageError("record_eval: accuracy outside [0, 1]");
    rows_[k] = std::move(per_task);
  }

  bool has_row(std::size_t k) const { return k < rows_.size() && rows_[k].has_value(); }
  bool complete() const {
    return std::all_of(rows_.begin(), rows_.end(), [](const auto& r) { return r.has_value(); });
  }
  const std::vector<double>& row(std::size_t k) const {
    if (!has_row(k)) throw UsageError("row " + std::to_string(k) + " not recorded");
    return *rows_[k];
  }
  double at(std::size_t k, std::size_t i) const { return row(k).at(i); }

 private:
  std::vector<std::optional<std::vector<double>>> rows_;
};

// A_f: mean accuracy over all tasks after the final task.
inline double final_accuracy(const MetricsMatrix& m) {
  if (m.num_tasks() == 0 || !m.complete()) throw UsageError("final_accuracy: matrix incomplete");
  const auto& last = m.row(m.num_tasks() - 1);
  double s = 0.0;
  for (double a : last) s += a;
  return s / static_cast<double>(last.size());
}

// F: mean drop from each task's peak accuracy to its final accuracy, over
// all tasks but the last.
inline double forgetting(const MetricsMatrix& m) {
  const std::size_t T = m.num_tasks();
  if (T < 2) throw UsageError("forgetting: needs at least two tasks");
  if (!m.complete()) throw UsageError("forgetting: matrix incomplete");
  double s = 0.0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    double peak = m.at(t, t);
    for (std::size_t k = t; k < T; ++k) peak = std::max(peak, m.at(k, t));
    s += peak - m.at(T - 1, t);
  }
  return s / static_cast<double>(T - 1);
}

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

// CSV form:
//   row,task_0,...,task_{T-1}
//   0,a00,,,...
//   ...
//   summary,A_f,<value>,F,<value>
// F is left empty when T < 2.
inline void write_metrics_csv(std::ostream& os, const MetricsMatrix& m) {
  const std::size_t T = m.num_tasks();
  os << "row";
  for (std::size_t i = 0; i < T; ++i) os << ",task_" << i;
  os << '\n';
  for (std::size_t k = 0; k < T; ++k) {
    if (!m.has_row(k)) continue;
    os << k;
    for (std::size_t i = 0; i < T; ++i) {
      os << ',';
      if (i <= k) os << format_real(m.at(k, i));
    }
    os << '\n';
  }
  if (m.complete() && T > 0) {
    os << "summary,A_f," << format_real(final_accuracy(m)) << ",F,";
    if (T >= 2) os << format_real(forgetting(m));
    os << '\n';
  }
}

inline MetricsMatrix read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("metrics csv: empty");
  const auto T = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  MetricsMatrix m(T);
  while (std::getline(is, line)) {
    if (line.rfind("summary", 0) == 0 || line.empty()) continue;
    std::stringstream ss(line);
    std::string f;
    std::getline(ss, f, ',');
    const std::size_t k = std::stoul(f);
    std::vector<double> row;
    for (std::size_t i = 0; i <= k && std::getline(ss, f, ','); ++i) row.push_back(std::stod(f));
    m.record_eval(k, row);
  }
  return m;
}

}  // namespace wscl
