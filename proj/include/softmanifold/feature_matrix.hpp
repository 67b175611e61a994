#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "softmanifold/common.hpp"
#include "softmanifold/rng.hpp"

namespace softmanifold {

// Feature table with an explicit observation mask. Missing entries are
// never imputed; every consumer works on the observed set only.
struct FeatureMatrix {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<double> values;     // row-major, undefined where unobserved
  std::vector<std::uint8_t> observed;
  std::vector<std::string> row_ids;
  std::vector<int> labels;        // -1 = unlabeled; empty if no label column

  double at(std::size_t i, std::size_t f) const { return values[i * n_cols + f]; }
  bool is_observed(std::size_t i, std::size_t f) const {
    return observed[i * n_cols + f] != 0;
  }
  void set(std::size_t i, std::size_t f, double v, bool obs) {
    values[i * n_cols + f] = v;
    observed[i * n_cols + f] = obs ? 1 : 0;
  }

  bool has_labels() const { return !labels.empty(); }

  std::size_t observed_count() const {
    std::size_t c = 0;
    for (auto o : observed) c += (o != 0);
    return c;
  }

  std::size_t row_observed_count(std::size_t i) const {
    std::size_t c = 0;
    for (std::size_t f = 0; f < n_cols; ++f) c += is_observed(i, f);
    return c;
  }
};

// Per-feature min-max rescale over observed entries. Constant columns
// collapse to 0.
inline void scale_unit_range(FeatureMatrix& fm) {
  for (std::size_t f = 0; f < fm.n_cols; ++f) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < fm.n_rows; ++i) {
      if (!fm.is_observed(i, f)) continue;
      lo = std::min(lo, fm.at(i, f));
      hi = std::max(hi, fm.at(i, f));
    }
    if (!(lo <= hi)) continue;  // column fully unobserved
    const double range = hi - lo;
    for (std::size_t i = 0; i < fm.n_rows; ++i) {
      if (!fm.is_observed(i, f)) continue;
      const double v = range > 0.0 ? (fm.at(i, f) - lo) / range : 0.0;
      fm.values[i * fm.n_cols + f] = v;
    }
  }
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

// Comma-separated input; empty field = missing; optional header row; the
// last column is a class label when has_labels is set. Features are
// rescaled to [0,1] on load.
inline FeatureMatrix load_csv(const std::string& path, bool has_labels,
                              bool has_header = false) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV file: " + path);

  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first && has_header) {
      first = false;
      continue;
    }
    first = false;
    if (detail::trim(line).empty()) continue;
    rows.push_back(detail::split_csv_line(line));
  }
  if (rows.empty()) throw std::runtime_error("CSV has no data rows: " + path);

  const std::size_t n_fields = rows[0].size();
  const std::size_t n_cols = has_labels ? n_fields - 1 : n_fields;
  if (n_cols == 0) throw std::runtime_error("CSV has no feature columns: " + path);

  FeatureMatrix fm;
  fm.n_rows = rows.size();
  fm.n_cols = n_cols;
  fm.values.assign(fm.n_rows * fm.n_cols, 0.0);
  fm.observed.assign(fm.n_rows * fm.n_cols, 0);
  if (has_labels) fm.labels.assign(fm.n_rows, -1);

  std::unordered_map<std::string, int> label_ids;  // first-appearance order
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != n_fields) {
      throw std::runtime_error("CSV row " + std::to_string(i + 1) +
                               " has " + std::to_string(rows[i].size()) +
                               " fields, expected " + std::to_string(n_fields));
    }
    std::size_t row_observed = 0;
    for (std::size_t f = 0; f < n_cols; ++f) {
      const std::string cell = detail::trim(rows[i][f]);
      if (cell.empty()) continue;
      std::size_t consumed = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &consumed);
      } catch (const std::exception&) {
        consumed = 0;
      }
      if (consumed != cell.size() || !std::isfinite(v)) {
        throw std::runtime_error("CSV row " + std::to_string(i + 1) +
                                 ", column " + std::to_string(f + 1) +
                                 ": non-numeric value '" + cell + "'");
      }
      fm.set(i, f, v, true);
      ++row_observed;
    }
    if (row_observed == 0) {
      throw std::runtime_error("CSV row " + std::to_string(i + 1) +
                               " has no observed features");
    }
    if (has_labels) {
      const std::string cell = detail::trim(rows[i][n_cols]);
      if (!cell.empty()) {
        auto it = label_ids.find(cell);
        if (it == label_ids.end()) {
          it = label_ids.emplace(cell, static_cast<int>(label_ids.size())).first;
        }
        fm.labels[i] = it->second;
      }
    }
    fm.row_ids.push_back("r" + std::to_string(i));
  }

  scale_unit_range(fm);
  return fm;
}

// Hides exactly floor(fraction * observed_count) additional entries,
// chosen at random from the given seed, never taking a row's last
// observed feature. Values are untouched; only the mask changes.
inline FeatureMatrix apply_missing_mask(const FeatureMatrix& fm, double fraction,
                                        std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) {
    throw std::invalid_argument("missing fraction must be in [0, 1)");
  }
  FeatureMatrix out = fm;
  const std::size_t total = fm.observed_count();
  const std::size_t target =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total)));
  if (target == 0) return out;
  if (total < fm.n_rows || target > total - fm.n_rows) {
    throw std::invalid_argument(
        "missing fraction too high: every row must keep one observed feature");
  }

  std::vector<std::size_t> cells;
  cells.reserve(total);
  for (std::size_t idx = 0; idx < fm.observed.size(); ++idx) {
    if (fm.observed[idx]) cells.push_back(idx);
  }
  Rng rng(hash_values(seed, 0x6d61736bULL));
  rng.shuffle(cells);

  std::vector<std::size_t> row_left(fm.n_rows);
  for (std::size_t i = 0; i < fm.n_rows; ++i) row_left[i] = fm.row_observed_count(i);

  std::size_t removed = 0;
  for (std::size_t idx : cells) {
    if (removed == target) break;
    const std::size_t row = idx / fm.n_cols;
    if (row_left[row] <= 1) continue;
    out.observed[idx] = 0;
    --row_left[row];
    ++removed;
  }
  // A full pass can always hide observed_count - n_rows entries, so the
  // target is reached whenever the precondition holds.
  return out;
}

// Class centroids drawn uniformly on the unit cube, rows = centroid +
// noise * gaussian, balanced labels, then the usual [0,1] rescale.
inline FeatureMatrix generate_synthetic(std::size_t n_nodes, std::size_t n_features,
                                        std::size_t n_classes, double noise,
                                        std::uint64_t seed) {
  if (n_nodes == 0 || n_features == 0 || n_classes == 0) {
    throw std::invalid_argument("synthetic sizes must be positive");
  }
  if (n_classes > n_nodes) {
    throw std::invalid_argument("n_classes must not exceed n_nodes");
  }
  if (noise < 0.0) throw std::invalid_argument("noise must be nonnegative");

  Rng rng(hash_values(seed, 0x73796e74ULL));
  std::vector<Vec> centroids(n_classes, Vec(n_features));
  for (auto& c : centroids) {
    for (auto& v : c) v = rng.uniform01();
  }

  FeatureMatrix fm;
  fm.n_rows = n_nodes;
  fm.n_cols = n_features;
  fm.values.assign(n_nodes * n_features, 0.0);
  fm.observed.assign(n_nodes * n_features, 1);
  fm.labels.assign(n_nodes, -1);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    const int label = static_cast<int>(i % n_classes);
    fm.labels[i] = label;
    for (std::size_t f = 0; f < n_features; ++f) {
      fm.values[i * n_features + f] =
          centroids[label][f] + noise * rng.normal();
    }
    fm.row_ids.push_back("r" + std::to_string(i));
  }
  scale_unit_range(fm);
  return fm;
}

inline std::size_t mutual_observed_count(const FeatureMatrix& fm, std::size_t i,
                                         std::size_t j) {
  std::size_t m = 0;
  for (std::size_t f = 0; f < fm.n_cols; ++f) {
    m += (fm.is_observed(i, f) && fm.is_observed(j, f));
  }
  return m;
}

// Overlap-normalized Euclidean distance over mutually observed features;
// +inf when the rows share none.
inline double masked_distance(const FeatureMatrix& fm, std::size_t i,
                              std::size_t j) {
  double s = 0.0;
  std::size_t m = 0;
  for (std::size_t f = 0; f < fm.n_cols; ++f) {
    if (!fm.is_observed(i, f) || !fm.is_observed(j, f)) continue;
    const double d = fm.at(i, f) - fm.at(j, f);
    s += d * d;
    ++m;
  }
  if (m == 0) return std::numeric_limits<double>::infinity();
  return std::sqrt(s / static_cast<double>(m));
}

}  // namespace softmanifold
