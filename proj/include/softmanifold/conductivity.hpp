#pragma once

#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "softmanifold/common.hpp"
#include "softmanifold/feature_matrix.hpp"
#include "softmanifold/neighborhoods.hpp"

namespace softmanifold {

// Per-edge, per-feature diffusion conductivities. An entry is zero for
// any feature unobserved at either endpoint, which is what blocks
// diffusion through missing records.
struct ConductivityTensor {
  std::size_t n_features = 0;
  bool symmetric = true;
  std::map<std::pair<int, int>, Vec> entries;  // keyed by (min, max)

  static std::pair<int, int> key(int i, int j) {
    return i < j ? std::make_pair(i, j) : std::make_pair(j, i);
  }

  const Vec* find(int i, int j) const {
    auto it = entries.find(key(i, j));
    return it == entries.end() ? nullptr : &it->second;
  }

  const Vec& at(int i, int j) const {
    const Vec* v = find(i, j);
    if (!v) throw std::out_of_range("conductivity entry not materialized");
    return *v;
  }
};

inline ConductivityTensor build_conductivity(const FeatureMatrix& fm,
                                             const Neighborhoods& nbhd,
                                             double base) {
  if (base <= 0.0) throw std::invalid_argument("base conductivity must be > 0");
  ConductivityTensor K;
  K.n_features = fm.n_cols;
  for (std::size_t i = 0; i < nbhd.size(); ++i) {
    for (int j : nbhd.adjacency[i]) {
      const auto key = ConductivityTensor::key(static_cast<int>(i), j);
      if (K.entries.count(key)) continue;
      Vec row(fm.n_cols, 0.0);
      for (std::size_t f = 0; f < fm.n_cols; ++f) {
        if (fm.is_observed(key.first, f) && fm.is_observed(key.second, f)) {
          row[f] = base;
        }
      }
      K.entries.emplace(key, std::move(row));
    }
  }
  return K;
}

}  // namespace softmanifold
