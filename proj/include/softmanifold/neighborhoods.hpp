#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>
#include <vector>

#include "softmanifold/common.hpp"
#include "softmanifold/feature_matrix.hpp"

namespace softmanifold {

struct Neighborhoods {
  std::vector<std::vector<int>> adjacency;  // N(i), ascending by distance
  int k = 0;

  std::size_t size() const { return adjacency.size(); }
  bool contains(int i, int j) const {
    const auto& n = adjacency[static_cast<std::size_t>(i)];
    return std::find(n.begin(), n.end(), j) != n.end();
  }
};

// k nearest rows under the masked distance; ties broken by row index.
// Rows with no finite-distance peer beyond their budget get a truncated
// neighborhood and a warning.
inline Neighborhoods knn_neighborhoods(const FeatureMatrix& fm, int k,
                                       int threads = 1) {
  const std::size_t n = fm.n_rows;
  if (k < 1 || static_cast<std::size_t>(k) >= n) {
    throw std::invalid_argument("k must satisfy 1 <= k < n_rows");
  }
  Neighborhoods nb;
  nb.k = k;
  nb.adjacency.assign(n, {});

  parallel_for(n, threads, [&](std::size_t i) {
    std::vector<std::pair<double, int>> cand;
    cand.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = masked_distance(fm, i, j);
      if (std::isfinite(d)) cand.emplace_back(d, static_cast<int>(j));
    }
    std::sort(cand.begin(), cand.end());
    const std::size_t take = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(k));
    auto& out = nb.adjacency[i];
    out.reserve(take);
    for (std::size_t t = 0; t < take; ++t) out.push_back(cand[t].second);
  });

  for (std::size_t i = 0; i < n; ++i) {
    if (nb.adjacency[i].empty()) {
      throw std::runtime_error("row " + std::to_string(i) +
                               " shares no observed feature with any other row");
    }
    if (nb.adjacency[i].size() < static_cast<std::size_t>(k)) {
      std::cerr << "warning: row " << i << " has only " << nb.adjacency[i].size()
                << " finite-distance peers; neighborhood truncated\n";
    }
  }
  return nb;
}

}  // namespace softmanifold
