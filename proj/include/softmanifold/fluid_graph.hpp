#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numbers>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "softmanifold/common.hpp"
#include "softmanifold/conductivity.hpp"
#include "softmanifold/feature_matrix.hpp"
#include "softmanifold/neighborhoods.hpp"

namespace softmanifold {

enum class DistanceTransform { identity, neg_log };
enum class VelocitySign { magnitude, negative };

inline std::string to_string(DistanceTransform t) {
  return t == DistanceTransform::identity ? "identity" : "neg_log";
}

inline DistanceTransform distance_transform_from_string(const std::string& s) {
  if (s == "identity") return DistanceTransform::identity;
  if (s == "neg_log") return DistanceTransform::neg_log;
  throw std::invalid_argument("unknown distance transform: " + s);
}

inline std::string to_string(VelocitySign s) {
  return s == VelocitySign::magnitude ? "magnitude" : "negative";
}

inline VelocitySign velocity_sign_from_string(const std::string& s) {
  if (s == "magnitude") return VelocitySign::magnitude;
  if (s == "negative") return VelocitySign::negative;
  throw std::invalid_argument("unknown velocity sign: " + s);
}

// Transport velocity between two samples: conductivity-weighted feature
// difference over mutually observed features, normalized by sqrt of the
// overlap count so fully observed unit-conductivity pairs stay in [0, 1].
inline double velocity(const FeatureMatrix& fm, const ConductivityTensor& K,
                       int i, int j, VelocitySign sign = VelocitySign::magnitude) {
  const Vec& kij = K.at(i, j);
  double s = 0.0;
  std::size_t m = 0;
  for (std::size_t f = 0; f < fm.n_cols; ++f) {
    if (!fm.is_observed(static_cast<std::size_t>(i), f) ||
        !fm.is_observed(static_cast<std::size_t>(j), f)) {
      continue;
    }
    const double d = kij[f] * (fm.at(static_cast<std::size_t>(i), f) -
                               fm.at(static_cast<std::size_t>(j), f));
    s += d * d;
    ++m;
  }
  if (m == 0) return 0.0;
  const double mag = std::sqrt(s / static_cast<double>(m));
  return sign == VelocitySign::magnitude ? mag : -mag;
}

// Diffusion rate proxy: observed-feature overlap fraction with a small
// floor so the ratio v / (2 * B) stays defined.
inline double diffusion_rate(const FeatureMatrix& fm, int i, int j, double b0) {
  if (b0 <= 0.0) throw std::invalid_argument("b0 must be > 0");
  const double m = static_cast<double>(mutual_observed_count(
      fm, static_cast<std::size_t>(i), static_cast<std::size_t>(j)));
  return b0 * (m / static_cast<double>(fm.n_cols)) + 1e-6;
}

struct DiffusionParams {
  double v_plus = 0.0;
  double v_minus = 0.0;
  double b_plus = 0.0;
  double b_minus = 0.0;
};

// Edge-vs-rest drift and diffusion statistics for the move i -> j. The
// minus branch averages over the other neighbors of i; a degree-one node
// falls back to the symmetric case, which lands on probability 1/2.
inline DiffusionParams v_b_plus_minus(int i, int j, const FeatureMatrix& fm,
                                      const ConductivityTensor& K,
                                      const Neighborhoods& nbhd, double b0,
                                      VelocitySign sign = VelocitySign::magnitude) {
  const auto& ni = nbhd.adjacency[static_cast<std::size_t>(i)];
  if (std::find(ni.begin(), ni.end(), j) == ni.end()) {
    throw std::invalid_argument("v_b_plus_minus: j is not a neighbor of i");
  }
  DiffusionParams dp;
  dp.v_plus = velocity(fm, K, i, j, sign);
  dp.b_plus = diffusion_rate(fm, i, j, b0);
  if (ni.size() == 1) {
    dp.v_minus = dp.v_plus;
    dp.b_minus = dp.b_plus;
    return dp;
  }
  double vs = 0.0;
  double bs = 0.0;
  for (int m : ni) {
    if (m == j) continue;
    vs += velocity(fm, K, i, m, sign);
    bs += diffusion_rate(fm, i, m, b0);
  }
  const double cnt = static_cast<double>(ni.size() - 1);
  dp.v_minus = vs / cnt;
  dp.b_minus = bs / cnt;
  return dp;
}

// log(|z| * csch|z|); the factor tends to 1 as z -> 0 and underflows
// gracefully for large |z| when kept in log space.
inline double log_z_csch_z(double z) {
  z = std::abs(z);
  if (z < 1e-12) return 0.0;
  // expm1 keeps 1 - exp(-2z) fully accurate for small z
  const double log_sinh = z + std::log(-std::expm1(-2.0 * z)) - std::numbers::ln2;
  return std::log(z) - log_sinh;
}

// Probability that the fluid moves along the edge rather than toward the
// rest of the neighborhood:
//   p = t+ / (t+ + t-),  t+- = |v|csch|v| * exp(+-v),  v = v+- / (2 B+-).
inline double transition_probability(const DiffusionParams& dp) {
  if (!(dp.b_plus > 0.0) || !(dp.b_minus > 0.0)) {
    throw std::invalid_argument("diffusion rates must be > 0");
  }
  if (!std::isfinite(dp.v_plus) || !std::isfinite(dp.v_minus) ||
      !std::isfinite(dp.b_plus) || !std::isfinite(dp.b_minus)) {
    throw std::domain_error("non-finite diffusion parameters");
  }
  const double vp = dp.v_plus / (2.0 * dp.b_plus);
  const double vm = dp.v_minus / (2.0 * dp.b_minus);
  const double log_tp = log_z_csch_z(vp) + vp;
  const double log_tm = log_z_csch_z(vm) - vm;
  double p = 1.0 / (1.0 + std::exp(log_tm - log_tp));
  if (!std::isfinite(p)) throw std::domain_error("non-finite transition probability");
  // Keep strictly inside (0, 1) so -log(p) stays a usable distance.
  p = std::min(std::max(p, 1e-300), std::nextafter(1.0, 0.0));
  return p;
}

struct FluidEdge {
  int i = 0;
  int j = 0;
  double p = 0.0;   // directed transition probability for i -> j
  double d2 = 0.0;  // symmetrized squared distance of the pair
};

// Transition probabilities on the neighborhood graph plus the induced
// all-pairs squared distances (direct assignment on edges, shortest path
// over the edge metric elsewhere).
struct FluidGraph {
  int n_nodes = 0;
  Neighborhoods nbhd;
  std::vector<FluidEdge> edges;  // grouped by source, neighborhood order
  std::vector<double> d2;        // n*n, NaN across components
  double d_g_star = 0.0;
  DistanceTransform transform = DistanceTransform::identity;

  double d2_at(int i, int j) const {
    return d2[static_cast<std::size_t>(i) * static_cast<std::size_t>(n_nodes) +
              static_cast<std::size_t>(j)];
  }
  bool pair_covered(int i, int j) const { return std::isfinite(d2_at(i, j)); }

  double graph_distance(int i, int j) const { return std::sqrt(d2_at(i, j)); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out;
    out["n"] = n_nodes;
    out["edges"] = nlohmann::ordered_json::array();
    for (const auto& e : edges) {
      out["edges"].push_back({{"i", e.i}, {"j", e.j}, {"p", e.p}, {"d2", e.d2}});
    }
    out["d_star"] = d_g_star;
    out["transform"] = to_string(transform);
    return out;
  }

  static FluidGraph from_json(const nlohmann::json& in);
};

namespace detail {

// Shortest paths over sqrt(d2) edge weights from every source; squared
// back into the distance matrix for non-edge pairs.
inline void fill_all_pairs(FluidGraph& fg) {
  const int n = fg.n_nodes;
  const std::size_t nn = static_cast<std::size_t>(n);
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  fg.d2.assign(nn * nn, kNaN);

  std::vector<std::vector<std::pair<int, double>>> adj(nn);  // weight = sqrt(d2)
  std::vector<std::vector<std::pair<int, double>>> direct(nn);
  for (const auto& e : fg.edges) {
    adj[static_cast<std::size_t>(e.i)].emplace_back(e.j, std::sqrt(e.d2));
    adj[static_cast<std::size_t>(e.j)].emplace_back(e.i, std::sqrt(e.d2));
    direct[static_cast<std::size_t>(e.i)].emplace_back(e.j, e.d2);
    direct[static_cast<std::size_t>(e.j)].emplace_back(e.i, e.d2);
  }

  for (int s = 0; s < n; ++s) {
    std::vector<double> dist(nn, std::numeric_limits<double>::infinity());
    dist[static_cast<std::size_t>(s)] = 0.0;
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
    heap.emplace(0.0, s);
    while (!heap.empty()) {
      auto [d, u] = heap.top();
      heap.pop();
      if (d > dist[static_cast<std::size_t>(u)]) continue;
      for (auto [v, w] : adj[static_cast<std::size_t>(u)]) {
        const double nd = d + w;
        if (nd < dist[static_cast<std::size_t>(v)]) {
          dist[static_cast<std::size_t>(v)] = nd;
          heap.emplace(nd, v);
        }
      }
    }
    for (int t = 0; t < n; ++t) {
      if (t == s) {
        fg.d2[static_cast<std::size_t>(s) * nn + static_cast<std::size_t>(t)] = 0.0;
      } else if (std::isfinite(dist[static_cast<std::size_t>(t)])) {
        const double d = dist[static_cast<std::size_t>(t)];
        fg.d2[static_cast<std::size_t>(s) * nn + static_cast<std::size_t>(t)] = d * d;
      }
    }
  }

  // Edges keep their direct assignment even where a multi-hop path is
  // shorter; the matrix is a semimetric, not a metric.
  for (std::size_t i = 0; i < nn; ++i) {
    for (auto [j, dd2] : direct[i]) {
      fg.d2[i * nn + static_cast<std::size_t>(j)] = dd2;
    }
  }

  double dstar2 = 0.0;
  bool disconnected = false;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double v = fg.d2_at(i, j);
      if (std::isfinite(v)) {
        dstar2 = std::max(dstar2, v);
      } else {
        disconnected = true;
      }
    }
  }
  fg.d_g_star = std::sqrt(dstar2);
  if (disconnected) {
    std::cerr << "warning: neighborhood graph is disconnected; components are "
                 "embedded independently\n";
  }
}

}  // namespace detail

inline FluidGraph graph_distance_matrix(const FeatureMatrix& fm,
                                        const ConductivityTensor& K,
                                        const Neighborhoods& nbhd,
                                        DistanceTransform transform,
                                        double b0 = 1.0,
                                        VelocitySign sign = VelocitySign::magnitude,
                                        int threads = 1) {
  FluidGraph fg;
  fg.n_nodes = static_cast<int>(fm.n_rows);
  fg.nbhd = nbhd;
  fg.transform = transform;

  const std::size_t n = fm.n_rows;
  std::vector<std::vector<double>> p_dir(n);
  for (std::size_t i = 0; i < n; ++i) p_dir[i].resize(nbhd.adjacency[i].size());
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& ni = nbhd.adjacency[i];
    for (std::size_t r = 0; r < ni.size(); ++r) {
      if (ni.size() == 1) {
        // no competing neighbors to drift toward: indifferent split
        p_dir[i][r] = 0.5;
        continue;
      }
      const auto dp = v_b_plus_minus(static_cast<int>(i), ni[r], fm, K, nbhd, b0, sign);
      p_dir[i][r] = transition_probability(dp);
    }
  });

  // Unordered pair probability = mean of the available directed values.
  std::map<std::pair<int, int>, std::pair<double, int>> pooled;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ni = nbhd.adjacency[i];
    for (std::size_t r = 0; r < ni.size(); ++r) {
      auto key = ConductivityTensor::key(static_cast<int>(i), ni[r]);
      auto& slot = pooled[key];
      slot.first += p_dir[i][r];
      slot.second += 1;
    }
  }
  std::map<std::pair<int, int>, double> pair_d2;
  for (const auto& [key, acc] : pooled) {
    const double p = acc.first / static_cast<double>(acc.second);
    pair_d2[key] = transform == DistanceTransform::identity ? p : -std::log(p);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const auto& ni = nbhd.adjacency[i];
    for (std::size_t r = 0; r < ni.size(); ++r) {
      FluidEdge e;
      e.i = static_cast<int>(i);
      e.j = ni[r];
      e.p = p_dir[i][r];
      e.d2 = pair_d2.at(ConductivityTensor::key(e.i, e.j));
      fg.edges.push_back(e);
    }
  }

  detail::fill_all_pairs(fg);
  return fg;
}

inline FluidGraph FluidGraph::from_json(const nlohmann::json& in) {
  FluidGraph fg;
  fg.n_nodes = in.at("n").get<int>();
  fg.transform = distance_transform_from_string(in.at("transform").get<std::string>());
  fg.nbhd.adjacency.assign(static_cast<std::size_t>(fg.n_nodes), {});
  for (const auto& je : in.at("edges")) {
    FluidEdge e;
    e.i = je.at("i").get<int>();
    e.j = je.at("j").get<int>();
    e.p = je.at("p").get<double>();
    e.d2 = je.at("d2").get<double>();
    if (e.i < 0 || e.i >= fg.n_nodes || e.j < 0 || e.j >= fg.n_nodes) {
      throw std::runtime_error("graph edge endpoint out of range");
    }
    fg.edges.push_back(e);
    fg.nbhd.adjacency[static_cast<std::size_t>(e.i)].push_back(e.j);
  }
  std::size_t max_deg = 0;
  for (const auto& a : fg.nbhd.adjacency) max_deg = std::max(max_deg, a.size());
  fg.nbhd.k = static_cast<int>(max_deg);
  detail::fill_all_pairs(fg);
  const double d_star = in.value("d_star", fg.d_g_star);
  fg.d_g_star = d_star;
  return fg;
}

}  // namespace softmanifold
