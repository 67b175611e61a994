#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "softmanifold/common.hpp"
#include "softmanifold/feature_matrix.hpp"
#include "softmanifold/fluid_graph.hpp"
#include "softmanifold/manifold.hpp"
#include "softmanifold/rng.hpp"

namespace softmanifold {

enum class InitScheme { change_of_variables, random_ball };
enum class PairMode { all_pairs, neighbors_only };
enum class GradMode { finite_difference, analytic };

inline std::string to_string(InitScheme s) {
  return s == InitScheme::change_of_variables ? "change_of_variables" : "random_ball";
}
inline InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "change_of_variables") return InitScheme::change_of_variables;
  if (s == "random_ball") return InitScheme::random_ball;
  throw std::invalid_argument("unknown init scheme: " + s);
}
inline std::string to_string(PairMode m) {
  return m == PairMode::all_pairs ? "all" : "neighbors";
}
inline PairMode pair_mode_from_string(const std::string& s) {
  if (s == "all") return PairMode::all_pairs;
  if (s == "neighbors") return PairMode::neighbors_only;
  throw std::invalid_argument("unknown pair mode: " + s);
}
inline std::string to_string(GradMode m) {
  return m == GradMode::finite_difference ? "fd" : "analytic";
}
inline GradMode grad_mode_from_string(const std::string& s) {
  if (s == "fd") return GradMode::finite_difference;
  if (s == "analytic") return GradMode::analytic;
  throw std::invalid_argument("unknown grad mode: " + s);
}

struct EmbedConfig {
  int dim = 3;
  double kappa = 1.0;
  double eps_d = 1e-8;
  double eps_g = 1e-8;
  double lr = 0.05;
  int epochs = 200;
  int batch_pairs = 0;  // 0 = full sum over covered pairs
  std::uint64_t seed = 0;
  InitScheme init = InitScheme::change_of_variables;
  PairMode pair_mode = PairMode::all_pairs;
  GradMode grad = GradMode::finite_difference;
  double max_step = 0.1;   // per-node displacement cap per epoch
  double lr_decay = 9.0;   // lr_t = lr / (1 + lr_decay * t / epochs)

  double lr_at(int epoch) const {
    return lr / (1.0 + lr_decay * static_cast<double>(epoch) /
                           static_cast<double>(std::max(epochs, 1)));
  }

  void validate() const {
    if (dim < 2) throw std::invalid_argument("embedding dim must be >= 2");
    if (kappa < 0.0) throw std::invalid_argument("kappa must be >= 0");
    if (!(eps_d > 0.0) || !(eps_g > 0.0)) {
      throw std::invalid_argument("eps_d and eps_g must be > 0");
    }
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_pairs < 0) throw std::invalid_argument("batch_pairs must be >= 0");
    if (!(max_step > 0.0)) throw std::invalid_argument("max_step must be > 0");
    if (lr_decay < 0.0) throw std::invalid_argument("lr_decay must be >= 0");
  }

  nlohmann::ordered_json to_json() const {
    return {{"dim", dim},
            {"kappa", kappa},
            {"eps_d", eps_d},
            {"eps_g", eps_g},
            {"lr", lr},
            {"epochs", epochs},
            {"batch_pairs", batch_pairs},
            {"seed", seed},
            {"init", to_string(init)},
            {"pair_mode", to_string(pair_mode)},
            {"grad", to_string(grad)},
            {"max_step", max_step},
            {"lr_decay", lr_decay}};
  }

  static EmbedConfig from_json(const nlohmann::json& in) {
    EmbedConfig c;
    c.dim = in.value("dim", c.dim);
    c.kappa = in.value("kappa", c.kappa);
    c.eps_d = in.value("eps_d", c.eps_d);
    c.eps_g = in.value("eps_g", c.eps_g);
    c.lr = in.value("lr", c.lr);
    c.epochs = in.value("epochs", c.epochs);
    c.batch_pairs = in.value("batch_pairs", c.batch_pairs);
    c.seed = in.value("seed", c.seed);
    if (in.contains("init")) c.init = init_scheme_from_string(in.at("init"));
    if (in.contains("pair_mode")) c.pair_mode = pair_mode_from_string(in.at("pair_mode"));
    if (in.contains("grad")) c.grad = grad_mode_from_string(in.at("grad"));
    c.max_step = in.value("max_step", c.max_step);
    c.lr_decay = in.value("lr_decay", c.lr_decay);
    c.validate();
    return c;
  }
};

struct TraceEntry {
  int epoch = 0;
  double distortion = 0.0;
  double geometry = 0.0;
  double total = 0.0;
};

struct EmbeddingState {
  std::vector<Vec> positions;
  int epoch = 0;
  std::vector<TraceEntry> loss_trace;
  EmbedConfig config;
  std::uint64_t rng_seed = 0;
  bool aborted = false;
  std::string diagnostic;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out;
    out["dim"] = config.dim;
    out["seed"] = rng_seed;
    out["config"] = config.to_json();
    out["positions"] = nlohmann::ordered_json::array();
    for (const auto& u : positions) out["positions"].push_back(u);
    out["loss_trace"] = nlohmann::ordered_json::array();
    for (const auto& t : loss_trace) {
      out["loss_trace"].push_back({t.epoch, t.distortion, t.geometry, t.total});
    }
    return out;
  }

  static EmbeddingState from_json(const nlohmann::json& in) {
    EmbeddingState st;
    st.config = EmbedConfig::from_json(in.at("config"));
    st.rng_seed = in.at("seed").get<std::uint64_t>();
    for (const auto& ju : in.at("positions")) {
      st.positions.push_back(ju.get<Vec>());
    }
    for (const auto& jt : in.at("loss_trace")) {
      TraceEntry t;
      t.epoch = jt.at(0).get<int>();
      t.distortion = jt.at(1).get<double>();
      t.geometry = jt.at(2).get<double>();
      t.total = jt.at(3).get<double>();
      st.loss_trace.push_back(t);
    }
    st.epoch = static_cast<int>(st.loss_trace.size());
    return st;
  }
};

inline double triangle_area(double d1, double d2, double theta) {
  return 0.5 * d1 * d2 * std::sin(theta);
}

// Neighbors of i in ascending graph-distance order (index tie break);
// both area measures place neighbors radially in this order.
inline std::vector<int> neighbors_by_graph_distance(const FluidGraph& fg, int i) {
  auto nbrs = fg.nbhd.adjacency[static_cast<std::size_t>(i)];
  std::sort(nbrs.begin(), nbrs.end(), [&](int a, int b) {
    const double da = fg.d2_at(i, a);
    const double db = fg.d2_at(i, b);
    if (da != db) return da < db;
    return a < b;
  });
  return nbrs;
}

// Normalized fan area spanned by the neighborhood of i in the graph,
// relative to a neighborhood of maximal pairwise distances.
inline double graph_neighborhood_area(const FluidGraph& fg, int i) {
  const auto nbrs = neighbors_by_graph_distance(fg, i);
  const std::size_t K = nbrs.size();
  if (K <= 1) return 0.0;
  const double dstar = fg.d_g_star;
  if (!(dstar > 0.0)) return 0.0;
  if (K == 2) {
    // sin(theta) vanishes here but cancels between fan and bound.
    const double d0 = fg.graph_distance(i, nbrs[0]);
    const double d1 = fg.graph_distance(i, nbrs[1]);
    return (d0 * d1 + d1 * d0) / (static_cast<double>(K) * dstar * dstar);
  }
  const double theta = 2.0 * std::numbers::pi / static_cast<double>(K);
  double area = 0.0;
  for (std::size_t j = 0; j < K; ++j) {
    const double dj = fg.graph_distance(i, nbrs[j]);
    const double dn = fg.graph_distance(i, nbrs[(j + 1) % K]);
    area += triangle_area(dj, dn, theta);
  }
  const double max_area =
      0.5 * static_cast<double>(K) * dstar * dstar * std::sin(theta);
  return area / max_area;
}

inline double compute_phi_star(const std::vector<Vec>& positions) {
  double m = 0.0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      m = std::max(m, semimetric_distance(positions[i], positions[j]));
    }
  }
  m = std::min(m, std::numbers::pi);
  return std::max(m, 1e-9);
}

namespace detail {

// 1 - cos(phi) through the half-angle sine, stable for tiny phi.
inline double one_minus_cos(double phi) {
  const double s = std::sin(0.5 * phi);
  return 2.0 * s * s;
}

template <typename PosFn>
double manifold_area_impl(const FluidGraph& fg, int i, double phi_star, PosFn&& pos) {
  const auto nbrs = neighbors_by_graph_distance(fg, i);
  const std::size_t K = nbrs.size();
  if (K <= 1) return 0.0;
  const double theta = 2.0 * std::numbers::pi / static_cast<double>(K);
  std::vector<double> phis(K);
  for (std::size_t j = 0; j < K; ++j) {
    phis[j] = std::clamp(semimetric_distance(pos(i), pos(nbrs[j])), 0.0,
                         std::numbers::pi);
  }
  double area = 0.0;
  for (std::size_t j = 0; j < K; ++j) {
    area += theta * std::abs(std::cos(phis[j]) - std::cos(phis[(j + 1) % K]));
  }
  const double max_area = 2.0 * std::numbers::pi * one_minus_cos(phi_star);
  return area / max_area;
}

}  // namespace detail

// Normalized spherical-sector area spanned by the embedded neighborhood
// of i; the neighbor inclinations are the ball semimetric distances.
inline double manifold_neighborhood_area(const FluidGraph& fg,
                                         const std::vector<Vec>& positions,
                                         int i, double phi_star) {
  if (!(phi_star > 0.0) || phi_star > std::numbers::pi) {
    throw std::invalid_argument("phi_star must lie in (0, pi]");
  }
  return detail::manifold_area_impl(
      fg, i, phi_star, [&](int idx) -> const Vec& {
        return positions[static_cast<std::size_t>(idx)];
      });
}

struct NeighborhoodGeometry {
  int node = 0;
  double theta = 0.0;
  double graph_area_norm = 0.0;
  double manifold_area_norm = 0.0;
};

inline NeighborhoodGeometry neighborhood_geometry(const FluidGraph& fg,
                                                  const std::vector<Vec>& positions,
                                                  int i, double phi_star) {
  NeighborhoodGeometry g;
  g.node = i;
  const std::size_t K = fg.nbhd.adjacency[static_cast<std::size_t>(i)].size();
  g.theta = 2.0 * std::numbers::pi / static_cast<double>(std::max<std::size_t>(K, 1));
  g.graph_area_norm = graph_neighborhood_area(fg, i);
  g.manifold_area_norm = manifold_neighborhood_area(fg, positions, i, phi_star);
  return g;
}

// Canonical pair list the distortion loss runs over: every covered pair,
// or the undirected edge set in neighbors-only mode.
inline std::vector<std::pair<int, int>> covered_pairs(const FluidGraph& fg,
                                                      PairMode mode) {
  std::vector<std::pair<int, int>> out;
  if (mode == PairMode::all_pairs) {
    for (int i = 0; i < fg.n_nodes; ++i) {
      for (int j = i + 1; j < fg.n_nodes; ++j) {
        if (fg.pair_covered(i, j)) out.emplace_back(i, j);
      }
    }
  } else {
    std::set<std::pair<int, int>> s;
    for (const auto& e : fg.edges) s.insert(ConductivityTensor::key(e.i, e.j));
    out.assign(s.begin(), s.end());
  }
  return out;
}

inline double loss_distortion(const std::vector<Vec>& positions,
                              const FluidGraph& fg, double eps_d,
                              const std::vector<std::pair<int, int>>& pairs) {
  double s = 0.0;
  for (const auto& [a, b] : pairs) {
    const double ds = semimetric_distance(positions[static_cast<std::size_t>(a)],
                                          positions[static_cast<std::size_t>(b)]);
    s += std::abs(ds * ds / (fg.d2_at(a, b) + eps_d) - 1.0);
  }
  return s;
}

inline double loss_distortion(const std::vector<Vec>& positions,
                              const FluidGraph& fg, double eps_d,
                              PairMode mode = PairMode::all_pairs) {
  return loss_distortion(positions, fg, eps_d, covered_pairs(fg, mode));
}

// phi_star <= 0 requests a fresh recompute from the current positions.
inline double loss_geometry(const std::vector<Vec>& positions, const FluidGraph& fg,
                            double eps_g, double phi_star = -1.0) {
  const double ps = phi_star > 0.0 ? phi_star : compute_phi_star(positions);
  double s = 0.0;
  for (int i = 0; i < fg.n_nodes; ++i) {
    const double abar = graph_neighborhood_area(fg, i);
    const double mbar = manifold_neighborhood_area(fg, positions, i, ps);
    s += std::abs(mbar / (abar + eps_g) - 1.0);
  }
  return s;
}

struct LossParts {
  double distortion = 0.0;
  double geometry = 0.0;
  double total = 0.0;
};

inline LossParts total_loss(const std::vector<Vec>& positions, const FluidGraph& fg,
                            const EmbedConfig& cfg) {
  LossParts lp;
  lp.distortion = loss_distortion(positions, fg, cfg.eps_d, cfg.pair_mode);
  lp.geometry = loss_geometry(positions, fg, cfg.eps_g);
  lp.total = lp.distortion + cfg.kappa * lp.geometry;
  return lp;
}

inline double loss_distortion(const EmbeddingState& st, const FluidGraph& fg) {
  return loss_distortion(st.positions, fg, st.config.eps_d, st.config.pair_mode);
}
inline double loss_geometry(const EmbeddingState& st, const FluidGraph& fg) {
  return loss_geometry(st.positions, fg, st.config.eps_g);
}
inline LossParts total_loss(const EmbeddingState& st, const FluidGraph& fg) {
  return total_loss(st.positions, fg, st.config);
}

// Gradient of the semimetric with respect to both endpoints. Zero at
// coincident points, where the distance has a kink.
inline void semimetric_gradient(const Vec& u, const Vec& v, Vec& gu, Vec& gv) {
  gu.assign(u.size(), 0.0);
  gv.assign(v.size(), 0.0);
  const Vec delta = sub(u, v);
  const double n = norm(delta);
  if (n < 1e-12) return;
  const double su = std::sqrt(std::max(r_factor(u), 1e-300));
  const double sv = std::sqrt(std::max(r_factor(v), 1e-300));
  const double sn = std::sqrt(n);
  const double D = sn + su + sv;
  const double invD = 1.0 / D;
  const double nd2 = n / (D * D);
  for (std::size_t c = 0; c < u.size(); ++c) {
    const double dn = delta[c] / n;
    gu[c] = dn * invD - nd2 * (delta[c] / (2.0 * n * sn) - u[c] / (2.0 * su));
    gv[c] = -dn * invD - nd2 * (-delta[c] / (2.0 * n * sn) - v[c] / (2.0 * sv));
  }
}

namespace detail {

constexpr double kBallCap = 1.0 - 1e-6;
constexpr double kFdStep = 1e-5;

struct PairTerm {
  int a = 0;
  int b = 0;
  double dg2 = 0.0;
  std::uint64_t key = 0;
};

struct EmbedProblem {
  const FluidGraph& fg;
  EmbedConfig cfg;
  std::vector<PairTerm> all_pairs;
  std::vector<std::vector<int>> sorted_nbrs;
  std::vector<double> abar;
  std::vector<std::vector<int>> owners;  // geometry terms touched by a node

  EmbedProblem(const FeatureMatrix& fm, const FluidGraph& g, const EmbedConfig& c)
      : fg(g), cfg(c) {
    std::vector<std::uint64_t> id_hash(fm.n_rows);
    for (std::size_t i = 0; i < fm.n_rows; ++i) id_hash[i] = fnv1a(fm.row_ids[i]);
    for (const auto& [a, b] : covered_pairs(fg, cfg.pair_mode)) {
      PairTerm t;
      t.a = a;
      t.b = b;
      t.dg2 = fg.d2_at(a, b);
      const std::uint64_t ha = id_hash[static_cast<std::size_t>(a)];
      const std::uint64_t hb = id_hash[static_cast<std::size_t>(b)];
      t.key = hash_values(0x70616972ULL, std::min(ha, hb), std::max(ha, hb));
      all_pairs.push_back(t);
    }
    const int n = fg.n_nodes;
    sorted_nbrs.resize(static_cast<std::size_t>(n));
    abar.resize(static_cast<std::size_t>(n));
    std::vector<std::set<int>> own(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      sorted_nbrs[static_cast<std::size_t>(i)] = neighbors_by_graph_distance(fg, i);
      abar[static_cast<std::size_t>(i)] = graph_neighborhood_area(fg, i);
      if (sorted_nbrs[static_cast<std::size_t>(i)].size() > 1) {
        own[static_cast<std::size_t>(i)].insert(i);
        for (int j : sorted_nbrs[static_cast<std::size_t>(i)]) {
          own[static_cast<std::size_t>(j)].insert(i);
        }
      }
    }
    owners.resize(static_cast<std::size_t>(n));
    for (int x = 0; x < n; ++x) {
      owners[static_cast<std::size_t>(x)].assign(own[static_cast<std::size_t>(x)].begin(),
                                                 own[static_cast<std::size_t>(x)].end());
    }
  }

  template <typename PosFn>
  double geometry_term(int i, double phi_star, PosFn&& pos) const {
    const auto& nbrs = sorted_nbrs[static_cast<std::size_t>(i)];
    const std::size_t K = nbrs.size();
    double mbar = 0.0;
    if (K > 1) {
      const double theta = 2.0 * std::numbers::pi / static_cast<double>(K);
      double area = 0.0;
      std::vector<double> phis(K);
      for (std::size_t j = 0; j < K; ++j) {
        phis[j] = semimetric_distance(pos(i), pos(nbrs[j]));
      }
      for (std::size_t j = 0; j < K; ++j) {
        area += theta * std::abs(std::cos(phis[j]) - std::cos(phis[(j + 1) % K]));
      }
      mbar = area / (2.0 * std::numbers::pi * one_minus_cos(phi_star));
    }
    return std::abs(mbar / (abar[static_cast<std::size_t>(i)] + cfg.eps_g) - 1.0);
  }
};

}  // namespace detail

inline std::vector<Vec> initial_positions(const FeatureMatrix& fm,
                                          const FluidGraph& fg,
                                          const EmbedConfig& cfg) {
  const std::size_t n = fm.n_rows;
  const std::size_t dim = static_cast<std::size_t>(cfg.dim);
  std::vector<Vec> pos(n, Vec(dim, 0.0));

  if (cfg.init == InitScheme::random_ball) {
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(hash_values(cfg.seed, fnv1a(fm.row_ids[i]), 0xba11ULL));
      Vec dir(dim);
      double nn = 0.0;
      do {
        for (auto& v : dir) v = rng.normal();
        nn = norm(dir);
      } while (nn < 1e-12);
      const double radius =
          0.5 * std::pow(rng.uniform_open(), 1.0 / static_cast<double>(dim));
      for (std::size_t c = 0; c < dim; ++c) pos[i][c] = dir[c] * radius / nn;
    }
    return pos;
  }

  // Feature-driven start: masked-mean completion and the ball map. The
  // completed values are used for initialization geometry only; the loss
  // never sees them.
  std::vector<double> col_mean(fm.n_cols, 0.0);
  for (std::size_t f = 0; f < fm.n_cols; ++f) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!fm.is_observed(i, f)) continue;
      s += fm.at(i, f);
      ++c;
    }
    col_mean[f] = c > 0 ? s / static_cast<double>(c) : 0.0;
  }
  std::vector<double> mean_p(n, 0.0);
  std::vector<int> deg(n, 0);
  for (const auto& e : fg.edges) {
    mean_p[static_cast<std::size_t>(e.i)] += e.p;
    deg[static_cast<std::size_t>(e.i)] += 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (deg[i] > 0) mean_p[i] /= static_cast<double>(deg[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Vec xhat(dim, 0.0);
    for (std::size_t c = 0; c < dim && c < fm.n_cols; ++c) {
      xhat[c] = fm.is_observed(i, c) ? fm.at(i, c) : col_mean[c];
    }
    const double s_over_v = std::max(mean_p[i], 1e-6);
    pos[i] = project_to_ball(change_of_variables(xhat, s_over_v), detail::kBallCap);
  }
  return pos;
}

// Minimizes distortion + kappa * geometry by SGD on the ball. Gradients
// are central finite differences by default; the analytic path computes
// the same derivative termwise. Deterministic for a fixed seed and any
// thread count: worker output goes to preassigned slots and is reduced in
// canonical order.
inline EmbeddingState embed(const FeatureMatrix& fm, const FluidGraph& fg,
                            const EmbedConfig& cfg, int threads = 1) {
  cfg.validate();
  if (static_cast<int>(fm.n_rows) != fg.n_nodes) {
    throw std::invalid_argument("feature matrix and graph disagree on node count");
  }
  EmbeddingState st;
  st.config = cfg;
  st.rng_seed = cfg.seed;
  st.positions = initial_positions(fm, fg, cfg);
  if (cfg.epochs == 0) return st;

  detail::EmbedProblem prob(fm, fg, cfg);
  const std::size_t n = fm.n_rows;
  const std::size_t dim = static_cast<std::size_t>(cfg.dim);
  const bool use_geometry = cfg.kappa > 0.0;

  std::vector<int> batch;  // indices into prob.all_pairs
  std::vector<std::vector<int>> pairs_of(n);
  std::vector<Vec> grad(n, Vec(dim, 0.0));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<Vec> before = st.positions;
    const double phi_star = use_geometry ? compute_phi_star(st.positions) : 1.0;

    batch.clear();
    if (cfg.batch_pairs == 0 ||
        static_cast<std::size_t>(cfg.batch_pairs) >= prob.all_pairs.size()) {
      batch.resize(prob.all_pairs.size());
      for (std::size_t t = 0; t < batch.size(); ++t) batch[t] = static_cast<int>(t);
    } else {
      const double prob_incl = static_cast<double>(cfg.batch_pairs) /
                               static_cast<double>(prob.all_pairs.size());
      for (std::size_t t = 0; t < prob.all_pairs.size(); ++t) {
        Rng draw(hash_values(cfg.seed, 0xba7c4ULL,
                             static_cast<std::uint64_t>(epoch),
                             prob.all_pairs[t].key));
        if (draw.uniform01() < prob_incl) batch.push_back(static_cast<int>(t));
      }
    }
    for (auto& v : pairs_of) v.clear();
    for (int t : batch) {
      pairs_of[static_cast<std::size_t>(prob.all_pairs[static_cast<std::size_t>(t)].a)]
          .push_back(t);
      pairs_of[static_cast<std::size_t>(prob.all_pairs[static_cast<std::size_t>(t)].b)]
          .push_back(t);
    }

    if (cfg.grad == GradMode::finite_difference) {
      parallel_for(n, threads, [&](std::size_t x) {
        Vec override_u = st.positions[x];
        auto local = [&](const Vec& ov) {
          auto pos = [&](int idx) -> const Vec& {
            return static_cast<std::size_t>(idx) == x
                       ? ov
                       : st.positions[static_cast<std::size_t>(idx)];
          };
          double s = 0.0;
          for (int t : pairs_of[x]) {
            const auto& pt = prob.all_pairs[static_cast<std::size_t>(t)];
            const double ds = semimetric_distance(pos(pt.a), pos(pt.b));
            s += std::abs(ds * ds / (pt.dg2 + cfg.eps_d) - 1.0);
          }
          if (use_geometry) {
            for (int i : prob.owners[x]) {
              s += cfg.kappa * prob.geometry_term(i, phi_star, pos);
            }
          }
          return s;
        };
        for (std::size_t c = 0; c < dim; ++c) {
          const double orig = override_u[c];
          override_u[c] = orig + detail::kFdStep;
          const double f1 = local(override_u);
          override_u[c] = orig - detail::kFdStep;
          const double f2 = local(override_u);
          override_u[c] = orig;
          grad[x][c] = (f1 - f2) / (2.0 * detail::kFdStep);
        }
      });
    } else {
      for (auto& g : grad) std::fill(g.begin(), g.end(), 0.0);
      // Pair terms, slot per batch entry, canonical reduce afterwards.
      std::vector<std::pair<Vec, Vec>> pair_slots(batch.size());
      parallel_for(batch.size(), threads, [&](std::size_t bi) {
        const auto& pt = prob.all_pairs[static_cast<std::size_t>(batch[bi])];
        const Vec& ua = st.positions[static_cast<std::size_t>(pt.a)];
        const Vec& ub = st.positions[static_cast<std::size_t>(pt.b)];
        Vec gu, gv;
        semimetric_gradient(ua, ub, gu, gv);
        const double ds = semimetric_distance(ua, ub);
        const double q = ds * ds / (pt.dg2 + cfg.eps_d) - 1.0;
        const double c = (q > 0.0 ? 1.0 : (q < 0.0 ? -1.0 : 0.0)) * 2.0 * ds /
                         (pt.dg2 + cfg.eps_d);
        for (auto& v : gu) v *= c;
        for (auto& v : gv) v *= c;
        pair_slots[bi] = {std::move(gu), std::move(gv)};
      });
      for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        const auto& pt = prob.all_pairs[static_cast<std::size_t>(batch[bi])];
        for (std::size_t c = 0; c < dim; ++c) {
          grad[static_cast<std::size_t>(pt.a)][c] += pair_slots[bi].first[c];
          grad[static_cast<std::size_t>(pt.b)][c] += pair_slots[bi].second[c];
        }
      }
      if (use_geometry) {
        std::vector<std::vector<std::pair<int, Vec>>> geo_slots(n);
        parallel_for(n, threads, [&](std::size_t ii) {
          const int i = static_cast<int>(ii);
          const auto& nbrs = prob.sorted_nbrs[ii];
          const std::size_t K = nbrs.size();
          if (K <= 1) return;
          const double theta = 2.0 * std::numbers::pi / static_cast<double>(K);
          const double astar =
              2.0 * std::numbers::pi * detail::one_minus_cos(phi_star);
          std::vector<double> phis(K);
          for (std::size_t j = 0; j < K; ++j) {
            phis[j] = semimetric_distance(st.positions[ii],
                                          st.positions[static_cast<std::size_t>(nbrs[j])]);
          }
          double area = 0.0;
          for (std::size_t j = 0; j < K; ++j) {
            area += theta * std::abs(std::cos(phis[j]) - std::cos(phis[(j + 1) % K]));
          }
          const double mbar = area / astar;
          const double q = mbar / (prob.abar[ii] + cfg.eps_g) - 1.0;
          if (q == 0.0) return;
          const double coef = (q > 0.0 ? 1.0 : -1.0) * theta /
                              ((prob.abar[ii] + cfg.eps_g) * astar);
          auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
          Vec gu, gv;
          for (std::size_t j = 0; j < K; ++j) {
            const std::size_t jp = (j + K - 1) % K;
            const double s_j = sgn(std::cos(phis[j]) - std::cos(phis[(j + 1) % K]));
            const double s_jp = sgn(std::cos(phis[jp]) - std::cos(phis[j]));
            const double dsum = -s_j * std::sin(phis[j]) + s_jp * std::sin(phis[j]);
            if (dsum == 0.0) continue;
            semimetric_gradient(st.positions[ii],
                                st.positions[static_cast<std::size_t>(nbrs[j])], gu, gv);
            Vec gi(dim), gn(dim);
            for (std::size_t c = 0; c < dim; ++c) {
              gi[c] = coef * dsum * gu[c];
              gn[c] = coef * dsum * gv[c];
            }
            geo_slots[ii].emplace_back(i, std::move(gi));
            geo_slots[ii].emplace_back(nbrs[j], std::move(gn));
          }
        });
        for (std::size_t ii = 0; ii < n; ++ii) {
          for (const auto& [node, g] : geo_slots[ii]) {
            for (std::size_t c = 0; c < dim; ++c) {
              grad[static_cast<std::size_t>(node)][c] += cfg.kappa * g[c];
            }
          }
        }
      }
    }

    const double lr_t = cfg.lr_at(epoch);
    for (std::size_t x = 0; x < n; ++x) {
      Vec step(dim);
      for (std::size_t c = 0; c < dim; ++c) step[c] = lr_t * grad[x][c];
      const double sn = norm(step);
      if (sn > cfg.max_step) {
        const double sc = cfg.max_step / sn;
        for (auto& v : step) v *= sc;
      }
      for (std::size_t c = 0; c < dim; ++c) st.positions[x][c] -= step[c];
      st.positions[x] = project_to_ball(std::move(st.positions[x]), detail::kBallCap);
    }

    TraceEntry te;
    te.epoch = epoch;
    te.distortion = loss_distortion(st.positions, fg, cfg.eps_d, cfg.pair_mode);
    te.geometry = loss_geometry(st.positions, fg, cfg.eps_g);
    te.total = te.distortion + cfg.kappa * te.geometry;
    if (!std::isfinite(te.total)) {
      st.positions = before;
      st.aborted = true;
      st.diagnostic = "non-finite loss at epoch " + std::to_string(epoch);
      std::cerr << "warning: " << st.diagnostic << "; returning last finite state\n";
      break;
    }
    st.loss_trace.push_back(te);
    st.epoch = epoch + 1;
  }
  return st;
}

}  // namespace softmanifold
