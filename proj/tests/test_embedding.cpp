#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "softmanifold/embedding.hpp"
#include "softmanifold/evaluation.hpp"
#include "softmanifold/rng.hpp"
#include "oracles.hpp"

using namespace softmanifold;
using Catch::Approx;

namespace {

struct SmallInstance {
  FeatureMatrix fm;
  FluidGraph fg;
  std::vector<Vec> positions;
};

SmallInstance make_instance(std::size_t n, int k, std::uint64_t seed, int dim = 3,
                            DistanceTransform tf = DistanceTransform::neg_log) {
  SmallInstance inst;
  inst.fm = generate_synthetic(n, 5, 3, 0.15, seed);
  const Neighborhoods nb = knn_neighborhoods(inst.fm, k);
  const ConductivityTensor K = build_conductivity(inst.fm, nb, 1.0);
  inst.fg = graph_distance_matrix(inst.fm, K, nb, tf);
  Rng rng(hash_values(seed, 0x905ULL));
  inst.positions.resize(n);
  for (auto& u : inst.positions) {
    u.resize(dim);
    double nn;
    do {
      for (auto& v : u) v = 2.0 * rng.uniform01() - 1.0;
      nn = norm(u);
    } while (nn >= 0.93);
  }
  return inst;
}

oracle::DistFn dist_fn(const FluidGraph& fg) {
  return [&fg](int a, int b) { return fg.d2_at(a, b); };
}

FeatureMatrix permuted(const FeatureMatrix& fm, const std::vector<std::size_t>& perm) {
  FeatureMatrix out = fm;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t f = 0; f < fm.n_cols; ++f) {
      out.values[i * fm.n_cols + f] = fm.values[perm[i] * fm.n_cols + f];
      out.observed[i * fm.n_cols + f] = fm.observed[perm[i] * fm.n_cols + f];
    }
    out.row_ids[i] = fm.row_ids[perm[i]];
    if (fm.has_labels()) out.labels[i] = fm.labels[perm[i]];
  }
  return out;
}

}  // namespace

TEST_CASE("triangle_area") {
  CHECK(triangle_area(1.0, 1.0, std::numbers::pi / 3.0) ==
        Approx(std::sqrt(3.0) / 4.0).epsilon(1e-12));
  CHECK(triangle_area(2.0, 3.0, std::numbers::pi) == Approx(0.0).margin(1e-12));
  CHECK(triangle_area(0.0, 5.0, 1.0) == 0.0);
}

TEST_CASE("graph neighborhood area") {
  SECTION("worked three-neighbor fan") {
    // distances (1, 1, 2) with global max 2
    FluidGraph fg;
    fg.n_nodes = 4;
    fg.nbhd.k = 3;
    fg.nbhd.adjacency = {{1, 2, 3}, {0}, {0}, {0}};
    fg.transform = DistanceTransform::identity;
    constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
    fg.d2.assign(16, kNaN);
    auto set = [&](int i, int j, double d2) {
      fg.d2[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(j)] = d2;
      fg.d2[static_cast<std::size_t>(j) * 4 + static_cast<std::size_t>(i)] = d2;
    };
    for (int i = 0; i < 4; ++i) fg.d2[static_cast<std::size_t>(i) * 4 + i] = 0.0;
    set(0, 1, 1.0);
    set(0, 2, 1.0);
    set(0, 3, 4.0);
    set(1, 2, 4.0);
    set(1, 3, 4.0);
    set(2, 3, 4.0);
    fg.d_g_star = 2.0;
    CHECK(graph_neighborhood_area(fg, 0) == Approx(5.0 / 12.0).margin(1e-10));
    // degree-one nodes span nothing
    CHECK(graph_neighborhood_area(fg, 1) == 0.0);
  }
  SECTION("uniform maximal distances saturate at 1") {
    FluidGraph fg;
    fg.n_nodes = 4;
    fg.nbhd.k = 3;
    fg.nbhd.adjacency = {{1, 2, 3}, {0}, {0}, {0}};
    constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
    fg.d2.assign(16, kNaN);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        fg.d2[static_cast<std::size_t>(i) * 4 + j] = i == j ? 0.0 : 2.25;
      }
    }
    fg.d_g_star = 1.5;
    CHECK(graph_neighborhood_area(fg, 0) == Approx(1.0).margin(1e-12));
  }
  SECTION("normalized area stays in [0,1] on random graphs") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const SmallInstance inst = make_instance(12, 3 + static_cast<int>(seed % 3), seed);
      for (int i = 0; i < inst.fg.n_nodes; ++i) {
        const double a = graph_neighborhood_area(inst.fg, i);
        REQUIRE(a >= 0.0);
        REQUIRE(a <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("manifold neighborhood area") {
  SECTION("equal inclinations collapse the sector sum") {
    FluidGraph fg;
    fg.n_nodes = 3;
    fg.nbhd.k = 2;
    fg.nbhd.adjacency = {{1, 2}, {0}, {0}};
    fg.d2.assign(9, 1.0);
    for (int i = 0; i < 3; ++i) fg.d2[static_cast<std::size_t>(i) * 3 + i] = 0.0;
    fg.d_g_star = 1.0;
    // place the two neighbors at the same distance from node 0
    std::vector<Vec> pos{{0.0, 0.0}, {0.5, 0.0}, {-0.5, 0.0}};
    CHECK(manifold_neighborhood_area(fg, pos, 0, 1.0) == Approx(0.0).margin(1e-12));
  }
  SECTION("sector area worked value") {
    // theta = pi/3 and inclinations (0, pi/2) give one sector of size pi/3;
    // the area helper sums |cos spread| over the circular pairs.
    const double theta = std::numbers::pi / 3.0;
    const double sector = theta * std::abs(std::cos(0.0) - std::cos(std::numbers::pi / 2.0));
    CHECK(sector == Approx(1.0471975511965976).epsilon(1e-12));
  }
  SECTION("full-sphere bound at phi_star = pi") {
    const double astar = 2.0 * std::numbers::pi *
                         (1.0 - std::cos(std::numbers::pi));
    CHECK(astar == Approx(4.0 * std::numbers::pi).epsilon(1e-12));
  }
  SECTION("nonnegative and bounded by one") {
    for (std::uint64_t seed = 20; seed < 26; ++seed) {
      const SmallInstance inst = make_instance(10, 4, seed);
      const double ps = compute_phi_star(inst.positions);
      for (int i = 0; i < inst.fg.n_nodes; ++i) {
        const double a = manifold_neighborhood_area(inst.fg, inst.positions, i, ps);
        REQUIRE(a >= 0.0);
        REQUIRE(a <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("loss values against brute force") {
  SECTION("distortion loss reference cases") {
    const SmallInstance inst = make_instance(8, 3, 42);
    // positions equal to a scaled layout whose pairwise semimetric matches
    // nothing special: check the two arithmetic identities instead
    FluidGraph fg = inst.fg;
    std::vector<Vec> pos = inst.positions;
    const auto pairs = covered_pairs(fg, PairMode::all_pairs);
    // d_s == d_g on every pair => zero loss (use eps_d = tiny, fabricate d2)
    for (const auto& [a, b] : pairs) {
      const double ds = semimetric_distance(pos[static_cast<std::size_t>(a)],
                                            pos[static_cast<std::size_t>(b)]);
      fg.d2[static_cast<std::size_t>(a) * fg.n_nodes + b] = ds * ds;
      fg.d2[static_cast<std::size_t>(b) * fg.n_nodes + a] = ds * ds;
    }
    CHECK(loss_distortion(pos, fg, 1e-300, PairMode::all_pairs) ==
          Approx(0.0).margin(1e-9));
    // doubling d_s^2 against d_g^2 costs exactly 1 per pair
    for (const auto& [a, b] : pairs) {
      fg.d2[static_cast<std::size_t>(a) * fg.n_nodes + b] /= 2.0;
      fg.d2[static_cast<std::size_t>(b) * fg.n_nodes + a] /= 2.0;
    }
    CHECK(loss_distortion(pos, fg, 1e-300, PairMode::all_pairs) ==
          Approx(static_cast<double>(pairs.size())).epsilon(1e-9));
  }
  SECTION("loss and area pipelines match the oracle on twenty instances") {
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
      const SmallInstance inst = make_instance(6 + seed % 7, 3, seed);
      const auto& fg = inst.fg;
      const auto& pos = inst.positions;
      const auto dg2 = dist_fn(fg);
      const double eps = 1e-8;

      const double ld = loss_distortion(pos, fg, eps, PairMode::all_pairs);
      const double ld_oracle =
          oracle::loss_distortion(pos, dg2, covered_pairs(fg, PairMode::all_pairs), eps);
      REQUIRE(ld == Approx(ld_oracle).margin(1e-10));

      const double lg = loss_geometry(pos, fg, eps);
      const double lg_oracle =
          oracle::loss_geometry(pos, fg.nbhd.adjacency, dg2, fg.d_g_star, eps);
      REQUIRE(lg == Approx(lg_oracle).margin(1e-10));

      const double ps = compute_phi_star(pos);
      for (int i = 0; i < fg.n_nodes; ++i) {
        REQUIRE(graph_neighborhood_area(fg, i) ==
                Approx(oracle::graph_area(i, fg.nbhd.adjacency[static_cast<std::size_t>(i)],
                                          dg2, fg.d_g_star))
                    .margin(1e-10));
        REQUIRE(manifold_neighborhood_area(fg, pos, i, ps) ==
                Approx(oracle::manifold_area(
                           i, fg.nbhd.adjacency[static_cast<std::size_t>(i)], dg2, pos, ps))
                    .margin(1e-10));
      }
    }
  }
}

TEST_CASE("neighborhood geometry summary") {
  const SmallInstance inst = make_instance(10, 4, 61);
  const double ps = compute_phi_star(inst.positions);
  for (int i = 0; i < inst.fg.n_nodes; ++i) {
    const NeighborhoodGeometry g =
        neighborhood_geometry(inst.fg, inst.positions, i, ps);
    CHECK(g.node == i);
    CHECK(g.theta == Approx(2.0 * std::numbers::pi /
                            inst.fg.nbhd.adjacency[static_cast<std::size_t>(i)].size()));
    CHECK(g.graph_area_norm == Approx(graph_neighborhood_area(inst.fg, i)));
    CHECK(g.manifold_area_norm >= 0.0);
  }
}

TEST_CASE("total loss arithmetic") {
  const SmallInstance inst = make_instance(8, 3, 77);
  EmbedConfig cfg;
  cfg.dim = 3;
  cfg.kappa = 2.0;
  const LossParts lp = total_loss(inst.positions, inst.fg, cfg);
  CHECK(lp.total == Approx(lp.distortion + 2.0 * lp.geometry).epsilon(1e-12));
  EmbedConfig cfg0 = cfg;
  cfg0.kappa = 0.0;
  CHECK(total_loss(inst.positions, inst.fg, cfg0).total ==
        Approx(lp.distortion).epsilon(1e-12));
}

TEST_CASE("analytic gradient matches central differences") {
  int checked = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 300; seed < 325; ++seed) {
    const SmallInstance inst = make_instance(8, 3, seed);
    for (int variant = 0; variant < 4; ++variant) {
      Rng rng(hash_values(seed, static_cast<std::uint64_t>(variant)));
      std::vector<Vec> pos = inst.positions;
      for (auto& u : pos) {
        for (auto& v : u) v += 0.05 * (rng.uniform01() - 0.5);
        u = project_to_ball(std::move(u), 0.95);
      }
      EmbedConfig cfg;
      cfg.dim = 3;
      cfg.kappa = variant % 2 == 0 ? 1.0 : 0.4;
      const double phi_star = compute_phi_star(pos);
      const auto pairs = covered_pairs(inst.fg, PairMode::all_pairs);

      auto full_loss = [&](const std::vector<Vec>& p) {
        double s = loss_distortion(p, inst.fg, cfg.eps_d, pairs);
        s += cfg.kappa * loss_geometry(p, inst.fg, cfg.eps_g, phi_star);
        return s;
      };

      // analytic gradient assembled termwise
      const std::size_t n = pos.size();
      std::vector<Vec> ga(n, Vec(3, 0.0));
      for (const auto& [a, b] : pairs) {
        Vec gu, gv;
        semimetric_gradient(pos[static_cast<std::size_t>(a)],
                            pos[static_cast<std::size_t>(b)], gu, gv);
        const double ds = semimetric_distance(pos[static_cast<std::size_t>(a)],
                                              pos[static_cast<std::size_t>(b)]);
        const double q = ds * ds / (inst.fg.d2_at(a, b) + cfg.eps_d) - 1.0;
        const double c =
            (q > 0 ? 1.0 : (q < 0 ? -1.0 : 0.0)) * 2.0 * ds / (inst.fg.d2_at(a, b) + cfg.eps_d);
        for (int cdim = 0; cdim < 3; ++cdim) {
          ga[static_cast<std::size_t>(a)][cdim] += c * gu[cdim];
          ga[static_cast<std::size_t>(b)][cdim] += c * gv[cdim];
        }
      }
      for (int i = 0; i < inst.fg.n_nodes; ++i) {
        const auto nbrs = neighbors_by_graph_distance(inst.fg, i);
        const std::size_t K = nbrs.size();
        if (K <= 1) continue;
        const double theta = 2.0 * std::numbers::pi / static_cast<double>(K);
        const double s_half = std::sin(0.5 * phi_star);
        const double astar = 4.0 * std::numbers::pi * s_half * s_half;
        std::vector<double> phis(K);
        for (std::size_t j = 0; j < K; ++j) {
          phis[j] = semimetric_distance(pos[static_cast<std::size_t>(i)],
                                        pos[static_cast<std::size_t>(nbrs[j])]);
        }
        double area = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
          area += theta * std::abs(std::cos(phis[j]) - std::cos(phis[(j + 1) % K]));
        }
        const double abar = graph_neighborhood_area(inst.fg, i);
        const double q = area / astar / (abar + cfg.eps_g) - 1.0;
        if (q == 0.0) continue;
        const double coef = (q > 0 ? 1.0 : -1.0) * theta / ((abar + cfg.eps_g) * astar);
        auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
        for (std::size_t j = 0; j < K; ++j) {
          const std::size_t jp = (j + K - 1) % K;
          const double s_j = sgn(std::cos(phis[j]) - std::cos(phis[(j + 1) % K]));
          const double s_jp = sgn(std::cos(phis[jp]) - std::cos(phis[j]));
          const double dsum = (-s_j + s_jp) * std::sin(phis[j]);
          if (dsum == 0.0) continue;
          Vec gu, gv;
          semimetric_gradient(pos[static_cast<std::size_t>(i)],
                              pos[static_cast<std::size_t>(nbrs[j])], gu, gv);
          for (int cdim = 0; cdim < 3; ++cdim) {
            ga[static_cast<std::size_t>(i)][cdim] += cfg.kappa * coef * dsum * gu[cdim];
            ga[static_cast<std::size_t>(nbrs[j])][cdim] +=
                cfg.kappa * coef * dsum * gv[cdim];
          }
        }
      }

      // central differences of the full loss
      double max_abs = 0.0;
      double max_err = 0.0;
      const double h = 1e-5;
      std::vector<Vec> work = pos;
      for (std::size_t x = 0; x < n; ++x) {
        for (int cdim = 0; cdim < 3; ++cdim) {
          const double orig = work[x][cdim];
          work[x][cdim] = orig + h;
          const double f1 = full_loss(work);
          work[x][cdim] = orig - h;
          const double f2 = full_loss(work);
          work[x][cdim] = orig;
          const double fd = (f1 - f2) / (2.0 * h);
          max_abs = std::max(max_abs, std::abs(fd));
          max_err = std::max(max_err, std::abs(fd - ga[x][static_cast<std::size_t>(cdim)]));
        }
      }
      const double rel = max_err / std::max(1.0, max_abs);
      worst = std::max(worst, rel);
      ++checked;
    }
  }
  REQUIRE(checked == 100);
  CHECK(worst < 1e-4);
}

TEST_CASE("embed basics") {
  const FeatureMatrix fm = generate_synthetic(12, 5, 3, 0.1, 9);
  const Neighborhoods nb = knn_neighborhoods(fm, 3);
  const ConductivityTensor K = build_conductivity(fm, nb, 1.0);
  const FluidGraph fg = graph_distance_matrix(fm, K, nb, DistanceTransform::neg_log);

  SECTION("zero epochs returns the initialization") {
    EmbedConfig cfg;
    cfg.dim = 3;
    cfg.epochs = 0;
    cfg.seed = 5;
    const EmbeddingState st = embed(fm, fg, cfg);
    CHECK(st.positions == initial_positions(fm, fg, cfg));
    CHECK(st.loss_trace.empty());
  }
  SECTION("all positions stay strictly inside the ball") {
    EmbedConfig cfg;
    cfg.dim = 3;
    cfg.epochs = 30;
    cfg.lr = 0.1;
    cfg.seed = 5;
    const EmbeddingState st = embed(fm, fg, cfg);
    for (const auto& u : st.positions) {
      REQUIRE(norm(u) <= 1.0 - 1e-6 + 1e-12);
    }
    CHECK(st.loss_trace.size() == 30);
  }
  SECTION("identical seeds give identical traces and positions") {
    EmbedConfig cfg;
    cfg.dim = 2;
    cfg.epochs = 15;
    cfg.batch_pairs = 20;
    cfg.seed = 77;
    const EmbeddingState a = embed(fm, fg, cfg);
    const EmbeddingState b = embed(fm, fg, cfg);
    REQUIRE(a.positions == b.positions);
    REQUIRE(a.loss_trace.size() == b.loss_trace.size());
    for (std::size_t t = 0; t < a.loss_trace.size(); ++t) {
      REQUIRE(a.loss_trace[t].total == b.loss_trace[t].total);
    }
    // thread count must not matter
    const EmbeddingState c = embed(fm, fg, cfg, 4);
    REQUIRE(a.positions == c.positions);
  }
  SECTION("random-ball initialization is seeded and interior") {
    EmbedConfig cfg;
    cfg.dim = 4;
    cfg.epochs = 0;
    cfg.init = InitScheme::random_ball;
    cfg.seed = 3;
    const EmbeddingState a = embed(fm, fg, cfg);
    const EmbeddingState b = embed(fm, fg, cfg);
    REQUIRE(a.positions == b.positions);
    for (const auto& u : a.positions) REQUIRE(norm(u) <= 0.5 + 1e-12);
  }
  SECTION("analytic and finite-difference modes take the same first step") {
    EmbedConfig fd;
    fd.dim = 3;
    fd.epochs = 1;
    fd.seed = 21;
    fd.grad = GradMode::finite_difference;
    EmbedConfig an = fd;
    an.grad = GradMode::analytic;
    const EmbeddingState sfd = embed(fm, fg, fd);
    const EmbeddingState san = embed(fm, fg, an);
    for (std::size_t i = 0; i < sfd.positions.size(); ++i) {
      for (int c = 0; c < 3; ++c) {
        REQUIRE(sfd.positions[i][static_cast<std::size_t>(c)] ==
                Approx(san.positions[i][static_cast<std::size_t>(c)]).margin(1e-3));
      }
    }
  }
}

TEST_CASE("two-node problem reaches the graph distance") {
  FeatureMatrix fm;
  fm.n_rows = 2;
  fm.n_cols = 2;
  fm.values = {0.0, 0.0, 1.0, 1.0};
  fm.observed.assign(4, 1);
  fm.row_ids = {"r0", "r1"};
  const Neighborhoods nb = knn_neighborhoods(fm, 1);
  const ConductivityTensor K = build_conductivity(fm, nb, 1.0);
  const FluidGraph fg =
      graph_distance_matrix(fm, K, nb, DistanceTransform::identity);
  REQUIRE(fg.d2_at(0, 1) == Approx(0.5).margin(1e-12));

  EmbedConfig cfg;
  cfg.dim = 2;
  cfg.kappa = 0.0;  // single-degree nodes make the geometry term constant
  cfg.epochs = 400;
  cfg.lr = 0.02;
  cfg.seed = 2;
  cfg.init = InitScheme::random_ball;
  const EmbeddingState st = embed(fm, fg, cfg);
  const double ds = semimetric_distance(st.positions[0], st.positions[1]);
  CHECK(ds * ds == Approx(0.5).epsilon(0.05));

  // scalar oracle: symmetric two-point layout (-a, 0), (a, 0)
  double best_a = 0.0, best_val = 1e9;
  for (double a = 0.0; a < 0.999; a += 1e-4) {
    const Vec u1{-a, 0.0};
    const Vec u2{a, 0.0};
    const double d = semimetric_distance(u1, u2);
    const double val = std::abs(d * d / (0.5 + cfg.eps_d) - 1.0);
    if (val < best_val) {
      best_val = val;
      best_a = a;
    }
  }
  const double oracle_d =
      semimetric_distance({-best_a, 0.0}, {best_a, 0.0});
  CHECK(ds == Approx(oracle_d).epsilon(0.05));
}

TEST_CASE("losses are permutation equivariant with id-keyed sampling") {
  const FeatureMatrix fm = generate_synthetic(10, 4, 2, 0.12, 33);
  const auto build = [&](const FeatureMatrix& f) {
    const Neighborhoods nb = knn_neighborhoods(f, 3);
    const ConductivityTensor K = build_conductivity(f, nb, 1.0);
    return graph_distance_matrix(f, K, nb, DistanceTransform::neg_log);
  };
  const FluidGraph fg = build(fm);

  EmbedConfig cfg;
  cfg.dim = 2;
  cfg.epochs = 10;
  cfg.batch_pairs = 15;
  cfg.seed = 4;
  cfg.init = InitScheme::random_ball;  // keyed by row id
  const EmbeddingState base = embed(fm, fg, cfg);

  const std::vector<std::size_t> perm{7, 3, 0, 9, 5, 1, 8, 2, 6, 4};
  const FeatureMatrix fmp = permuted(fm, perm);
  const FluidGraph fgp = build(fmp);
  const EmbeddingState moved = embed(fmp, fgp, cfg);

  REQUIRE(base.loss_trace.size() == moved.loss_trace.size());
  // identical up to float reassociation under the relabeling, which
  // compounds mildly across epochs
  for (std::size_t t = 0; t < base.loss_trace.size(); ++t) {
    REQUIRE(moved.loss_trace[t].total ==
            Approx(base.loss_trace[t].total).epsilon(1e-6));
  }
}

TEST_CASE("config validation") {
  EmbedConfig cfg;
  cfg.dim = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.dim = 2;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.lr = 0.1;
  cfg.eps_d = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.eps_d = 1e-8;
  CHECK_NOTHROW(cfg.validate());
  const auto j = cfg.to_json();
  const EmbedConfig round = EmbedConfig::from_json(j);
  CHECK(round.to_json() == j);
}
