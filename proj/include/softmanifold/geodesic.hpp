#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "softmanifold/common.hpp"
#include "softmanifold/manifold.hpp"

namespace softmanifold {

struct GeodesicResult {
  double length = 0.0;
  double energy = 0.0;
  bool converged = true;
  int iterations = 0;
};

namespace detail {

using P2 = std::array<double, 2>;

inline double sq(const P2& p) { return p[0] * p[0] + p[1] * p[1]; }

inline double polyline_energy(const std::vector<P2>& pts, double dxi) {
  double e = 0.0;
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const double dx = pts[k + 1][0] - pts[k][0];
    const double dy = pts[k + 1][1] - pts[k][1];
    const double w = 1.0 - sq(pts[k]);
    e += (dx * dx + dy * dy) / (w * dxi);
  }
  return e;
}

inline double polyline_length(const std::vector<P2>& pts) {
  double len = 0.0;
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const double dx = pts[k + 1][0] - pts[k][0];
    const double dy = pts[k + 1][1] - pts[k][1];
    P2 mid{0.5 * (pts[k][0] + pts[k + 1][0]), 0.5 * (pts[k][1] + pts[k + 1][1])};
    const double w = std::max(1.0 - sq(mid), 1e-12);
    len += std::sqrt(dx * dx + dy * dy) / std::sqrt(w);
  }
  return len;
}

}  // namespace detail

// Numerically minimizes the discretized curve energy over polylines in
// the plane spanned by the endpoints, then reports the curve length under
// the ball metric. Test-side reference, not used by the embedding loop.
inline GeodesicResult geodesic_length_oracle(const Vec& u1, const Vec& u2,
                                             int n_segments = 64,
                                             int max_iters = 2000,
                                             double tol = 1e-6) {
  if (n_segments < 8) throw std::invalid_argument("need at least 8 segments");
  if (u1.size() != u2.size()) throw std::invalid_argument("dimension mismatch");

  GeodesicResult res;
  const Vec delta = sub(u2, u1);
  if (norm(delta) == 0.0) return res;

  // The discretized energy weights segments by their left endpoint, which
  // is orientation dependent; a canonical endpoint order makes the
  // reported length exactly symmetric.
  if (std::lexicographical_compare(u2.begin(), u2.end(), u1.begin(), u1.end())) {
    return geodesic_length_oracle(u2, u1, n_segments, max_iters, tol);
  }

  // Orthonormal basis of span{u1, u2}; an arbitrary complement direction
  // is fine when the points are collinear with the origin.
  Vec b1 = u1;
  if (norm(b1) < 1e-14) b1 = u2;
  {
    const double n1 = norm(b1);
    for (auto& v : b1) v /= n1;
  }
  Vec b2 = u2;
  const double proj = dot(b2, b1);
  for (std::size_t i = 0; i < b2.size(); ++i) b2[i] -= proj * b1[i];
  if (norm(b2) < 1e-12) {
    b2.assign(u1.size(), 0.0);
    std::size_t axis = 0;
    double smallest = std::abs(b1[0]);
    for (std::size_t i = 1; i < b1.size(); ++i) {
      if (std::abs(b1[i]) < smallest) {
        smallest = std::abs(b1[i]);
        axis = i;
      }
    }
    b2[axis] = 1.0;
    const double p2 = dot(b2, b1);
    for (std::size_t i = 0; i < b2.size(); ++i) b2[i] -= p2 * b1[i];
  }
  {
    const double n2 = norm(b2);
    for (auto& v : b2) v /= n2;
  }

  using detail::P2;
  const P2 a{dot(u1, b1), dot(u1, b2)};
  const P2 b{dot(u2, b1), dot(u2, b2)};

  const int n = n_segments;
  const double dxi = 1.0 / n;
  std::vector<P2> pts(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k <= n; ++k) {
    const double t = static_cast<double>(k) / n;
    pts[static_cast<std::size_t>(k)] = {a[0] + t * (b[0] - a[0]),
                                        a[1] + t * (b[1] - a[1])};
  }

  constexpr double interior_cap = 1.0 - 1e-9;
  auto clip = [&](P2 p) {
    const double r = std::sqrt(detail::sq(p));
    if (r > interior_cap) {
      const double s = interior_cap / r;
      p[0] *= s;
      p[1] *= s;
    }
    return p;
  };
  for (auto& p : pts) p = clip(p);
  pts.front() = clip(a);
  pts.back() = clip(b);

  double energy = detail::polyline_energy(pts, dxi);
  double step = 0.25 * dxi;
  int stall = 0;
  int it = 0;
  std::vector<P2> grad(pts.size(), P2{0.0, 0.0});
  std::vector<P2> trial(pts.size());

  for (; it < max_iters; ++it) {
    for (std::size_t m = 1; m + 1 < pts.size(); ++m) {
      const P2& prev = pts[m - 1];
      const P2& cur = pts[m];
      const P2& nxt = pts[m + 1];
      const double wp = 1.0 - detail::sq(prev);
      const double wc = 1.0 - detail::sq(cur);
      const double dx0 = cur[0] - prev[0];
      const double dy0 = cur[1] - prev[1];
      const double dx1 = nxt[0] - cur[0];
      const double dy1 = nxt[1] - cur[1];
      const double seg1 = dx1 * dx1 + dy1 * dy1;
      grad[m][0] = (2.0 * dx0 / wp - 2.0 * dx1 / wc + seg1 * 2.0 * cur[0] / (wc * wc)) / dxi;
      grad[m][1] = (2.0 * dy0 / wp - 2.0 * dy1 / wc + seg1 * 2.0 * cur[1] / (wc * wc)) / dxi;
    }

    bool accepted = false;
    double local = step;
    for (int half = 0; half < 30; ++half) {
      trial = pts;
      for (std::size_t m = 1; m + 1 < pts.size(); ++m) {
        trial[m] = clip(P2{pts[m][0] - local * grad[m][0],
                           pts[m][1] - local * grad[m][1]});
      }
      const double e = detail::polyline_energy(trial, dxi);
      if (e < energy) {
        const double gain = energy - e;
        pts.swap(trial);
        energy = e;
        step = std::min(local * 1.5, 1.0);
        accepted = true;
        if (gain < tol * std::max(1.0, std::abs(energy))) {
          res.length = detail::polyline_length(pts);
          res.energy = energy;
          res.iterations = it + 1;
          return res;
        }
        break;
      }
      local *= 0.5;
    }
    if (!accepted) {
      if (++stall >= 100) {
        res.converged = false;
        break;
      }
    } else {
      stall = 0;
    }
  }

  res.length = detail::polyline_length(pts);
  res.energy = energy;
  res.iterations = it;
  return res;
}

}  // namespace softmanifold
