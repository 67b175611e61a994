#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "softmanifold/common.hpp"

namespace softmanifold {

// Degeneracy weight of the ball metric: half the squared distance-to-
// boundary factor. Positive on the open ball, zero on the boundary.
inline double r_factor(const Vec& u) { return 0.5 * (1.0 - squared_norm(u)); }

// Symmetric, positive-definite surrogate for the intrinsic ball distance.
// Behaves like sqrt of the chord near the boundary and like the chord
// scaled by the local weight in the interior.
inline double semimetric_distance(const Vec& u1, const Vec& u2) {
  const double d = euclidean_distance(u1, u2);
  if (d == 0.0) return 0.0;
  // weights clamp at the boundary so finite-difference probes that step
  // marginally outside the ball stay finite; grouping keeps the value
  // bit-for-bit symmetric in the arguments
  const double w1 = std::sqrt(std::max(r_factor(u1), 0.0));
  const double w2 = std::sqrt(std::max(r_factor(u2), 0.0));
  return d / (std::sqrt(d) + (w1 + w2));
}

// Maps a feature vector into the open unit ball. The denominator uses the
// squared norm; s_over_v > 0 guarantees a strictly interior image.
inline Vec change_of_variables(const Vec& x, double s_over_v) {
  if (s_over_v < 0.0) throw std::invalid_argument("s_over_v must be >= 0");
  const double denom_sq = 2.0 * s_over_v + squared_norm(x);
  if (!(denom_sq > 0.0)) {
    throw std::invalid_argument("change_of_variables: zero vector with zero s_over_v");
  }
  const double inv = 1.0 / std::sqrt(denom_sq);
  Vec u(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) u[i] = x[i] * inv;
  return u;
}

// Radial deviation from the half sphere; satisfies
// s_over_v - r(x) = y + y^2 / 2 exactly under the squared-norm convention.
inline double y_coordinate(const Vec& x, double s_over_v) {
  const double denom_sq = 2.0 * s_over_v + squared_norm(x);
  if (!(denom_sq >= 0.0)) throw std::invalid_argument("invalid y_coordinate input");
  return std::sqrt(denom_sq) - 1.0;
}

// Original coordinates together with the diffusion proxy and the derived
// radial deviation.
struct TransformState {
  Vec x;
  double s_over_v = 0.0;
  double y = 0.0;
};

inline TransformState make_transform_state(Vec x, double s_over_v) {
  TransformState ts;
  ts.y = y_coordinate(x, s_over_v);
  ts.x = std::move(x);
  ts.s_over_v = s_over_v;
  return ts;
}

// Trace of a fixed point on a circle of radius rho rolling inside the
// unit circle. rho = 1/2 degenerates to the diameter; these curves solve
// the geodesic equations of the ball metric.
inline std::pair<double, double> hypocycloid(double rho, double t) {
  if (!(rho > 0.0) || rho > 0.5) {
    throw std::invalid_argument("hypocycloid radius must lie in (0, 1/2]");
  }
  const double a = t * std::sqrt(rho / (1.0 - rho));
  const double b = t * std::sqrt((1.0 - rho) / rho);
  const double w1 = (1.0 - rho) * std::cos(a) + rho * std::cos(b);
  const double w2 = (1.0 - rho) * std::sin(a) - rho * std::sin(b);
  return {w1, w2};
}

struct GeodesicCurve {
  double rho = 0.5;
  std::vector<std::pair<double, double>> samples;
  double length = 0.0;  // polyline length under the ball metric
};

// Uniformly sampled hypocycloid arc with its metric length accumulated by
// the midpoint rule.
inline GeodesicCurve sample_hypocycloid(double rho, double t0, double t1,
                                        std::size_t n_samples) {
  if (n_samples < 2) throw std::invalid_argument("need at least two samples");
  GeodesicCurve curve;
  curve.rho = rho;
  curve.samples.reserve(n_samples);
  for (std::size_t k = 0; k < n_samples; ++k) {
    const double t =
        t0 + (t1 - t0) * static_cast<double>(k) / static_cast<double>(n_samples - 1);
    curve.samples.push_back(hypocycloid(rho, t));
  }
  for (std::size_t k = 0; k + 1 < curve.samples.size(); ++k) {
    const auto [a1, a2] = curve.samples[k];
    const auto [b1, b2] = curve.samples[k + 1];
    const double mx = 0.5 * (a1 + b1);
    const double my = 0.5 * (a2 + b2);
    const double w = std::max(1.0 - (mx * mx + my * my), 1e-12);
    curve.length += std::hypot(b1 - a1, b2 - a2) / std::sqrt(w);
  }
  return curve;
}

inline Vec project_to_ball(Vec u, double max_radius) {
  if (!(max_radius > 0.0) || max_radius >= 1.0) {
    throw std::invalid_argument("max_radius must lie in (0, 1)");
  }
  const double n = norm(u);
  if (n <= max_radius) return u;
  const double scale = max_radius / n;
  for (auto& v : u) v *= scale;
  return u;
}

}  // namespace softmanifold
