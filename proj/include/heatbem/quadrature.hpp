#pragma once

#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

#include "heatbem/mesh.hpp"

namespace heatbem {

/// Gauss-Legendre rule on [0, 1].
struct GaussRule {
  std::vector<double> nodes;
  std::vector<double> weights;
  int size() const { return static_cast<int>(nodes.size()); }
};

inline GaussRule compute_gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("Gauss-Legendre rule needs at least one point");
  // Legendre P_n and its derivative at x.
  auto legendre = [n](double x) {
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    return std::make_pair(p1, n * (x * p1 - p0) / (x * x - 1.0));
  };
  GaussRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    for (int it = 0; it < 100; ++it) {
      auto [p, dp] = legendre(x);
      double dx = p / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    double dp = legendre(x).second;
    double w = 1.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = 0.5 * (1.0 - x);
    rule.nodes[n - 1 - i] = 0.5 * (1.0 + x);
    rule.weights[i] = rule.weights[n - 1 - i] = w;
  }
  return rule;
}

/// Cached Gauss-Legendre rule with n points on [0, 1]; exact for degree 2n-1.
inline const GaussRule& gauss_legendre(int n) {
  static std::mutex mutex;
  static std::map<int, GaussRule> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, compute_gauss_legendre(n)).first;
  return it->second;
}

// Points on the reference triangle {0 <= x2 <= x1 <= 1}. A patch with
// corners P0, P1, P2 is parametrised as P0 + x1 (P1 - P0) + x2 (P2 - P1) so
// the barycentric shape values are (1 - x1, x1 - x2, x2).

struct TrianglePoint {
  double x1, x2, w;
};

inline std::array<double, 3> reference_shapes(double x1, double x2) { return {1.0 - x1, x1 - x2, x2}; }

/// Duffy-collapsed tensor Gauss rule with n^2 points; weights sum to 1/2.
inline std::vector<TrianglePoint> triangle_rule(int n) {
  const auto& g = gauss_legendre(n);
  std::vector<TrianglePoint> pts;
  pts.reserve(n * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double xi = g.nodes[i];
      pts.push_back({xi, xi * g.nodes[j], g.weights[i] * g.weights[j] * xi});
    }
  }
  return pts;
}

/// Quadrature point for a pair of reference triangles.
struct PairPoint {
  double x1, x2, y1, y2, w;
};

/// Four dimensional rule over the product of two reference triangles,
/// specialised to the pair class: tensor Gauss for disjoint pairs and the
/// Sauter-Schwab relative coordinate transforms for the singular classes.
/// Shared vertices sit at reference vertex 0 (and 1 for a common edge) in
/// both triangles. n is the number of Gauss points per dimension.
inline std::vector<PairPoint> pair_rule(PairKind kind, int n) {
  const auto& g = gauss_legendre(n);
  std::vector<PairPoint> pts;
  if (kind == PairKind::disjoint) {
    auto t = triangle_rule(n);
    pts.reserve(t.size() * t.size());
    for (const auto& a : t) {
      for (const auto& b : t) pts.push_back({a.x1, a.x2, b.x1, b.x2, a.w * b.w});
    }
    return pts;
  }
  auto add = [&](double x1, double x2, double y1, double y2, double w) { pts.push_back({x1, x2, y1, y2, w}); };
  for (int a = 0; a < n; ++a) {
    const double xi = g.nodes[a];
    for (int b = 0; b < n; ++b) {
      const double e1 = g.nodes[b];
      for (int c = 0; c < n; ++c) {
        const double e2 = g.nodes[c];
        for (int d = 0; d < n; ++d) {
          const double e3 = g.nodes[d];
          const double w0 = g.weights[a] * g.weights[b] * g.weights[c] * g.weights[d];
          const double xi3 = xi * xi * xi;
          switch (kind) {
            case PairKind::identical: {
              const double w = w0 * xi3 * e1 * e1 * e2;
              add(xi, xi * (1 - e1 + e1 * e2), xi * (1 - e1 * e2 * e3), xi * (1 - e1), w);
              add(xi * (1 - e1 * e2 * e3), xi * (1 - e1), xi, xi * (1 - e1 + e1 * e2), w);
              add(xi, xi * e1 * (1 - e2 + e2 * e3), xi * (1 - e1 * e2), xi * e1 * (1 - e2), w);
              add(xi * (1 - e1 * e2), xi * e1 * (1 - e2), xi, xi * e1 * (1 - e2 + e2 * e3), w);
              add(xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3), xi, xi * e1 * (1 - e2), w);
              add(xi, xi * e1 * (1 - e2), xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3), w);
              break;
            }
            case PairKind::common_edge: {
              const double w1 = w0 * xi3 * e1 * e1;
              const double w2 = w1 * e2;
              add(xi, xi * e1 * e3, xi * (1 - e1 * e2), xi * e1 * (1 - e2), w1);
              add(xi, xi * e1, xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3), w2);
              add(xi * (1 - e1 * e2), xi * e1 * (1 - e2), xi, xi * e1 * e2 * e3, w2);
              add(xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3), xi, xi * e1, w2);
              add(xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3), xi, xi * e1 * e2, w2);
              break;
            }
            case PairKind::common_vertex: {
              const double w = w0 * xi3 * e2;
              add(xi, xi * e1, xi * e2, xi * e2 * e3, w);
              add(xi * e2, xi * e2 * e3, xi, xi * e1, w);
              break;
            }
            case PairKind::disjoint:
              break;
          }
        }
      }
    }
  }
  return pts;
}

/// Cached pair rule.
inline const std::vector<PairPoint>& cached_pair_rule(PairKind kind, int n) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, std::vector<PairPoint>> cache;
  std::lock_guard lock(mutex);
  auto key = std::make_pair(static_cast<int>(kind), n);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, pair_rule(kind, n)).first;
  return it->second;
}

/// Physical data of a pair quadrature point: positions, the combined
/// weight including both surface Jacobians, and the barycentric shape
/// values in the patches' own vertex order.
struct PairSample {
  Vec3 x, y;
  double w;
  std::array<double, 3> phi_x, phi_y;
};

/// Calls f(sample) for every point of the rule for the pair (k, kp).
/// With singular == false the tensor rule is used regardless of the pair
/// class.
template <class F>
void for_each_pair_point(const SurfaceMesh& mesh, Index k, Index kp, const PatchPairClass& cls, int n,
                         bool singular, F&& f) {
  const PairKind kind = singular ? cls.kind : PairKind::disjoint;
  const auto& rule = cached_pair_rule(kind, n);
  const auto px = mesh.corners(k);
  const auto py = mesh.corners(kp);
  const auto& px_perm = singular ? cls.perm_x : std::array<int, 3>{0, 1, 2};
  const auto& py_perm = singular ? cls.perm_y : std::array<int, 3>{0, 1, 2};
  const Vec3 ax0 = px[px_perm[0]], ax1 = px[px_perm[1]] - ax0, ax2 = px[px_perm[2]] - px[px_perm[1]];
  const Vec3 ay0 = py[py_perm[0]], ay1 = py[py_perm[1]] - ay0, ay2 = py[py_perm[2]] - py[py_perm[1]];
  const double jac = 4.0 * mesh.geometry(k).area * mesh.geometry(kp).area;
  PairSample s;
  for (const auto& q : rule) {
    s.x = ax0 + q.x1 * ax1 + q.x2 * ax2;
    s.y = ay0 + q.y1 * ay1 + q.y2 * ay2;
    s.w = q.w * jac;
    auto lx = reference_shapes(q.x1, q.x2);
    auto ly = reference_shapes(q.y1, q.y2);
    for (int i = 0; i < 3; ++i) {
      s.phi_x[px_perm[i]] = lx[i];
      s.phi_y[py_perm[i]] = ly[i];
    }
    f(s);
  }
}

/// Galerkin double integral of kernel(x, y) * phi_km(x) * phi_k'm'(y) for
/// all local shape pairs. Returns a D_s x D_s row-major array (D_s = 1 or 3).
template <class Kernel>
std::array<double, 9> galerkin_entry(const SurfaceMesh& mesh, Index k, Index kp, int n, bool singular,
                                     Kernel&& kernel) {
  auto cls = classify_pair(mesh, k, kp);
  std::array<double, 9> out{};
  const int ds = mesh.dofs_per_patch();
  for_each_pair_point(mesh, k, kp, cls, n, singular && cls.kind != PairKind::disjoint, [&](const PairSample& s) {
    double v = s.w * kernel(s.x, s.y);
    if (ds == 1) {
      out[0] += v;
    } else {
      for (int m = 0; m < 3; ++m) {
        for (int mp = 0; mp < 3; ++mp) out[m * 3 + mp] += v * s.phi_x[m] * s.phi_y[mp];
      }
    }
  });
  return out;
}

}  // namespace heatbem
