#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "heatbem/quadrature.hpp"

namespace heatbem {

/// Position of a node in the binary interval tree. Level 0 is the finest
/// (leaf) level; the node covers fine steps [first_step, first_step + num_steps).
struct IntervalNode {
  int level = 0;
  Index position = 0;
  Index first_step = 0;
  Index num_steps = 0;
  double t_begin = 0.0;
  double t_end = 0.0;

  double width() const { return t_end - t_begin; }
  bool contains_step(Index i) const { return i >= first_step && i < first_step + num_steps; }
};

/// Uniform time grid on [0, T] with N_t = 2^L n_T steps and a Lagrange
/// basis of degree p_t on every step.
class TemporalGrid {
 public:
  TemporalGrid() = default;
  TemporalGrid(double final_time, int levels, Index leaf_steps, int degree = 0)
      : T_(final_time), L_(levels), nT_(leaf_steps), pt_(degree) {
    if (!(final_time > 0.0)) throw std::invalid_argument("final time must be positive");
    if (levels < 0 || levels > 40) throw std::invalid_argument("tree depth out of range");
    if (leaf_steps < 1) throw std::invalid_argument("leaf size must be positive");
    if (degree < 0) throw std::invalid_argument("temporal degree must be non-negative");
    Nt_ = leaf_steps << levels;
    h_ = T_ / static_cast<double>(Nt_);
  }

  /// Grid with N_t steps split as 2^L n_T; throws unless 2^L divides N_t.
  static TemporalGrid from_steps(double final_time, Index num_steps, int levels, int degree = 0) {
    Index leaves = Index{1} << levels;
    if (num_steps < leaves || num_steps % leaves != 0) {
      throw std::invalid_argument("number of time steps is not divisible by 2^L");
    }
    return TemporalGrid(final_time, levels, num_steps / leaves, degree);
  }

  double final_time() const { return T_; }
  Index num_steps() const { return Nt_; }
  double step() const { return h_; }
  int levels() const { return L_; }
  Index leaf_steps() const { return nT_; }
  int degree() const { return pt_; }
  int dofs_per_step() const { return pt_ + 1; }

  double t(Index i) const { return h_ * static_cast<double>(i); }

  /// N_{l,t}: fine steps per node at level l.
  Index steps_at_level(int level) const { return nT_ << level; }
  Index nodes_at_level(int level) const { return Index{1} << (L_ - level); }
  double width_at_level(int level) const { return h_ * static_cast<double>(steps_at_level(level)); }

  IntervalNode node(int level, Index n) const {
    if (level < 0 || level > L_ || n < 0 || n >= nodes_at_level(level)) {
      throw std::out_of_range("interval node outside the tree");
    }
    IntervalNode nd;
    nd.level = level;
    nd.position = n;
    nd.num_steps = steps_at_level(level);
    nd.first_step = n * nd.num_steps;
    nd.t_begin = t(nd.first_step);
    nd.t_end = t(nd.first_step + nd.num_steps);
    return nd;
  }

 private:
  double T_ = 1.0;
  int L_ = 0;
  Index nT_ = 1;
  int pt_ = 0;
  Index Nt_ = 1;
  double h_ = 1.0;
};

/// Binary expansion data of a leaf index: R is the highest set bit, S the
/// lowest set bit. For n == 0 there is no history and has_far_field is
/// false (R = S = -1).
struct BinaryDigits {
  int R = -1;
  int S = -1;
  bool has_far_field = false;
  Index at_level(int level) const { return n >> level; }
  Index n = 0;
};

inline BinaryDigits binary_digits(Index n) {
  if (n < 0) throw std::invalid_argument("binary_digits needs n >= 0");
  BinaryDigits b;
  b.n = n;
  if (n == 0) return b;
  auto u = static_cast<std::uint64_t>(n);
  b.R = static_cast<int>(std::bit_width(u)) - 1;
  b.S = std::countr_zero(u);
  b.has_far_field = true;
  return b;
}

/// p Chebyshev points of the first kind mapped onto [a, b], in the order
/// beta = 0..p-1 (decreasing).
inline std::vector<double> chebyshev_nodes(double a, double b, int p) {
  if (p < 1) throw std::invalid_argument("Chebyshev order must be positive");
  std::vector<double> x(p);
  for (int beta = 0; beta < p; ++beta) {
    x[beta] = a + (b - a) * (0.5 + 0.5 * std::cos(std::numbers::pi * (2 * beta + 1) / (2.0 * p)));
  }
  return x;
}

inline std::vector<double> chebyshev_nodes(const IntervalNode& node, int p) {
  return chebyshev_nodes(node.t_begin, node.t_end, p);
}

/// Value of the beta-th Lagrange polynomial of the given nodes at t.
inline double lagrange_eval(const std::vector<double>& nodes, int beta, double t) {
  double v = 1.0;
  for (int k = 0; k < static_cast<int>(nodes.size()); ++k) {
    if (k != beta) v *= (t - nodes[k]) / (nodes[beta] - nodes[k]);
  }
  return v;
}

/// Local temporal shape j of degree pt at s in [0, 1]: Lagrange basis on the
/// nodes s_j = 1 - j / pt (the single shape is 1 for pt = 0).
inline double temporal_shape(int pt, int j, double s) {
  if (pt == 0) return 1.0;
  double v = 1.0;
  const double sj = 1.0 - static_cast<double>(j) / pt;
  for (int k = 0; k <= pt; ++k) {
    if (k == j) continue;
    const double sk = 1.0 - static_cast<double>(k) / pt;
    v *= (s - sk) / (sj - sk);
  }
  return v;
}

/// l-th derivative in s of temporal_shape(pt, j, .) at s.
inline double temporal_shape_derivative(int pt, int j, int l, double s) {
  if (l == 0) return temporal_shape(pt, j, s);
  if (l > pt) return 0.0;
  // Expand the Lagrange polynomial in the monomial basis.
  std::vector<double> c(1, 1.0);
  const double sj = 1.0 - (pt == 0 ? 0.0 : static_cast<double>(j) / pt);
  for (int k = 0; k <= pt; ++k) {
    if (k == j) continue;
    const double sk = 1.0 - static_cast<double>(k) / pt;
    const double den = sj - sk;
    std::vector<double> nc(c.size() + 1, 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) {
      nc[i + 1] += c[i] / den;
      nc[i] -= c[i] * sk / den;
    }
    c = std::move(nc);
  }
  for (int d = 0; d < l; ++d) {
    for (std::size_t i = 0; i + 1 < c.size(); ++i) c[i] = c[i + 1] * static_cast<double>(i + 1);
    c.pop_back();
  }
  double v = 0.0;
  for (auto it = c.rbegin(); it != c.rend(); ++it) v = v * s + *it;
  return v;
}

/// chi_ij(t): shape j on step i, zero outside the step. The step is closed
/// on both sides so endpoint values are those of the local polynomial.
inline double temporal_basis_eval(const TemporalGrid& grid, Index i, int j, double t) {
  const double a = grid.t(i), b = grid.t(i + 1);
  if (t < a || t > b) return 0.0;
  return temporal_shape(grid.degree(), j, (t - a) / grid.step());
}

/// Moment matrix of level l: M(beta, i * D_t + j) is the integral of the
/// beta-th Lagrange polynomial on the node interval against chi_ij, for the
/// steps i of node 0 at that level. Shift invariant, so shared by all nodes.
inline Eigen::MatrixXd moment_matrix(const TemporalGrid& grid, int level, int p) {
  const Index steps = grid.steps_at_level(level);
  const int dt = grid.dofs_per_step();
  const auto nodes = chebyshev_nodes(0.0, grid.width_at_level(level), p);
  const auto& g = gauss_legendre((p + grid.degree()) / 2 + 1);
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p, steps * dt);
  const double h = grid.step();
  for (Index i = 0; i < steps; ++i) {
    for (int q = 0; q < g.size(); ++q) {
      const double s = g.nodes[q];
      const double t = h * (static_cast<double>(i) + s);
      for (int beta = 0; beta < p; ++beta) {
        const double lb = lagrange_eval(nodes, beta, t) * g.weights[q] * h;
        for (int j = 0; j < dt; ++j) M(beta, i * dt + j) += lb * temporal_shape(grid.degree(), j, s);
      }
    }
  }
  return M;
}

/// Largest singular value.
inline double spectral_norm(const Eigen::MatrixXd& A) {
  if (A.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  return svd.singularValues()(0);
}

/// p log p with the convention log 1 := 1.
inline double p_log_p(int p) { return p <= 1 ? 1.0 : p * std::log(static_cast<double>(p)); }

/// Scale (h_t p log p 2^l)^(1/2) of the moment matrix norm bound.
inline double moment_bound_scale(double h, int p, int level) {
  return std::sqrt(h * p_log_p(p) * std::ldexp(1.0, level));
}

}  // namespace heatbem
