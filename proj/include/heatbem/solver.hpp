#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "heatbem/assembly.hpp"
#include "heatbem/error.hpp"

namespace heatbem {

struct CgOptions {
  double tol = 1e-10;  // relative residual
  int max_iter = 2000;
};

struct CgResult {
  int iterations = 0;
  double residual = 0.0;  // final relative residual
  std::vector<double> history;
};

/// Unpreconditioned conjugate gradients for A x = b starting from x.
/// apply(v, out) must write A v into out.
template <class Apply>
CgResult cg_solve(Apply&& apply, const Eigen::Ref<const Eigen::VectorXd>& b, Eigen::Ref<Eigen::VectorXd> x,
                  const CgOptions& opt = {}) {
  if (x.size() != b.size()) throw std::invalid_argument("cg_solve: dimension mismatch");
  CgResult res;
  const double bn = b.norm();
  if (bn == 0.0) {
    x.setZero();
    return res;
  }
  Eigen::VectorXd Ap(b.size());
  apply(x, Ap);
  Eigen::VectorXd r = b - Ap;
  Eigen::VectorXd p = r;
  double rr = r.squaredNorm();
  res.residual = std::sqrt(rr) / bn;
  res.history.push_back(res.residual);
  while (res.residual > opt.tol) {
    if (res.iterations >= opt.max_iter) {
      throw ConvergenceError("CG did not converge in " + std::to_string(opt.max_iter) + " iterations", res.residual,
                             res.iterations);
    }
    apply(p, Ap);
    const double pAp = p.dot(Ap);
    if (!(pAp > 0.0)) throw NumericalError("CG: operator is not positive definite");
    const double alpha = rr / pAp;
    x += alpha * p;
    r -= alpha * Ap;
    const double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
    ++res.iterations;
    res.residual = std::sqrt(rr) / bn;
    res.history.push_back(res.residual);
  }
  return res;
}

/// CG tolerance tied to the near-field accuracy.
inline double cg_tolerance(double near_tolerance) { return std::max(1e-2 * near_tolerance, 1e-12); }

enum class StepMethod { cg, direct };

struct StepSolverOptions {
  StepMethod method = StepMethod::cg;
  CgOptions cg{};
  Index max_direct_size = 6000;
};

/// Solves the diagonal block A_0 of one time step. With an extension operator
/// the solve runs in the continuous space: (E^T A_0 E) y = E^T r, x = E y.
class StepSolver {
 public:
  StepSolver(const SpaceTimeOperator& op, const ExtensionOperator* ext = nullptr, StepSolverOptions opt = {})
      : op_(&op), ext_(ext), opt_(opt) {
    if (ext_ && ext_->rows() != op.spatial_dofs()) throw std::invalid_argument("extension does not match operator");
    if (opt_.method == StepMethod::cg && op.grid().degree() > 0) {
      throw std::invalid_argument("CG needs a symmetric diagonal block; use the direct method for p_t > 0");
    }
    if (opt_.method == StepMethod::direct) factorize();
  }

  Index reduced_size() const { return op_->grid().dofs_per_step() * (ext_ ? ext_->cols() : op_->spatial_dofs()); }

  /// Applies the (reduced) diagonal block.
  void apply_reduced(const Eigen::Ref<const Eigen::VectorXd>& y, Eigen::Ref<Eigen::VectorXd> out) const {
    const int dt = op_->grid().dofs_per_step();
    if (!ext_) {
      out.setZero();
      op_->apply_step(0, y, out, 1.0);
      return;
    }
    Eigen::VectorXd x = ext_->extend(y, dt);
    Eigen::VectorXd ax = Eigen::VectorXd::Zero(x.size());
    op_->apply_step(0, x, ax, 1.0);
    out = ext_->restrict_to_nodes(ax, dt);
  }

  /// x = solution for the step residual r (both in patch-local layout).
  void solve(const Eigen::Ref<const Eigen::VectorXd>& r, Eigen::Ref<Eigen::VectorXd> x) const {
    const int dt = op_->grid().dofs_per_step();
    Eigen::VectorXd b = ext_ ? ext_->restrict_to_nodes(r, dt) : Eigen::VectorXd(r);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(b.size());
    if (opt_.method == StepMethod::direct) {
      y = direct_solve(b);
      iterations_.push_back(0);
    } else {
      auto res = cg_solve([this](const Eigen::Ref<const Eigen::VectorXd>& v,
                                 Eigen::Ref<Eigen::VectorXd> o) { apply_reduced(v, o); },
                          b, y, opt_.cg);
      iterations_.push_back(res.iterations);
      residuals_.push_back(res.residual);
    }
    x = ext_ ? ext_->extend(y, dt) : y;
  }

  const std::vector<int>& iterations() const { return iterations_; }
  const std::vector<double>& residuals() const { return residuals_; }
  void reset_statistics() const {
    iterations_.clear();
    residuals_.clear();
  }
  const StepSolverOptions& options() const { return opt_; }

  /// Dense reduced diagonal block, built column by column.
  Eigen::MatrixXd dense_block() const {
    const Index n = reduced_size();
    Eigen::MatrixXd A(n, n);
    Eigen::VectorXd e = Eigen::VectorXd::Zero(n), col(n);
    for (Index j = 0; j < n; ++j) {
      e(j) = 1.0;
      apply_reduced(e, col);
      A.col(j) = col;
      e(j) = 0.0;
    }
    return A;
  }

 private:
  void factorize() {
    if (reduced_size() > opt_.max_direct_size) throw ResourceError("diagonal block too large for the direct solver");
    lu_ = Eigen::PartialPivLU<Eigen::MatrixXd>(dense_block());
  }
  Eigen::VectorXd direct_solve(const Eigen::VectorXd& b) const { return lu_.solve(b); }

  const SpaceTimeOperator* op_;
  const ExtensionOperator* ext_;
  StepSolverOptions opt_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  mutable std::vector<int> iterations_;
  mutable std::vector<double> residuals_;
};

struct SolveReport {
  double near_seconds = 0.0;
  double far_seconds = 0.0;
  double diagonal_seconds = 0.0;
  double total_seconds = 0.0;
  std::vector<int> cg_iterations;
  std::vector<std::string> warnings;

  double mean_iterations() const {
    if (cg_iterations.empty()) return 0.0;
    double s = 0.0;
    for (int i : cg_iterations) s += i;
    return s / static_cast<double>(cg_iterations.size());
  }
  int max_iterations() const {
    return cg_iterations.empty() ? 0 : *std::max_element(cg_iterations.begin(), cg_iterations.end());
  }

  nlohmann::json to_json() const {
    return {{"near_seconds", near_seconds},
            {"far_seconds", far_seconds},
            {"diagonal_seconds", diagonal_seconds},
            {"total_seconds", total_seconds},
            {"cg_iterations", cg_iterations},
            {"cg_mean_iterations", mean_iterations()},
            {"cg_max_iterations", max_iterations()},
            {"warnings", warnings}};
  }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline void check_rhs(const SpaceTimeOperator& op, const Eigen::VectorXd& p) {
  if (p.size() != op.size()) throw std::invalid_argument("right-hand side does not match the operator");
}

/// Forward elimination over the steps [first, first + count): each step
/// subtracts A_{i - i'} q_{i'} for first <= i' < i, then solves.
inline void leaf_elimination(const SpaceTimeOperator& op, const StepSolver& solver, Index first, Index count,
                             Eigen::VectorXd& p, Eigen::VectorXd& q, SolveReport& rep) {
  const Index sd = op.step_dofs();
  for (Index a = 0; a < count; ++a) {
    const Index i = first + a;
    auto t0 = Clock::now();
    for (Index b = 0; b < a; ++b) {
      op.apply_step(static_cast<int>(a - b), q.segment((first + b) * sd, sd), p.segment(i * sd, sd), -1.0);
    }
    rep.near_seconds += seconds_since(t0);
    t0 = Clock::now();
    solver.solve(p.segment(i * sd, sd), q.segment(i * sd, sd));
    rep.diagonal_seconds += seconds_since(t0);
  }
}

/// y[first + a] += alpha sum_b A_{shift + a - b} x[src + b] for a, b < n with
/// shift + a - b in [lo, shift + n), batched over a for every offset.
inline void apply_block_toeplitz(const SpaceTimeOperator& op, const Eigen::VectorXd& x, Index src, Eigen::VectorXd& y,
                                 Index first, Index n, Index shift, int lo, double alpha) {
  const Index sd = op.step_dofs();
  for (Index delta = std::max<Index>(lo, shift - n + 1); delta < shift + n; ++delta) {
    const Index a0 = std::max<Index>(0, delta - shift), a1 = std::min<Index>(n - 1, delta - shift + n - 1);
    if (a1 < a0) continue;
    const Index b0 = a0 + shift - delta;
    Eigen::Map<const Eigen::MatrixXd> X(x.data() + (src + b0) * sd, sd, a1 - a0 + 1);
    Eigen::Map<Eigen::MatrixXd> Y(y.data() + (first + a0) * sd, sd, a1 - a0 + 1);
    op.apply_steps(static_cast<int>(delta), X, Y, alpha);
  }
}

inline int lowest_set_bit(Index n) {
  int s = 0;
  while (((n >> s) & 1) == 0) ++s;
  return s;
}

}  // namespace detail

/// Flat block forward elimination; needs every A_delta, delta < N_t.
inline Eigen::VectorXd flat_forward_elimination(const SpaceTimeOperator& op, const StepSolver& solver,
                                                const Eigen::VectorXd& rhs, SolveReport* report = nullptr) {
  detail::check_rhs(op, rhs);
  const Index nt = op.grid().num_steps();
  if (op.max_offset() < nt) throw std::invalid_argument("flat elimination needs all Toeplitz blocks");
  SolveReport rep;
  auto t0 = detail::Clock::now();
  solver.reset_statistics();
  Eigen::VectorXd p = rhs;
  Eigen::VectorXd q = Eigen::VectorXd::Zero(rhs.size());
  detail::leaf_elimination(op, solver, 0, nt, p, q, rep);
  rep.cg_iterations = solver.iterations();
  rep.total_seconds = detail::seconds_since(t0);
  if (report) *report = rep;
  return q;
}

/// Hierarchical block forward elimination over the binary time tree.
inline Eigen::VectorXd hierarchical_solve(const SpaceTimeOperator& op, const StepSolver& solver,
                                          const Eigen::VectorXd& rhs, SolveReport* report = nullptr) {
  detail::check_rhs(op, rhs);
  const auto& grid = op.grid();
  const int L = grid.levels();
  const Index nT = grid.leaf_steps();
  const Index sd = op.step_dofs();
  const int far_top = L - 2;
  if (op.max_offset() < std::min<Index>(2 * nT, grid.num_steps())) {
    throw std::invalid_argument("operator lacks the near-field offsets");
  }
  SolveReport rep;
  auto t_start = detail::Clock::now();
  solver.reset_statistics();
  Eigen::VectorXd p = rhs;
  Eigen::VectorXd q = Eigen::VectorXd::Zero(rhs.size());
  auto seg = [&](int level, Index n) {
    const Index len = grid.steps_at_level(level) * sd;
    return std::pair<Index, Index>{n * len, len};
  };
  const Index leaves = grid.nodes_at_level(0);
  for (Index n0 = 0; n0 < leaves; ++n0) {
    if (n0 > 0) {
      auto t0 = detail::Clock::now();
      // c_1^0 block (a, b) = A_{n_T + a - b}
      const Index first = n0 * nT;
      detail::apply_block_toeplitz(op, q, first - nT, p, first, nT, nT, 1, -1.0);
      rep.near_seconds += detail::seconds_since(t0);
      t0 = detail::Clock::now();
      const int S = detail::lowest_set_bit(n0);
      for (int l = 0; l <= std::min(S, far_top); ++l) {
        const Index nl = n0 >> l;
        if (nl - 2 < 0) continue;
        auto [dst, len] = seg(l, nl);
        auto [src, len2] = seg(l, nl - 2);
        op.apply_far(l, 2, q.segment(src, len2), p.segment(dst, len), -1.0);
      }
      if (S <= far_top) {
        const Index ns = n0 >> S;
        if (ns - 3 >= 0) {
          auto [dst, len] = seg(S, ns);
          auto [src, len2] = seg(S, ns - 3);
          op.apply_far(S, 3, q.segment(src, len2), p.segment(dst, len), -1.0);
        }
      }
      rep.far_seconds += detail::seconds_since(t0);
    }
    detail::leaf_elimination(op, solver, n0 * nT, nT, p, q, rep);
  }
  rep.cg_iterations = solver.iterations();
  rep.total_seconds = detail::seconds_since(t_start);
  if (report) *report = rep;
  return q;
}

/// V q through the same block partition as hierarchical_solve.
inline Eigen::VectorXd apply_hierarchical(const SpaceTimeOperator& op, const Eigen::VectorXd& q) {
  detail::check_rhs(op, q);
  const auto& grid = op.grid();
  const int far_top = grid.levels() - 2;
  const Index nT = grid.leaf_steps();
  const Index sd = op.step_dofs();
  Eigen::VectorXd y = Eigen::VectorXd::Zero(q.size());
  auto seg = [&](int level, Index n) {
    const Index len = grid.steps_at_level(level) * sd;
    return std::pair<Index, Index>{n * len, len};
  };
  for (Index n0 = 0; n0 < grid.nodes_at_level(0); ++n0) {
    const Index first = n0 * nT;
    detail::apply_block_toeplitz(op, q, first, y, first, nT, 0, 0, 1.0);
    if (n0 == 0) continue;
    detail::apply_block_toeplitz(op, q, first - nT, y, first, nT, nT, 1, 1.0);
    const int S = detail::lowest_set_bit(n0);
    for (int l = 0; l <= std::min(S, far_top); ++l) {
      const Index nl = n0 >> l;
      if (nl - 2 < 0) continue;
      auto [dst, len] = seg(l, nl);
      auto [src, len2] = seg(l, nl - 2);
      op.apply_far(l, 2, q.segment(src, len2), y.segment(dst, len), 1.0);
    }
    if (S <= far_top && (n0 >> S) - 3 >= 0) {
      auto [dst, len] = seg(S, n0 >> S);
      auto [src, len2] = seg(S, (n0 >> S) - 3);
      op.apply_far(S, 3, q.segment(src, len2), y.segment(dst, len), 1.0);
    }
  }
  return y;
}

/// V q with every Toeplitz block applied directly.
inline Eigen::VectorXd apply_flat(const SpaceTimeOperator& op, const Eigen::VectorXd& q) {
  detail::check_rhs(op, q);
  const Index nt = op.grid().num_steps();
  if (op.max_offset() < nt) throw std::invalid_argument("flat product needs all Toeplitz blocks");
  const Index sd = op.step_dofs();
  Eigen::VectorXd y = Eigen::VectorXd::Zero(q.size());
  for (Index i = 0; i < nt; ++i) {
    for (Index j = 0; j <= i; ++j) op.apply_step(static_cast<int>(i - j), q.segment(j * sd, sd), y.segment(i * sd, sd), 1.0);
  }
  return y;
}

/// Continuous-element solve: p holds node-space blocks (D_t N_v per step).
/// Returns node-space coefficients.
inline Eigen::VectorXd continuous_solve(const SpaceTimeOperator& op, const ExtensionOperator& ext,
                                        const Eigen::VectorXd& p, StepSolverOptions opt = {},
                                        SolveReport* report = nullptr) {
  const Index blocks = op.grid().num_steps() * op.grid().dofs_per_step();
  if (p.size() != blocks * ext.cols()) throw std::invalid_argument("continuous rhs has the wrong size");
  Eigen::VectorXd scaled = p;
  for (Index b = 0; b < blocks; ++b) scaled.segment(b * ext.cols(), ext.cols()).array() /= ext.degrees.array();
  Eigen::VectorXd phat = ext.extend(scaled, blocks);
  StepSolver solver(op, &ext, opt);
  Eigen::VectorXd qhat = hierarchical_solve(op, solver, phat, report);
  Eigen::VectorXd q = ext.restrict_to_nodes(qhat, blocks);
  for (Index b = 0; b < blocks; ++b) q.segment(b * ext.cols(), ext.cols()).array() /= ext.degrees.array();
  return q;
}

/// (E^T V E) q for node-space q.
inline Eigen::VectorXd apply_continuous(const SpaceTimeOperator& op, const ExtensionOperator& ext,
                                        const Eigen::VectorXd& q, bool hierarchical = true) {
  const Index blocks = op.grid().num_steps() * op.grid().dofs_per_step();
  Eigen::VectorXd x = ext.extend(q, blocks);
  Eigen::VectorXd y = hierarchical ? apply_hierarchical(op, x) : apply_flat(op, x);
  return ext.restrict_to_nodes(y, blocks);
}

}  // namespace heatbem
