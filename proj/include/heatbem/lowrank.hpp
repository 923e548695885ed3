#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "heatbem/mesh.hpp"

namespace heatbem {

/// U V^T factorisation of an m x n block.
struct LowRankBlock {
  Eigen::MatrixXd U;  // m x r
  Eigen::MatrixXd V;  // n x r
  double tolerance = 0.0;
  double residual_estimate = 0.0;
  bool certified = true;
  Index rows_evaluated = 0;
  Index cols_evaluated = 0;

  Index rows() const { return U.rows(); }
  Index cols() const { return V.rows(); }
  Index rank() const { return U.cols(); }
  Index storage() const { return rank() * (rows() + cols()); }

  /// y += alpha U (V^T x)
  template <class X, class Y>
  void apply(const X& x, Y&& y, double alpha = 1.0) const {
    if (rank() == 0) return;
    Eigen::MatrixXd t = V.transpose() * x;
    y.noalias() += alpha * (U * t);
  }

  Eigen::MatrixXd dense() const {
    if (rank() == 0) return Eigen::MatrixXd::Zero(U.rows(), V.rows());
    return U * V.transpose();
  }
};

inline Index lr_storage(const LowRankBlock& b) { return b.storage(); }

template <class X>
Eigen::VectorXd lr_matvec(const LowRankBlock& b, const X& x) {
  if (x.size() != b.cols()) throw std::invalid_argument("lr_matvec: dimension mismatch");
  Eigen::VectorXd y = Eigen::VectorXd::Zero(b.rows());
  b.apply(x, y);
  return y;
}

struct AcaOptions {
  Index max_rank = -1;         // -1: min(m, n)
  int max_zero_rows = 8;       // zero rows tried before declaring a zero block
  bool recompress = false;     // truncated SVD of the cross product
  bool absolute = false;       // tol bounds |A - UV^T|_F directly
  int confirm_crosses = 1;     // consecutive small crosses before stopping
  int verify_rows = 0;         // random rows checked afterwards; 0 disables
  int max_retries = 3;         // tenfold tighter restarts after a failed check
};

/// Partially pivoted adaptive cross approximation. The evaluator provides
/// rows(), cols(), row(i, out) and col(j, out) writing into Eigen vectors.
/// Stops once confirm_crosses consecutive crosses have |u_k| |v_k| <= tol |S_k|_F;
/// the last one is kept unless it is below a tenth of the bound. Hitting max_rank leaves the block uncertified.
template <class Evaluator>
LowRankBlock aca_single(const Evaluator& ev, double tol, const AcaOptions& opt) {
  if (!(tol > 0.0)) throw std::invalid_argument("aca: tolerance must be positive");
  const Index m = ev.rows(), n = ev.cols();
  Index max_rank = opt.max_rank < 0 ? std::min(m, n) : std::min<Index>(opt.max_rank, std::min(m, n));
  std::vector<Eigen::VectorXd> us, vs;
  std::vector<char> used(m, 0);
  Eigen::VectorXd a(n), b(m);
  double s2 = 0.0;
  Index row = 0;
  int zero_rows = 0;
  int hits = 0;
  Index rows_used = 0;
  LowRankBlock out;
  out.tolerance = tol;
  bool certified = false;
  double last = 0.0;
  while (m > 0 && n > 0) {
    ev.row(row, a);
    ++out.rows_evaluated;
    for (std::size_t l = 0; l < us.size(); ++l) a -= us[l](row) * vs[l];
    used[row] = 1;
    ++rows_used;
    Index col = 0;
    const double pivot = a.cwiseAbs().maxCoeff(&col);
    if (pivot == 0.0) {
      ++zero_rows;
      Index next = -1;
      for (Index i = 0; i < m; ++i) {
        if (!used[i]) {
          next = i;
          break;
        }
      }
      // A zero residual row after the first cross ends the iteration.
      if (!us.empty() || next < 0 || zero_rows > opt.max_zero_rows) {
        certified = true;
        break;
      }
      row = next;
      continue;
    }
    if (static_cast<Index>(us.size()) == max_rank) break;
    Eigen::VectorXd v = a / a(col);
    ev.col(col, b);
    ++out.cols_evaluated;
    for (std::size_t l = 0; l < us.size(); ++l) b -= vs[l](col) * us[l];
    const double nu = b.norm(), nv = v.norm();
    last = nu * nv;
    const double bound = opt.absolute ? tol : tol * std::sqrt(s2);
    // Crosses far below the tolerance are dropped.
    if (!us.empty() && last <= 0.1 * bound && hits + 1 >= opt.confirm_crosses) {
      certified = true;
      break;
    }
    double cross = 0.0;
    for (std::size_t l = 0; l < us.size(); ++l) cross += us[l].dot(b) * vs[l].dot(v);
    s2 += nu * nu * nv * nv + 2.0 * cross;
    us.push_back(b);
    vs.push_back(std::move(v));
    if (last <= (opt.absolute ? tol : tol * std::sqrt(s2))) {
      if (++hits >= opt.confirm_crosses) {
        certified = true;
        break;
      }
    } else {
      hits = 0;
    }
    if (rows_used == m) {
      certified = true;
      break;
    }
    Index next = -1;
    double best = -1.0;
    for (Index i = 0; i < m; ++i) {
      if (!used[i] && std::abs(b(i)) > best) {
        best = std::abs(b(i));
        next = i;
      }
    }
    row = next;
  }
  const Index r = static_cast<Index>(us.size());
  out.U.resize(m, r);
  out.V.resize(n, r);
  for (Index l = 0; l < r; ++l) {
    out.U.col(l) = us[l];
    out.V.col(l) = vs[l];
  }
  out.certified = certified;
  out.residual_estimate = certified ? last : std::numeric_limits<double>::infinity();
  if (opt.recompress && r > 1) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qu(out.U), qv(out.V);
    Eigen::MatrixXd Ru = qu.matrixQR().topRows(r).triangularView<Eigen::Upper>();
    Eigen::MatrixXd Rv = qv.matrixQR().topRows(r).triangularView<Eigen::Upper>();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Ru * Rv.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    const double total = sv.norm();
    Index k = r;
    double tail = 0.0;
    while (k > 1 && std::sqrt(tail + sv(k - 1) * sv(k - 1)) <= (opt.absolute ? tol : tol * total)) {
      tail += sv(k - 1) * sv(k - 1);
      --k;
    }
    Eigen::MatrixXd Qu = qu.householderQ() * Eigen::MatrixXd::Identity(m, r);
    Eigen::MatrixXd Qv = qv.householderQ() * Eigen::MatrixXd::Identity(n, r);
    out.U = Qu * svd.matrixU().leftCols(k) * sv.head(k).asDiagonal();
    out.V = Qv * svd.matrixV().leftCols(k);
  }
  return out;
}

/// Frobenius norm of U V^T.
inline double lr_norm(const LowRankBlock& b) {
  if (b.rank() == 0) return 0.0;
  const Eigen::MatrixXd G = (b.U.transpose() * b.U).cwiseProduct(b.V.transpose() * b.V);
  return std::sqrt(std::max(0.0, G.sum()));
}

/// Residual estimate from verify_rows random rows.
template <class Evaluator>
double aca_sampled_residual(const Evaluator& ev, const LowRankBlock& b, int samples) {
  const Index m = ev.rows();
  std::mt19937_64 rng(static_cast<std::uint64_t>(m) * 1000003u + static_cast<std::uint64_t>(ev.cols()));
  std::uniform_int_distribution<Index> pick(0, m - 1);
  Eigen::VectorXd row;
  double sum = 0.0;
  const int s = static_cast<int>(std::min<Index>(samples, m));
  for (int i = 0; i < s; ++i) {
    const Index r = s == m ? i : pick(rng);
    ev.row(r, row);
    if (b.rank() > 0) row.noalias() -= b.V * b.U.row(r).transpose();
    sum += row.squaredNorm();
  }
  return std::sqrt(sum * static_cast<double>(m) / s);
}

/// Partially pivoted ACA; with verify_rows > 0 the result is checked on
/// random rows and recomputed at tighter tolerance when the check fails.
template <class Evaluator>
LowRankBlock aca(const Evaluator& ev, double tol, AcaOptions opt = {}) {
  LowRankBlock out = aca_single(ev, tol, opt);
  if (opt.verify_rows <= 0 || ev.rows() == 0 || ev.cols() == 0) return out;
  double t = tol;
  for (int attempt = 0;; ++attempt) {
    const double est = aca_sampled_residual(ev, out, opt.verify_rows);
    const double bound = opt.absolute ? tol : tol * lr_norm(out);
    if (est <= bound) {
      out.residual_estimate = est;
      out.tolerance = tol;
      return out;
    }
    if (attempt == opt.max_retries) {
      out.certified = false;
      out.residual_estimate = est;
      return out;
    }
    t *= 0.1;
    out = aca_single(ev, t, opt);
  }
}

/// Evaluator over an explicit dense matrix.
struct DenseEvaluator {
  const Eigen::MatrixXd& A;
  Index rows() const { return A.rows(); }
  Index cols() const { return A.cols(); }
  void row(Index i, Eigen::VectorXd& out) const { out = A.row(i).transpose(); }
  void col(Index j, Eigen::VectorXd& out) const { out = A.col(j); }
};

}  // namespace heatbem
