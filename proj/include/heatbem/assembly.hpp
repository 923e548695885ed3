#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "heatbem/clustering.hpp"
#include "heatbem/error.hpp"
#include "heatbem/kernels.hpp"
#include "heatbem/lowrank.hpp"
#include "heatbem/mesh.hpp"
#include "heatbem/quadrature.hpp"
#include "heatbem/temporal.hpp"

namespace heatbem {

// ---------------------------------------------------------------------------
// Tolerances

/// Per-block compression tolerances of one run.
struct ToleranceSchedule {
  double epsilon = 0.0;
  double gamma = 1.0;
  int cheb_order = 1;
  double h_s = 0.0;
  double h_t = 0.0;
  Index leaf_steps = 1;
  double near = 0.0;
  std::vector<double> far;  // index l = 0..L-2

  double level(int l) const { return far.at(l); }
};

inline ToleranceSchedule tolerance_schedule(double epsilon, double gamma, int p, double h_s, double h_t,
                                            Index leaf_steps, int levels) {
  if (!(epsilon > 0.0) || !(gamma > 0.0) || p < 1 || !(h_s > 0.0) || !(h_t > 0.0) || leaf_steps < 1 ||
      levels < 0) {
    throw std::invalid_argument("tolerance_schedule: invalid arguments");
  }
  ToleranceSchedule s;
  s.epsilon = epsilon;
  s.gamma = gamma;
  s.cheb_order = p;
  s.h_s = h_s;
  s.h_t = h_t;
  s.leaf_steps = leaf_steps;
  s.near = epsilon * h_s * std::sqrt(h_t) / (gamma * static_cast<double>(leaf_steps));
  for (int l = 0; l + 2 <= levels; ++l) {
    const double lp1 = l + 1.0;
    s.far.push_back(epsilon * std::ldexp(1.0, -l) * h_s / std::sqrt(h_t) / (gamma * p_log_p(p) * lp1 * lp1));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Continuous extension

/// Maps vertex values to patch-local values: (E q)_{k,m} = q_{node(k,m)}.
struct ExtensionOperator {
  Eigen::SparseMatrix<double> E;
  Eigen::VectorXd degrees;  // diagonal of E^T E

  Index rows() const { return E.rows(); }
  Index cols() const { return E.cols(); }

  /// Applies E to each of `blocks` consecutive spatial vectors.
  Eigen::VectorXd extend(const Eigen::VectorXd& x, Index blocks = 1) const {
    if (x.size() != cols() * blocks) throw std::invalid_argument("extend: dimension mismatch");
    Eigen::VectorXd y(rows() * blocks);
    for (Index b = 0; b < blocks; ++b) y.segment(b * rows(), rows()) = E * x.segment(b * cols(), cols());
    return y;
  }

  Eigen::VectorXd restrict_to_nodes(const Eigen::VectorXd& x, Index blocks = 1) const {
    if (x.size() != rows() * blocks) throw std::invalid_argument("restrict: dimension mismatch");
    Eigen::VectorXd y(cols() * blocks);
    for (Index b = 0; b < blocks; ++b) y.segment(b * cols(), cols()) = E.transpose() * x.segment(b * rows(), rows());
    return y;
  }
};

inline ExtensionOperator build_extension(const SurfaceMesh& mesh) {
  const int ds = mesh.dofs_per_patch();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(mesh.num_patches() * ds);
  for (Index k = 0; k < mesh.num_patches(); ++k) {
    for (int m = 0; m < ds; ++m) trip.emplace_back(k * ds + m, mesh.node(k, m), 1.0);
  }
  ExtensionOperator ext;
  ext.E.resize(mesh.num_patches() * ds, mesh.num_nodes());
  ext.E.setFromTriplets(trip.begin(), trip.end());
  ext.degrees = Eigen::VectorXd::Zero(mesh.num_nodes());
  for (const auto& t : trip) ext.degrees(t.col()) += 1.0;
  return ext;
}

// ---------------------------------------------------------------------------
// Block sparse matrices

/// Dense or low-rank block at a fixed offset.
struct MatrixBlock {
  Index row0 = 0, col0 = 0;
  Index rows = 0, cols = 0;
  Index row_cluster = -1, col_cluster = -1;
  bool low_rank = false;
  Eigen::MatrixXd D;
  LowRankBlock L;

  Index storage() const { return low_rank ? L.storage() : rows * cols; }
  Index rank() const { return low_rank ? L.rank() : std::min(rows, cols); }
  Eigen::MatrixXd dense() const { return low_rank ? L.dense() : D; }

  template <class X, class Y>
  void apply(const X& x, Y&& y, double alpha) const {
    if (low_rank) {
      L.apply(x, y, alpha);
    } else {
      y.noalias() += alpha * (D * x);
    }
  }
};

class BlockSparseMatrix {
 public:
  BlockSparseMatrix() = default;
  BlockSparseMatrix(Index rows, Index cols) : rows_(rows), cols_(cols) {}

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  const std::vector<MatrixBlock>& blocks() const { return blocks_; }
  bool empty() const { return blocks_.empty(); }

  void add(MatrixBlock b) {
    if (b.row0 < 0 || b.col0 < 0 || b.row0 + b.rows > rows_ || b.col0 + b.cols > cols_) {
      throw std::out_of_range("block outside matrix");
    }
    if (b.low_rank ? (b.L.rows() != b.rows || b.L.cols() != b.cols) : (b.D.rows() != b.rows || b.D.cols() != b.cols)) {
      throw std::invalid_argument("block data does not match its extent");
    }
    blocks_.push_back(std::move(b));
    is_packed_ = false;
  }

  void add_dense(Index row0, Index col0, Eigen::MatrixXd D) {
    MatrixBlock b;
    b.row0 = row0;
    b.col0 = col0;
    b.rows = D.rows();
    b.cols = D.cols();
    b.D = std::move(D);
    add(std::move(b));
  }

  /// Copies dense blocks with at most max_entries entries into one CSR
  /// matrix used by apply; the block list is kept for inspection.
  void pack(Index max_entries = std::numeric_limits<Index>::max()) {
    std::vector<Eigen::Triplet<double, Index>> trip;
    Index nnz = 0;
    for (const auto& b : blocks_) {
      if (!b.low_rank && b.rows * b.cols <= max_entries) nnz += b.rows * b.cols;
    }
    trip.reserve(nnz);
    rest_.clear();
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      if (b.low_rank || b.rows * b.cols > max_entries) {
        rest_.push_back(i);
        continue;
      }
      for (Index r = 0; r < b.rows; ++r) {
        for (Index c = 0; c < b.cols; ++c) trip.emplace_back(b.row0 + r, b.col0 + c, b.D(r, c));
      }
    }
    packed_ = Packed(rows_, cols_);
    packed_.setFromTriplets(trip.begin(), trip.end());
    packed_.makeCompressed();
    is_packed_ = true;
  }

  bool packed() const { return is_packed_; }

  /// y += alpha A x
  void apply(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y, double alpha = 1.0) const {
    if (x.size() != cols_ || y.size() != rows_) throw std::invalid_argument("BlockSparseMatrix::apply: dimension mismatch");
    if (is_packed_) {
      y.noalias() += alpha * (packed_ * x);
      for (auto i : rest_) {
        const auto& b = blocks_[i];
        b.apply(x.segment(b.col0, b.cols), y.segment(b.row0, b.rows), alpha);
      }
      return;
    }
    for (const auto& b : blocks_) b.apply(x.segment(b.col0, b.cols), y.segment(b.row0, b.rows), alpha);
  }

  /// Y += alpha A X for several columns at once.
  void apply_multi(const Eigen::Ref<const Eigen::MatrixXd>& x, Eigen::Ref<Eigen::MatrixXd> y, double alpha = 1.0) const {
    if (x.rows() != cols_ || y.rows() != rows_ || x.cols() != y.cols()) {
      throw std::invalid_argument("BlockSparseMatrix::apply_multi: dimension mismatch");
    }
    if (is_packed_) {
      y.noalias() += alpha * (packed_ * x);
      for (auto i : rest_) {
        const auto& b = blocks_[i];
        b.apply(x.middleRows(b.col0, b.cols), y.middleRows(b.row0, b.rows), alpha);
      }
      return;
    }
    for (const auto& b : blocks_) b.apply(x.middleRows(b.col0, b.cols), y.middleRows(b.row0, b.rows), alpha);
  }

  Index storage() const {
    Index s = 0;
    for (const auto& b : blocks_) s += b.storage();
    return s;
  }

  Index dense_entries() const {
    Index s = 0;
    for (const auto& b : blocks_) s += b.rows * b.cols;
    return s;
  }

  Eigen::MatrixXd to_dense() const {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(rows_, cols_);
    for (const auto& b : blocks_) A.block(b.row0, b.col0, b.rows, b.cols) += b.dense();
    return A;
  }

 private:
  using Packed = Eigen::SparseMatrix<double, Eigen::RowMajor, Index>;
  Index rows_ = 0, cols_ = 0;
  std::vector<MatrixBlock> blocks_;
  Packed packed_;
  std::vector<std::size_t> rest_;
  bool is_packed_ = false;
};

// ---------------------------------------------------------------------------
// Quadrature on single patches

struct PatchPoints {
  std::vector<Vec3> x;
  std::vector<double> w;  // includes the surface Jacobian
  std::vector<std::array<double, 3>> phi;
};

/// Triangle rule with n^2 points mapped onto every patch.
inline std::vector<PatchPoints> patch_points(const SurfaceMesh& mesh, int n) {
  const auto rule = triangle_rule(n);
  std::vector<PatchPoints> out(mesh.num_patches());
  for (Index k = 0; k < mesh.num_patches(); ++k) {
    const auto c = mesh.corners(k);
    const double jac = 2.0 * mesh.geometry(k).area;
    auto& pp = out[k];
    for (const auto& t : rule) {
      pp.x.push_back(c[0] + t.x1 * (c[1] - c[0]) + t.x2 * (c[2] - c[1]));
      pp.w.push_back(t.w * jac);
      pp.phi.push_back(reference_shapes(t.x1, t.x2));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Time-integrated Galerkin entries

/// Entries of the Toeplitz blocks A_d for single patch pairs. Offsets 0 and 1
/// of touching pairs use the singular pair rule, all others the tensor rule
/// of the quadrature order.
class NearFieldIntegrator {
 public:
  NearFieldIntegrator(const SurfaceMesh& mesh, const TemporalGrid& grid, int quad_order, int num_offsets)
      : mesh_(&mesh),
        kernel_(grid.step(), grid.degree(), num_offsets),
        n_(quad_order),
        ds_(mesh.dofs_per_patch()),
        dt_(grid.dofs_per_step()),
        nd_(num_offsets),
        pts_(patch_points(mesh, quad_order)) {
    if (quad_order < 1) throw std::invalid_argument("quadrature order must be positive");
    radius_.resize(mesh.num_patches());
    for (Index k = 0; k < mesh.num_patches(); ++k) {
      double r = 0.0;
      for (const auto& c : mesh.corners(k)) r = std::max(r, (c - mesh.geometry(k).centroid).norm());
      radius_[k] = r;
    }
  }

  int num_offsets() const { return nd_; }
  int entries_per_offset() const { return dt_ * dt_ * ds_ * ds_; }
  const TimeIntegratedKernel& kernel() const { return kernel_; }
  const std::vector<PatchPoints>& points() const { return pts_; }

  /// out[((d - d0) D_t^2 + j D_t + j') D_s^2 + m D_s + m'] for d in [d0, d1).
  /// Computed in the order min(k, k'), max(k, k') so that swapping the
  /// patches transposes the local shape indices exactly.
  void pair(Index k, Index kp, int d0, int d1, std::vector<double>& out) const {
    const int per = entries_per_offset();
    if (k > kp) {
      pair(kp, k, d0, d1, out);
      if (ds_ == 3) {
        for (std::size_t blk = 0; blk < out.size(); blk += 9) {
          std::swap(out[blk + 1], out[blk + 3]);
          std::swap(out[blk + 2], out[blk + 6]);
          std::swap(out[blk + 5], out[blk + 7]);
        }
      }
      return;
    }
    out.assign(static_cast<std::size_t>(std::max(0, d1 - d0)) * per, 0.0);
    if (d1 <= d0) return;
    const int nt = dt_ * dt_;
    std::vector<double> g(static_cast<std::size_t>(d1 - d0) * nt);
    auto accumulate = [&](int a0, int a1, double w, const double* px, const double* py) {
      for (int d = a0; d < a1; ++d) {
        const double* gd = &g[(d - a0) * nt];
        double* od = &out[(d - d0) * per];
        for (int jj = 0; jj < nt; ++jj) {
          const double v = w * gd[jj];
          if (ds_ == 1) {
            od[jj] += v;
          } else {
            double* o = od + jj * 9;
            for (int m = 0; m < 3; ++m) {
              for (int mp = 0; mp < 3; ++mp) o[m * 3 + mp] += v * px[m] * py[mp];
            }
          }
        }
      }
    };
    const auto cls = classify_pair(*mesh_, k, kp);
    const bool touching = cls.kind != PairKind::disjoint;
    int split = d0;
    if (touching && d0 < 2) {
      split = std::min(d1, 2);
      for_each_pair_point(*mesh_, k, kp, cls, n_, true, [&](const PairSample& s) {
        kernel_.evaluate((s.x - s.y).norm(), g, d0, split);
        accumulate(d0, split, s.w, s.phi_x.data(), s.phi_y.data());
      });
    }
    if (split < d1) {
      const auto& P = pts_[k];
      const auto& Q = pts_[kp];
      for (std::size_t a = 0; a < P.x.size(); ++a) {
        for (std::size_t b = 0; b < Q.x.size(); ++b) {
          kernel_.evaluate((P.x[a] - Q.x[b]).norm(), g, split, d1);
          accumulate(split, d1, P.w[a] * Q.w[b], P.phi[a].data(), Q.phi[b].data());
        }
      }
    }
    if (k == kp && ds_ == 3) {
      for (std::size_t blk = 0; blk < out.size(); blk += 9) {
        for (int m = 0; m < 3; ++m) {
          for (int mp = m + 1; mp < 3; ++mp) {
            const double v = 0.5 * (out[blk + m * 3 + mp] + out[blk + mp * 3 + m]);
            out[blk + m * 3 + mp] = out[blk + mp * 3 + m] = v;
          }
        }
      }
    }
    for (double v : out) {
      if (!std::isfinite(v)) throw NumericalError("non-finite near-field entry");
    }
  }

  /// Upper bound per offset for the magnitude of the pair's entries.
  std::vector<double> bound(Index k, Index kp) const {
    std::vector<double> b(nd_, std::numeric_limits<double>::infinity());
    const auto& gk = mesh_->geometry(k);
    const auto& gkp = mesh_->geometry(kp);
    const double r = (gk.centroid - gkp.centroid).norm() - radius_[k] - radius_[kp];
    if (!(r > 0.0)) return b;
    std::vector<double> g(static_cast<std::size_t>(nd_) * dt_ * dt_);
    kernel_.evaluate(r, g);
    for (int d = 0; d < nd_; ++d) {
      double m = 0.0;
      for (int jj = 0; jj < dt_ * dt_; ++jj) m = std::max(m, std::abs(g[d * dt_ * dt_ + jj]));
      b[d] = m * gk.area * gkp.area;
    }
    return b;
  }

 private:
  const SurfaceMesh* mesh_;
  TimeIntegratedKernel kernel_;
  int n_, ds_, dt_, nd_;
  std::vector<PatchPoints> pts_;
  std::vector<double> radius_;
};

/// Far-field entries of level l and offset d: heat kernel at the Chebyshev
/// node pairs of I_d^l x I_0^l integrated against spatial shape pairs. Row
/// and column index (k D_s + m) p + beta over a patch range.
class FarFieldEntries {
 public:
  FarFieldEntries(const SurfaceMesh& mesh, const std::vector<PatchPoints>& pts, const TemporalGrid& grid, int level,
                  int d, int p)
      : mesh_(&mesh), pts_(&pts), p_(p), ds_(mesh.dofs_per_patch()) {
    if (p < 1 || d < 2) throw std::invalid_argument("far-field entries need p >= 1 and d >= 2");
    const double w = grid.width_at_level(level);
    const auto c = chebyshev_nodes(0.0, w, p);
    coef_.resize(p * p);
    inv_.resize(p * p);
    for (int b = 0; b < p; ++b) {
      for (int bp = 0; bp < p; ++bp) {
        const double s = d * w + c[b] - c[bp];
        coef_[b * p + bp] = std::pow(4.0 * std::numbers::pi * s, -1.5);
        inv_[b * p + bp] = 0.25 / s;
      }
    }
  }

  int order() const { return p_; }
  Index dim(Index patches) const { return patches * ds_ * p_; }

  struct Block {
    const FarFieldEntries* f;
    Index r0, r1, c0, c1;

    Index rows() const { return f->dim(r1 - r0); }
    Index cols() const { return f->dim(c1 - c0); }
    void row(Index i, Eigen::VectorXd& out) const { f->fill(i, r0, c0, c1, out, false); }
    void col(Index j, Eigen::VectorXd& out) const { f->fill(j, c0, r0, r1, out, true); }
  };

  Block block(Index r0, Index r1, Index c0, Index c1) const { return {this, r0, r1, c0, c1}; }

  Eigen::MatrixXd dense(Index r0, Index r1, Index c0, Index c1) const {
    auto b = block(r0, r1, c0, c1);
    Eigen::MatrixXd A(b.rows(), b.cols());
    Eigen::VectorXd row;
    for (Index i = 0; i < b.rows(); ++i) {
      b.row(i, row);
      A.row(i) = row.transpose();
    }
    return A;
  }

 private:
  // Entry line of index i of patch range starting at own0 against patches
  // [o0, o1). transposed selects the column (source) role of i.
  void fill(Index i, Index own0, Index o0, Index o1, Eigen::VectorXd& out, bool transposed) const {
    const int p = p_, ds = ds_;
    const int beta = static_cast<int>(i % p);
    const Index km = i / p;
    const int m = static_cast<int>(km % ds);
    const Index k = own0 + km / ds;
    out.setZero((o1 - o0) * ds * p);
    const auto& P = (*pts_)[k];
    std::vector<double> cf(p), iv(p);
    for (int b = 0; b < p; ++b) {
      const int idx = transposed ? b * p + beta : beta * p + b;
      cf[b] = coef_[idx];
      iv[b] = inv_[idx];
    }
    for (Index kp = o0; kp < o1; ++kp) {
      const auto& Q = (*pts_)[kp];
      double* base = out.data() + (kp - o0) * ds * p;
      for (std::size_t a = 0; a < P.x.size(); ++a) {
        const double wa = P.w[a] * (ds == 1 ? 1.0 : P.phi[a][m]);
        for (std::size_t b = 0; b < Q.x.size(); ++b) {
          const double r2 = (P.x[a] - Q.x[b]).squaredNorm();
          const double wab = wa * Q.w[b];
          for (int bp = 0; bp < p; ++bp) {
            const double g = wab * cf[bp] * std::exp(-r2 * iv[bp]);
            if (ds == 1) {
              base[bp] += g;
            } else {
              for (int mp = 0; mp < 3; ++mp) base[mp * p + bp] += g * Q.phi[b][mp];
            }
          }
        }
      }
    }
  }

  const SurfaceMesh* mesh_;
  const std::vector<PatchPoints>* pts_;
  int p_, ds_;
  std::vector<double> coef_, inv_;
};

// ---------------------------------------------------------------------------
// Space-time operators

/// Block Toeplitz lower triangular operator on the step vectors of a
/// temporal grid. A step vector holds D_t spatial vectors of length N_s D_s.
class SpaceTimeOperator {
 public:
  SpaceTimeOperator(const TemporalGrid& grid, Index spatial_dofs) : grid_(grid), ns_(spatial_dofs) {}
  virtual ~SpaceTimeOperator() = default;

  const TemporalGrid& grid() const { return grid_; }
  Index spatial_dofs() const { return ns_; }
  Index step_dofs() const { return ns_ * grid_.dofs_per_step(); }
  Index size() const { return step_dofs() * grid_.num_steps(); }

  /// Offsets available to apply_step.
  virtual int max_offset() const = 0;
  /// y += alpha A_delta x on single steps.
  virtual void apply_step(int delta, const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y,
                          double alpha) const = 0;
  /// y += alpha c_d^l x on blocks of steps_at_level(l) steps.
  virtual void apply_far(int level, int d, const Eigen::Ref<const Eigen::VectorXd>& x,
                         Eigen::Ref<Eigen::VectorXd> y, double alpha) const = 0;
  /// Y += alpha A_delta X, one step per column.
  virtual void apply_steps(int delta, const Eigen::Ref<const Eigen::MatrixXd>& x, Eigen::Ref<Eigen::MatrixXd> y,
                           double alpha) const {
    for (Index c = 0; c < x.cols(); ++c) apply_step(delta, x.col(c), y.col(c), alpha);
  }

 protected:
  TemporalGrid grid_;
  Index ns_;
};

/// Applies the offsets [d0, d1) of a near-field list laid out as
/// A[d][j D_t + j'] to single steps.
inline void apply_step_blocks(const std::vector<BlockSparseMatrix>& Ad, int dt, Index ns,
                              const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y,
                              double alpha) {
  for (int j = 0; j < dt; ++j) {
    for (int jp = 0; jp < dt; ++jp) {
      Ad[j * dt + jp].apply(x.segment(jp * ns, ns), y.segment(j * ns, ns), alpha);
    }
  }
}

inline void apply_steps_blocks(const std::vector<BlockSparseMatrix>& Ad, int dt, Index ns,
                               const Eigen::Ref<const Eigen::MatrixXd>& x, Eigen::Ref<Eigen::MatrixXd> y,
                               double alpha) {
  for (int j = 0; j < dt; ++j) {
    for (int jp = 0; jp < dt; ++jp) {
      Ad[j * dt + jp].apply_multi(x.middleRows(jp * ns, ns), y.middleRows(j * ns, ns), alpha);
    }
  }
}

struct DenseAssemblyOptions {
  int quad_order = 2;
  double max_memory_bytes = 2.0e9;
};

/// Exact Toeplitz blocks A_delta for every delta < N_t, from all patch pairs.
class DenseToeplitzOperator final : public SpaceTimeOperator {
 public:
  DenseToeplitzOperator(const SurfaceMesh& mesh, const TemporalGrid& grid, DenseAssemblyOptions opt = {})
      : SpaceTimeOperator(grid, mesh.num_patches() * mesh.dofs_per_patch()) {
    const Index nt = grid.num_steps();
    const int dt = grid.dofs_per_step();
    const double bytes = 8.0 * static_cast<double>(nt) * dt * dt * static_cast<double>(ns_) * ns_;
    if (bytes > opt.max_memory_bytes) {
      throw ResourceError("dense Toeplitz operator needs " + std::to_string(bytes / 1e9) + " GB");
    }
    NearFieldIntegrator integ(mesh, grid, opt.quad_order, static_cast<int>(nt));
    const int ds = mesh.dofs_per_patch();
    A_.assign(nt, std::vector<Eigen::MatrixXd>(dt * dt, Eigen::MatrixXd::Zero(ns_, ns_)));
    std::vector<double> buf;
    const int per = integ.entries_per_offset();
    for (Index k = 0; k < mesh.num_patches(); ++k) {
      for (Index kp = k; kp < mesh.num_patches(); ++kp) {
        integ.pair(k, kp, 0, static_cast<int>(nt), buf);
        for (Index d = 0; d < nt; ++d) {
          for (int jj = 0; jj < dt * dt; ++jj) {
            auto& M = A_[d][jj];
            const double* e = &buf[d * per + jj * ds * ds];
            for (int m = 0; m < ds; ++m) {
              for (int mp = 0; mp < ds; ++mp) {
                M(k * ds + m, kp * ds + mp) = e[m * ds + mp];
                M(kp * ds + mp, k * ds + m) = e[m * ds + mp];
              }
            }
          }
        }
      }
    }
  }

  int max_offset() const override { return static_cast<int>(A_.size()); }

  /// Block (j, j') of A_delta.
  const Eigen::MatrixXd& block(int delta, int j, int jp) const {
    return A_.at(delta).at(j * grid_.dofs_per_step() + jp);
  }

  /// A_delta as a D_t N_s D_s square matrix.
  Eigen::MatrixXd step_matrix(int delta) const {
    const int dt = grid_.dofs_per_step();
    Eigen::MatrixXd M(dt * ns_, dt * ns_);
    for (int j = 0; j < dt; ++j) {
      for (int jp = 0; jp < dt; ++jp) M.block(j * ns_, jp * ns_, ns_, ns_) = block(delta, j, jp);
    }
    return M;
  }

  void apply_step(int delta, const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y,
                  double alpha) const override {
    if (delta < 0 || delta >= max_offset()) throw std::out_of_range("offset out of range");
    const int dt = grid_.dofs_per_step();
    for (int j = 0; j < dt; ++j) {
      for (int jp = 0; jp < dt; ++jp) {
        y.segment(j * ns_, ns_).noalias() += alpha * (A_[delta][j * dt + jp] * x.segment(jp * ns_, ns_));
      }
    }
  }

  void apply_steps(int delta, const Eigen::Ref<const Eigen::MatrixXd>& x, Eigen::Ref<Eigen::MatrixXd> y,
                   double alpha) const override {
    if (delta < 0 || delta >= max_offset()) throw std::out_of_range("offset out of range");
    const int dt = grid_.dofs_per_step();
    for (int j = 0; j < dt; ++j) {
      for (int jp = 0; jp < dt; ++jp) {
        y.middleRows(j * ns_, ns_).noalias() += alpha * (A_[delta][j * dt + jp] * x.middleRows(jp * ns_, ns_));
      }
    }
  }

  void apply_far(int level, int d, const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y,
                 double alpha) const override {
    const Index n = grid_.steps_at_level(level);
    const Index sd = step_dofs();
    if (x.size() != n * sd || y.size() != n * sd) throw std::invalid_argument("apply_far: dimension mismatch");
    for (Index a = 0; a < n; ++a) {
      for (Index b = 0; b < n; ++b) {
        apply_step(static_cast<int>(d * n + a - b), x.segment(b * sd, sd), y.segment(a * sd, sd), alpha);
      }
    }
  }

  /// Dense block c_d^l.
  Eigen::MatrixXd far_block(int level, int d) const {
    const Index n = grid_.steps_at_level(level);
    const Index sd = step_dofs();
    Eigen::MatrixXd C(n * sd, n * sd);
    for (Index a = 0; a < n; ++a) {
      for (Index b = 0; b < n; ++b) C.block(a * sd, b * sd, sd, sd) = step_matrix(static_cast<int>(d * n + a - b));
    }
    return C;
  }

 private:
  std::vector<std::vector<Eigen::MatrixXd>> A_;
};

// ---------------------------------------------------------------------------
// Compressed operator

struct AssemblyOptions {
  double epsilon = 1e-3;
  int cheb_order = 4;
  int quad_order = 2;
  bool near_aca = true;
  bool absolute_tolerance = false;
  double drop_factor = 1e-3;
  int aca_verify_rows = 8;
  int aca_confirm_crosses = 2;
  bool keep_far = true;  // false: far blocks are counted and discarded
  AcaOptions aca{};
};

struct BlockStats {
  Index blocks = 0;
  Index low_rank = 0;
  Index stored = 0;
  Index dense_entries = 0;
  Index max_rank = 0;
  Index max_block_rank = 0;  // dense blocks count as min(rows, cols)
  Index rank_sum = 0;
  Index uncertified = 0;

  double mean_rank() const { return low_rank ? static_cast<double>(rank_sum) / low_rank : 0.0; }
  void add(const MatrixBlock& b) {
    ++blocks;
    stored += b.storage();
    dense_entries += b.rows * b.cols;
    max_block_rank = std::max(max_block_rank, b.rank());
    if (b.low_rank) {
      ++low_rank;
      rank_sum += b.L.rank();
      max_rank = std::max(max_rank, b.L.rank());
      if (!b.L.certified) ++uncertified;
    }
  }
  nlohmann::json to_json() const {
    return {{"blocks", blocks},          {"low_rank_blocks", low_rank}, {"stored", stored},
            {"dense_entries", dense_entries}, {"max_rank", max_rank},   {"mean_rank", mean_rank()},
            {"max_block_rank", max_block_rank},
            {"uncertified", uncertified}};
  }
};

struct AssemblyStats {
  std::vector<BlockStats> near;               // per offset d
  std::vector<std::array<BlockStats, 2>> far;  // per level, d = 2, 3
  Index near_pairs_dropped = 0;
  double near_seconds = 0.0;
  double far_seconds = 0.0;

  Index near_stored() const {
    Index s = 0;
    for (const auto& b : near) s += b.stored;
    return s;
  }
  Index near_dense() const {
    Index s = 0;
    for (const auto& b : near) s += b.dense_entries;
    return s;
  }
  Index far_stored() const {
    Index s = 0;
    for (const auto& l : far) s += l[0].stored + l[1].stored;
    return s;
  }
  Index far_dense() const {
    Index s = 0;
    for (const auto& l : far) s += l[0].dense_entries + l[1].dense_entries;
    return s;
  }
  Index far_max_rank() const {
    Index r = 0;
    for (const auto& l : far) r = std::max({r, l[0].max_rank, l[1].max_rank});
    return r;
  }
  Index uncertified() const {
    Index u = 0;
    for (const auto& b : near) u += b.uncertified;
    for (const auto& l : far) u += l[0].uncertified + l[1].uncertified;
    return u;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["near_stored"] = near_stored();
    j["near_dense"] = near_dense();
    j["far_stored"] = far_stored();
    j["far_dense"] = far_dense();
    j["far_max_rank"] = far_max_rank();
    j["uncertified_blocks"] = uncertified();
    j["near_pairs_dropped"] = near_pairs_dropped;
    j["near_seconds"] = near_seconds;
    j["far_seconds"] = far_seconds;
    for (const auto& b : near) j["near_offsets"].push_back(b.to_json());
    for (std::size_t l = 0; l < far.size(); ++l) {
      j["far_levels"].push_back({{"level", l}, {"d2", far[l][0].to_json()}, {"d3", far[l][1].to_json()}});
    }
    return j;
  }
};

/// y += alpha (M^T kron I) A (I kron M) x for a block of steps: moments
/// m = M Q^T, spatial product u = A m, expansion Y += U^T M. Q and Y view the
/// step-major block as N_s D_s x (steps D_t) matrices; m and u use the
/// (k, m, beta) layout.
inline void fast_block_matvec(const BlockSparseMatrix& A, const Eigen::MatrixXd& M, Index spatial_dofs,
                              const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y,
                              double alpha) {
  const Index p = M.rows(), cols = M.cols(), ns = spatial_dofs;
  if (x.size() != ns * cols || y.size() != ns * cols || A.rows() != ns * p || A.cols() != ns * p) {
    throw std::invalid_argument("fast_block_matvec: dimension mismatch");
  }
  Eigen::Map<const Eigen::MatrixXd, 0, Eigen::OuterStride<>> Q(x.data(), ns, cols, Eigen::OuterStride<>(ns));
  Eigen::MatrixXd Mt = M * Q.transpose();
  Eigen::VectorXd u = Eigen::VectorXd::Zero(p * ns);
  A.apply(Eigen::Map<const Eigen::VectorXd>(Mt.data(), Mt.size()), u, 1.0);
  Eigen::Map<const Eigen::MatrixXd> U(u.data(), p, ns);
  Eigen::Map<Eigen::MatrixXd, 0, Eigen::OuterStride<>> Y(y.data(), ns, cols, Eigen::OuterStride<>(ns));
  Y.noalias() += alpha * (U.transpose() * M);
}

/// Near field A_d (d < 2 n_T) on finest neighbor cluster pairs and
/// Chebyshev far field A_d^l (l <= L - 2, d = 2, 3) compressed per cluster
/// pair. The mesh must be in cluster order.
class CompressedOperator final : public SpaceTimeOperator {
 public:
  CompressedOperator(const SurfaceMesh& mesh, const ClusterTree& tree, const TemporalGrid& grid,
                     AssemblyOptions opt = {})
      : SpaceTimeOperator(grid, mesh.num_patches() * mesh.dofs_per_patch()), opt_(opt) {
    if (!tree.is_identity_order()) throw std::invalid_argument("mesh is not in cluster order");
    if (opt.cheb_order < 1) throw std::invalid_argument("Chebyshev order must be positive");
    const int L = grid.levels();
    tol_ = tolerance_schedule(opt.epsilon, static_cast<double>(std::max<Index>(1, tree.gamma())), opt.cheb_order,
                              mesh.max_diameter(), grid.step(), grid.leaf_steps(), L);
    nd_ = static_cast<int>(std::min<Index>(2 * grid.leaf_steps(), grid.num_steps()));
    auto t0 = std::chrono::steady_clock::now();
    assemble_near(mesh, tree);
    auto t1 = std::chrono::steady_clock::now();
    assemble_far(mesh, tree);
    auto t2 = std::chrono::steady_clock::now();
    stats_.near_seconds = std::chrono::duration<double>(t1 - t0).count();
    stats_.far_seconds = std::chrono::duration<double>(t2 - t1).count();
  }

  const ToleranceSchedule& tolerances() const { return tol_; }
  const AssemblyStats& stats() const { return stats_; }
  const AssemblyOptions& options() const { return opt_; }
  int cheb_order() const { return opt_.cheb_order; }
  const BlockSparseMatrix& near(int d, int j, int jp) const { return near_.at(d).at(j * grid_.dofs_per_step() + jp); }
  const BlockSparseMatrix& far(int level, int d) const { return far_.at(level).at(d - 2); }
  const Eigen::MatrixXd& moments(int level) const { return moments_.at(level); }
  int far_levels() const { return static_cast<int>(far_.size()); }

  int max_offset() const override { return nd_; }

  void apply_step(int delta, const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y,
                  double alpha) const override {
    if (delta < 0 || delta >= nd_) throw std::out_of_range("offset outside the near field");
    apply_step_blocks(near_[delta], grid_.dofs_per_step(), ns_, x, y, alpha);
  }

  void apply_steps(int delta, const Eigen::Ref<const Eigen::MatrixXd>& x, Eigen::Ref<Eigen::MatrixXd> y,
                   double alpha) const override {
    if (delta < 0 || delta >= nd_) throw std::out_of_range("offset outside the near field");
    apply_steps_blocks(near_[delta], grid_.dofs_per_step(), ns_, x, y, alpha);
  }

  void apply_far(int level, int d, const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> y,
                 double alpha) const override {
    if (level < 0 || level >= far_levels() || d < 2 || d > 3) throw std::out_of_range("far-field block out of range");
    const Index cols = grid_.steps_at_level(level) * grid_.dofs_per_step();
    if (x.size() != ns_ * cols || y.size() != ns_ * cols) throw std::invalid_argument("apply_far: dimension mismatch");
    if (!opt_.keep_far) throw std::logic_error("far field was not stored");
    fast_block_matvec(far_[level][d - 2], moments_[level], ns_, x, y, alpha);
  }

 private:
  MatrixBlock make_block(Eigen::MatrixXd B, Index row0, Index col0, double tol, bool try_aca) const {
    MatrixBlock blk;
    blk.row0 = row0;
    blk.col0 = col0;
    blk.rows = B.rows();
    blk.cols = B.cols();
    if (try_aca) {
      AcaOptions o = opt_.aca;
      o.absolute = opt_.absolute_tolerance;
      LowRankBlock lr = aca(DenseEvaluator{B}, tol, o);
      const double err = (B - lr.dense()).norm();
      const double bound = opt_.absolute_tolerance ? tol : tol * B.norm();
      if (err <= bound && blk.rows * blk.cols > 2 * lr.rank() * (blk.rows + blk.cols)) {
        lr.residual_estimate = err;
        lr.certified = true;
        blk.low_rank = true;
        blk.L = std::move(lr);
        return blk;
      }
    }
    blk.D = std::move(B);
    return blk;
  }

  void assemble_near(const SurfaceMesh& mesh, const ClusterTree& tree) {
    const int dt = grid_.dofs_per_step(), ds = mesh.dofs_per_patch();
    NearFieldIntegrator integ(mesh, grid_, opt_.quad_order, nd_);
    near_.assign(nd_, std::vector<BlockSparseMatrix>(dt * dt, BlockSparseMatrix(ns_, ns_)));
    stats_.near.assign(nd_, {});
    std::vector<double> diag;
    integ.pair(0, 0, 0, 1, diag);
    const double threshold = opt_.drop_factor * tol_.near * std::abs(diag[0]);
    const int per = integ.entries_per_offset();
    std::vector<double> buf;
    const auto& clusters = tree.clusters(0);
    for (Index c = 0; c < static_cast<Index>(clusters.size()); ++c) {
      const auto& cl = clusters[c];
      for (Index cp : cl.neighbors) {
        if (cp < c) continue;
        const auto& clp = clusters[cp];
        const Index m = cl.size() * ds, n = clp.size() * ds;
        std::vector<std::vector<Eigen::MatrixXd>> B(nd_);
        std::vector<char> active(nd_, 0);
        for (Index k = cl.begin; k < cl.end; ++k) {
          for (Index kp = clp.begin; kp < clp.end; ++kp) {
            const auto b = integ.bound(k, kp);
            int d0 = 0, d1 = nd_;
            while (d0 < d1 && b[d0] < threshold) ++d0;
            while (d1 > d0 && b[d1 - 1] < threshold) --d1;
            if (d0 == d1) {
              ++stats_.near_pairs_dropped;
              continue;
            }
            integ.pair(k, kp, d0, d1, buf);
            for (int d = d0; d < d1; ++d) {
              if (!active[d]) {
                active[d] = 1;
                B[d].assign(dt * dt, Eigen::MatrixXd::Zero(m, n));
              }
              for (int jj = 0; jj < dt * dt; ++jj) {
                const double* e = &buf[(d - d0) * per + jj * ds * ds];
                auto& M = B[d][jj];
                for (int a = 0; a < ds; ++a) {
                  for (int bb = 0; bb < ds; ++bb) M((k - cl.begin) * ds + a, (kp - clp.begin) * ds + bb) = e[a * ds + bb];
                }
              }
            }
          }
        }
        for (int d = 0; d < nd_; ++d) {
          if (!active[d]) continue;
          const bool try_aca = opt_.near_aca && (d >= 2 || c != cp);
          for (int jj = 0; jj < dt * dt; ++jj) {
            Eigen::MatrixXd Bt;
            if (c != cp) Bt = B[d][jj].transpose();
            auto blk = make_block(std::move(B[d][jj]), cl.begin * ds, clp.begin * ds, tol_.near, try_aca);
            blk.row_cluster = c;
            blk.col_cluster = cp;
            if (c != cp) {
              MatrixBlock mir;
              mir.row0 = blk.col0;
              mir.col0 = blk.row0;
              mir.rows = blk.cols;
              mir.cols = blk.rows;
              mir.row_cluster = cp;
              mir.col_cluster = c;
              if (blk.low_rank) {
                mir.low_rank = true;
                mir.L = blk.L;
                std::swap(mir.L.U, mir.L.V);
              } else {
                mir.D = std::move(Bt);
              }
              stats_.near[d].add(mir);
              near_[d][jj].add(std::move(mir));
            }
            stats_.near[d].add(blk);
            near_[d][jj].add(std::move(blk));
          }
        }
      }
    }
    for (auto& per_offset : near_) {
      for (auto& m : per_offset) m.pack();
    }
  }

  void assemble_far(const SurfaceMesh& mesh, const ClusterTree& tree) {
    const int L = grid_.levels();
    const int p = opt_.cheb_order;
    const int ds = mesh.dofs_per_patch();
    const auto pts = patch_points(mesh, opt_.quad_order);
    const Index dim = ns_ * p;
    far_.clear();
    moments_.clear();
    stats_.far.clear();
    for (int l = 0; l + 2 <= L; ++l) {
      const int ls = temporal_to_spatial_level(l, tree.levels());
      moments_.push_back(moment_matrix(grid_, l, p));
      far_.push_back({BlockSparseMatrix(dim, dim), BlockSparseMatrix(dim, dim)});
      stats_.far.push_back({});
      AcaOptions o = opt_.aca;
      o.absolute = opt_.absolute_tolerance;
      o.verify_rows = opt_.aca_verify_rows;
      o.confirm_crosses = opt_.aca_confirm_crosses;
      for (int d = 2; d <= 3; ++d) {
        FarFieldEntries entries(mesh, pts, grid_, l, d, p);
        const auto& clusters = tree.clusters(ls);
        for (Index c = 0; c < static_cast<Index>(clusters.size()); ++c) {
          const auto& cl = clusters[c];
          for (Index cp : cl.neighbors) {
            const auto& clp = clusters[cp];
            auto ev = entries.block(cl.begin, cl.end, clp.begin, clp.end);
            MatrixBlock blk;
            blk.row0 = cl.begin * ds * p;
            blk.col0 = clp.begin * ds * p;
            blk.rows = ev.rows();
            blk.cols = ev.cols();
            blk.row_cluster = c;
            blk.col_cluster = cp;
            LowRankBlock lr = aca(ev, tol_.level(l), o);
            if (lr.storage() >= blk.rows * blk.cols) {
              blk.D = lr.dense();
            } else {
              blk.low_rank = true;
              blk.L = std::move(lr);
            }
            stats_.far[l][d - 2].add(blk);
            if (opt_.keep_far) far_[l][d - 2].add(std::move(blk));
          }
        }
        far_[l][d - 2].pack(kFarPackedEntries);
      }
    }
  }

  static constexpr Index kFarPackedEntries = 1024;

  AssemblyOptions opt_;
  ToleranceSchedule tol_;
  int nd_ = 0;
  std::vector<std::vector<BlockSparseMatrix>> near_;
  std::vector<std::array<BlockSparseMatrix, 2>> far_;
  std::vector<Eigen::MatrixXd> moments_;
  AssemblyStats stats_;
};

/// Dense far-field matrix A_d^l over all patch pairs.
inline Eigen::MatrixXd dense_far_field(const SurfaceMesh& mesh, const TemporalGrid& grid, int level, int d, int p,
                                       int quad_order) {
  const auto pts = patch_points(mesh, quad_order);
  FarFieldEntries f(mesh, pts, grid, level, d, p);
  return f.dense(0, mesh.num_patches(), 0, mesh.num_patches());
}

/// (M^T kron I) A (I kron M) for a far-field matrix in the (k, m, beta) layout;
/// rows and columns of the result are in step-major order.
inline Eigen::MatrixXd chebyshev_block(const Eigen::MatrixXd& A, const Eigen::MatrixXd& M, Index spatial_dofs) {
  const Index p = M.rows(), nc = M.cols(), ns = spatial_dofs;
  if (A.rows() != ns * p || A.cols() != ns * p) throw std::invalid_argument("chebyshev_block: dimension mismatch");
  Eigen::MatrixXd C(nc * ns, nc * ns);
  for (Index a = 0; a < nc; ++a) {
    for (Index b = 0; b < nc; ++b) {
      for (Index k = 0; k < ns; ++k) {
        for (Index kp = 0; kp < ns; ++kp) {
          double s = 0.0;
          for (Index be = 0; be < p; ++be) {
            for (Index bp = 0; bp < p; ++bp) s += M(be, a) * A(k * p + be, kp * p + bp) * M(bp, b);
          }
          C(a * ns + k, b * ns + kp) = s;
        }
      }
    }
  }
  return C;
}

}  // namespace heatbem
