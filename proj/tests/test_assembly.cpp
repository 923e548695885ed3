#include <gtest/gtest.h>

#include <Eigen/Cholesky>

#include <cmath>
#include <random>

#include "heatbem/assembly.hpp"

using namespace heatbem;

namespace {

struct Setup {
  SurfaceMesh mesh;
  ClusterTree tree;
  TemporalGrid grid;
};

Setup make_setup(int refine, int a, int Ls, double eta, int L, Index nT, double T = 1.0) {
  auto [mesh, tree] = sort_by_clusters(build_sphere_mesh(refine, a), Ls, eta);
  return {std::move(mesh), std::move(tree), TemporalGrid(T, L, nT)};
}

double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / b.norm(); }

}  // namespace

TEST(Tolerances, ScheduleFormula) {
  auto s = tolerance_schedule(1e-3, 4.0, 4, 0.5, 0.01, 5, 5);
  EXPECT_NEAR(s.near, 1e-3 * 0.5 * 0.1 / (4.0 * 5.0), 1e-18);
  ASSERT_EQ(s.far.size(), 4u);
  const double plogp = 4.0 * std::log(4.0);
  for (int l = 0; l < 4; ++l) {
    const double expect = 1e-3 * std::ldexp(1.0, -l) * 0.5 / 0.1 / (4.0 * plogp * (l + 1.0) * (l + 1.0));
    EXPECT_NEAR(s.level(l) / expect, 1.0, 1e-14);
  }
  auto s1 = tolerance_schedule(1e-3, 1.0, 1, 1.0, 1.0, 1, 2);
  EXPECT_NEAR(s1.level(0), 1e-3, 1e-18);
  EXPECT_TRUE(tolerance_schedule(1e-3, 1.0, 2, 1.0, 1.0, 1, 1).far.empty());
  EXPECT_THROW(tolerance_schedule(0.0, 1.0, 2, 1.0, 1.0, 1, 3), std::invalid_argument);
  EXPECT_THROW(tolerance_schedule(1e-3, 1.0, 0, 1.0, 1.0, 1, 3), std::invalid_argument);
}

TEST(Extension, GramIsDegreeDiagonal) {
  auto mesh = build_sphere_mesh(1, 1);
  auto ext = build_extension(mesh);
  Eigen::MatrixXd EtE = Eigen::MatrixXd(ext.E.transpose() * ext.E);
  Eigen::MatrixXd D = ext.degrees.asDiagonal();
  EXPECT_EQ((EtE - D).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(ext.degrees.sum(), 3.0 * mesh.num_patches());
  Eigen::VectorXd q = Eigen::VectorXd::LinSpaced(mesh.num_nodes(), 1.0, 2.0);
  auto e = ext.extend(q);
  for (Index k = 0; k < mesh.num_patches(); ++k) {
    for (int m = 0; m < 3; ++m) EXPECT_EQ(e(k * 3 + m), q(mesh.node(k, m)));
  }
  EXPECT_THROW(ext.extend(e), std::invalid_argument);
}

TEST(Extension, PiecewiseConstantIsIdentity) {
  auto mesh = build_sphere_mesh(1, 0);
  auto ext = build_extension(mesh);
  EXPECT_EQ(ext.rows(), ext.cols());
  EXPECT_EQ((Eigen::MatrixXd(ext.E) - Eigen::MatrixXd::Identity(ext.rows(), ext.cols())).norm(), 0.0);
}

TEST(BlockSparse, ApplyMatchesDense) {
  std::mt19937 rng(3);
  std::normal_distribution<double> nd;
  BlockSparseMatrix A(10, 8);
  Eigen::MatrixXd D = Eigen::MatrixXd::NullaryExpr(4, 3, [&] { return nd(rng); });
  A.add_dense(1, 2, D);
  MatrixBlock lr;
  lr.row0 = 5;
  lr.col0 = 0;
  lr.rows = 5;
  lr.cols = 8;
  lr.low_rank = true;
  lr.L.U = Eigen::MatrixXd::NullaryExpr(5, 2, [&] { return nd(rng); });
  lr.L.V = Eigen::MatrixXd::NullaryExpr(8, 2, [&] { return nd(rng); });
  A.add(lr);
  Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(8, [&] { return nd(rng); });
  Eigen::VectorXd y = Eigen::VectorXd::Ones(10);
  A.apply(x, y, -2.0);
  Eigen::VectorXd ref = Eigen::VectorXd::Ones(10) - 2.0 * A.to_dense() * x;
  EXPECT_LT((y - ref).norm(), 1e-13);
  EXPECT_EQ(A.storage(), 12 + 2 * 13);
  EXPECT_EQ(A.dense_entries(), 12 + 40);
  EXPECT_THROW(A.add_dense(8, 0, D), std::out_of_range);
}

TEST(NearField, PairEntriesAreSymmetric) {
  for (int a : {0, 1}) {
    auto mesh = build_sphere_mesh(1, a);
    TemporalGrid grid(1.0, 2, 2, 0);
    NearFieldIntegrator integ(mesh, grid, 3, 4);
    const int ds = mesh.dofs_per_patch();
    std::vector<double> e1, e2;
    for (Index kp : {Index{0}, Index{1}, Index{5}, Index{20}}) {
      integ.pair(0, kp, 0, 4, e1);
      integ.pair(kp, 0, 0, 4, e2);
      for (int d = 0; d < 4; ++d) {
        for (int m = 0; m < ds; ++m) {
          for (int mp = 0; mp < ds; ++mp) {
            const double x = e1[d * ds * ds + m * ds + mp], y = e2[d * ds * ds + mp * ds + m];
            EXPECT_NEAR(x, y, 1e-9 * std::abs(x) + 1e-300) << "a=" << a << " kp=" << kp << " d=" << d;
          }
        }
      }
    }
  }
}

TEST(NearField, SubrangeMatchesFullRange) {
  auto mesh = build_sphere_mesh(1, 1);
  TemporalGrid grid(1.0, 2, 2, 1);
  NearFieldIntegrator integ(mesh, grid, 2, 6);
  std::vector<double> all, part;
  const int per = integ.entries_per_offset();
  for (Index kp : {Index{0}, Index{3}, Index{17}}) {
    integ.pair(2, kp, 0, 6, all);
    integ.pair(2, kp, 1, 4, part);
    for (int i = 0; i < 3 * per; ++i) EXPECT_DOUBLE_EQ(part[i], all[per + i]);
  }
}

TEST(NearField, BoundDominatesEntries) {
  auto mesh = build_sphere_mesh(2, 0);
  TemporalGrid grid(1.0, 3, 2, 0);
  NearFieldIntegrator integ(mesh, grid, 2, 8);
  std::vector<double> e;
  for (Index kp = 0; kp < mesh.num_patches(); kp += 7) {
    auto b = integ.bound(0, kp);
    integ.pair(0, kp, 0, 8, e);
    for (int d = 0; d < 8; ++d) EXPECT_LE(std::abs(e[d]), b[d] * (1 + 1e-12)) << kp << " " << d;
  }
}

TEST(DenseToeplitz, DiagonalBlockIsSymmetricPositiveDefinite) {
  for (int a : {0, 1}) {
    auto mesh = build_sphere_mesh(1, a);
    TemporalGrid grid(1.0, 1, 2, 0);
    DenseToeplitzOperator op(mesh, grid);
    Eigen::MatrixXd A0 = op.step_matrix(0);
    EXPECT_LT((A0 - A0.transpose()).norm(), 1e-14 * A0.norm());
    Eigen::LLT<Eigen::MatrixXd> llt(A0);
    EXPECT_EQ(llt.info(), Eigen::Success);
  }
}

TEST(DenseToeplitz, MemoryGuard) {
  auto mesh = build_sphere_mesh(2, 0);
  TemporalGrid grid(1.0, 3, 5, 0);
  DenseAssemblyOptions opt;
  opt.max_memory_bytes = 1e5;
  EXPECT_THROW(DenseToeplitzOperator(mesh, grid, opt), ResourceError);
}

TEST(DenseToeplitz, FarBlockMatchesApply) {
  auto mesh = build_sphere_mesh(1, 0);
  TemporalGrid grid(1.0, 3, 2, 0);
  DenseToeplitzOperator op(mesh, grid);
  Eigen::MatrixXd C = op.far_block(1, 2);
  std::mt19937 rng(1);
  std::normal_distribution<double> nd;
  Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(C.cols(), [&] { return nd(rng); });
  Eigen::VectorXd y = Eigen::VectorXd::Zero(C.rows());
  op.apply_far(1, 2, x, y, 1.0);
  EXPECT_LT((y - C * x).norm(), 1e-12 * y.norm());
}

TEST(Compressed, NearFieldMatchesDenseOnNeighborPairs) {
  auto s = make_setup(1, 1, 1, 0.4, 2, 2);
  AssemblyOptions opt;
  opt.near_aca = false;
  opt.drop_factor = 0.0;
  CompressedOperator op(s.mesh, s.tree, s.grid, opt);
  DenseToeplitzOperator dense(s.mesh, s.grid);
  ASSERT_EQ(op.max_offset(), 4);
  for (int d = 0; d < 4; ++d) {
    Eigen::MatrixXd N = op.near(d, 0, 0).to_dense();
    const auto& D = dense.block(d, 0, 0);
    for (Index i = 0; i < N.rows(); ++i) {
      for (Index j = 0; j < N.cols(); ++j) {
        if (N(i, j) != 0.0) EXPECT_NEAR(N(i, j), D(i, j), 1e-14 * std::abs(D(i, j)));
      }
    }
  }
  Eigen::MatrixXd A0 = op.near(0, 0, 0).to_dense();
  EXPECT_EQ((A0 - A0.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Compressed, NearFieldAcaWithinTolerance) {
  auto s = make_setup(1, 0, 2, 0.4, 3, 2);
  AssemblyOptions opt;
  opt.epsilon = 1e-2;
  CompressedOperator op(s.mesh, s.tree, s.grid, opt);
  opt.near_aca = false;
  opt.drop_factor = 0.0;
  CompressedOperator ref(s.mesh, s.tree, s.grid, opt);
  for (int d = 0; d < op.max_offset(); ++d) {
    Eigen::MatrixXd A = op.near(d, 0, 0).to_dense(), B = ref.near(d, 0, 0).to_dense();
    EXPECT_LT((A - B).norm(), 10.0 * op.tolerances().near * B.norm() + 1e-3 * op.tolerances().near * B.norm() * B.rows())
        << "d=" << d;
    EXPECT_LE(op.near(d, 0, 0).storage(), ref.near(d, 0, 0).storage());
  }
  Eigen::MatrixXd A0 = op.near(0, 0, 0).to_dense();
  EXPECT_LT((A0 - A0.transpose()).cwiseAbs().maxCoeff(), 1e-14 * A0.cwiseAbs().maxCoeff());
}

TEST(FarField, RowsAndColumnsAgree) {
  for (int a : {0, 1}) {
    auto mesh = build_sphere_mesh(1, a);
    TemporalGrid grid(1.0, 3, 2, 0);
    auto pts = patch_points(mesh, 2);
    FarFieldEntries f(mesh, pts, grid, 1, 3, 3);
    auto b = f.block(2, 9, 4, 12);
    Eigen::MatrixXd R = f.dense(2, 9, 4, 12);
    Eigen::VectorXd c;
    for (Index j = 0; j < b.cols(); ++j) {
      b.col(j, c);
      EXPECT_LT((c - R.col(j)).norm(), 1e-14 * R.norm());
    }
  }
}

TEST(FarField, ChebyshevBlockConvergesToExactBlock) {
  auto mesh = build_sphere_mesh(1, 0);
  TemporalGrid grid(1.0, 3, 2, 0);
  DenseToeplitzOperator op(mesh, grid);
  const Index ns = mesh.num_patches();
  for (int d : {2, 3}) {
    Eigen::MatrixXd exact = op.far_block(1, d);
    double prev = 1.0;
    for (int p : {2, 4, 6}) {
      auto A = dense_far_field(mesh, grid, 1, d, p, 2);
      auto C = chebyshev_block(A, moment_matrix(grid, 1, p), ns);
      const double err = rel(C, exact);
      EXPECT_LT(err, 0.5 * prev) << "d=" << d << " p=" << p;
      prev = err;
    }
    EXPECT_LT(prev, 1e-4);
  }
}

TEST(Compressed, FarFieldApplyMatchesDenseOperator) {
  auto s = make_setup(1, 0, 1, 0.4, 3, 2);
  DenseToeplitzOperator dense(s.mesh, s.grid);
  AssemblyOptions opt;
  opt.epsilon = 1e-8;
  opt.cheb_order = 8;
  CompressedOperator op(s.mesh, s.tree, s.grid, opt);
  std::mt19937 rng(5);
  std::normal_distribution<double> nd;
  for (int l = 0; l <= 1; ++l) {
    for (int d : {2, 3}) {
      const Index n = s.grid.steps_at_level(l) * op.step_dofs();
      Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(n, [&] { return nd(rng); });
      Eigen::VectorXd y1 = Eigen::VectorXd::Zero(n), y2 = Eigen::VectorXd::Zero(n);
      op.apply_far(l, d, x, y1, 1.0);
      dense.apply_far(l, d, x, y2, 1.0);
      EXPECT_LT((y1 - y2).norm(), 1e-5 * y2.norm()) << "l=" << l << " d=" << d;
    }
  }
}

TEST(Compressed, FarFieldBlocksMeetTolerance) {
  auto s = make_setup(1, 0, 2, 0.4, 5, 2);
  AssemblyOptions opt;
  opt.epsilon = 1e-3;
  CompressedOperator op(s.mesh, s.tree, s.grid, opt);
  auto pts = patch_points(s.mesh, opt.quad_order);
  for (int l = 0; l < op.far_levels(); ++l) {
    const int ls = temporal_to_spatial_level(l, s.tree.levels());
    for (int d : {2, 3}) {
      FarFieldEntries f(s.mesh, pts, s.grid, l, d, opt.cheb_order);
      for (const auto& b : op.far(l, d).blocks()) {
        const auto& cl = s.tree.cluster(ls, b.row_cluster);
        const auto& cp = s.tree.cluster(ls, b.col_cluster);
        Eigen::MatrixXd A = f.dense(cl.begin, cl.end, cp.begin, cp.end);
        EXPECT_LE((A - b.dense()).norm(), 3.0 * op.tolerances().level(l) * A.norm());
      }
    }
  }
  EXPECT_EQ(op.stats().uncertified(), 0);
  auto j = op.stats().to_json();
  EXPECT_EQ(j["far_stored"].get<Index>(), op.stats().far_stored());
  EXPECT_EQ(j["far_levels"].size(), 4u);
}

TEST(Compressed, RequiresClusterOrder) {
  auto mesh = build_sphere_mesh(2, 0);
  ClusterTree tree(mesh, 2, 0.4);
  if (tree.is_identity_order()) GTEST_SKIP();
  EXPECT_THROW(CompressedOperator(mesh, tree, TemporalGrid(1.0, 2, 2)), std::invalid_argument);
}
