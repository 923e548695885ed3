#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "heatbem/assembly.hpp"
#include "heatbem/clustering.hpp"
#include "heatbem/mesh.hpp"
#include "heatbem/quadrature.hpp"
#include "heatbem/solver.hpp"
#include "heatbem/temporal.hpp"

namespace heatbem {

struct RunConfig {
  double epsilon = 2e-2;
  int spatial_levels = 2;
  int temporal_levels = 3;
  double eta0 = 0.40;
  int quad_order = 2;
  int cheb_order = 4;
  int element_order = 0;
  int mesh_level = 0;
  Index leaf_steps = 5;
  double final_time = 1.0;
  bool force_oracle = false;
  bool near_aca = true;
  unsigned seed = 0;
  double reference_factor = 1e-3;
  double dense_limit_bytes = 5e8;
  bool solve = true;
  std::string label;

  Index num_steps() const { return leaf_steps << temporal_levels; }

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    if (spatial_levels < 0 || temporal_levels < 0 || temporal_levels > 20) throw std::invalid_argument("bad level count");
    if (!(eta0 > 0.0 && eta0 < 1.0)) throw std::invalid_argument("eta0 must lie in (0, 1)");
    if (quad_order < 1 || cheb_order < 1) throw std::invalid_argument("orders must be positive");
    if (element_order != 0 && element_order != 1) throw std::invalid_argument("element order must be 0 or 1");
    if (mesh_level < 0 || leaf_steps < 1) throw std::invalid_argument("bad mesh level or leaf size");
    if (!(final_time > 0.0) || !(reference_factor > 0.0)) throw std::invalid_argument("bad final time or reference factor");
  }

  nlohmann::json to_json() const {
    return {{"epsilon", epsilon},       {"levels_spatial", spatial_levels}, {"levels_temporal", temporal_levels},
            {"eta0", eta0},             {"quad_order", quad_order},         {"cheb_order", cheb_order},
            {"element_order", element_order}, {"mesh_level", mesh_level},  {"leaf_nt", leaf_steps},
            {"nt", num_steps()},        {"final_time", final_time},         {"oracle", force_oracle},
            {"near_aca", near_aca},     {"seed", seed},                     {"label", label}};
  }
};

/// Rows 1-5 of the piecewise constant parameter table.
inline RunConfig table1_row(int row) {
  static const double eps[] = {2e-2, 2e-3, 2e-4, 2e-5, 2e-6};
  static const int Ls[] = {2, 2, 3, 4, 5};
  static const int L[] = {3, 5, 7, 9, 11};
  static const double eta[] = {0.40, 0.39, 0.36, 0.33, 0.30};
  if (row < 1 || row > 5) throw std::out_of_range("table 1 has rows 1-5");
  RunConfig c;
  c.epsilon = eps[row - 1];
  c.spatial_levels = Ls[row - 1];
  c.temporal_levels = L[row - 1];
  c.eta0 = eta[row - 1];
  c.quad_order = 2;
  c.cheb_order = 4;
  c.element_order = 0;
  c.mesh_level = row - 1;
  c.leaf_steps = 5;
  c.label = "table1_row" + std::to_string(row);
  return c;
}

/// Rows 1-4 of the piecewise linear parameter table.
inline RunConfig table2_row(int row, int quad_order = 3) {
  static const double eps[] = {4e-3, 1.6e-4, 1e-5, 6.25e-7};
  static const int Ls[] = {2, 2, 3, 4};
  static const int L[] = {3, 5, 7, 9};
  static const double eta[] = {0.40, 0.35, 0.30, 0.25};
  static const int p[] = {4, 4, 4, 5};
  if (row < 1 || row > 4) throw std::out_of_range("table 2 has rows 1-4");
  RunConfig c;
  c.epsilon = eps[row - 1];
  c.spatial_levels = Ls[row - 1];
  c.temporal_levels = L[row - 1];
  c.eta0 = eta[row - 1];
  c.quad_order = quad_order;
  c.cheb_order = p[row - 1];
  c.element_order = 1;
  c.mesh_level = row - 1;
  c.leaf_steps = 5;
  c.label = "table2_row" + std::to_string(row) + "_pq" + std::to_string(quad_order);
  return c;
}

// ---------------------------------------------------------------------------
// Manufactured solution

inline double manufactured_density(const Vec3& x, double t) {
  return 1.0 + x(0) + x(1) * x(2) + t * x(0) + t * t;
}

/// Coefficients of the discrete approximation of a density g(x, t):
/// piecewise constant in space by patch means, piecewise linear by vertex
/// interpolation; in time the L2 projection onto the step polynomials.
/// a = 0 returns patch-local layout, a = 1 node layout.
inline Eigen::VectorXd project_density(const SurfaceMesh& mesh, const TemporalGrid& grid,
                                       const std::function<double(const Vec3&, double)>& g) {
  const int pt = grid.degree(), dt = grid.dofs_per_step();
  const double h = grid.step();
  const auto& gt = gauss_legendre(pt + 3);
  Eigen::MatrixXd Mt = Eigen::MatrixXd::Zero(dt, dt);
  for (int q = 0; q < gt.size(); ++q) {
    for (int j = 0; j < dt; ++j) {
      for (int jp = 0; jp < dt; ++jp) Mt(j, jp) += gt.weights[q] * temporal_shape(pt, j, gt.nodes[q]) * temporal_shape(pt, jp, gt.nodes[q]);
    }
  }
  Eigen::LDLT<Eigen::MatrixXd> time_solver(Mt);
  const Index nn = mesh.element_order() == 0 ? mesh.num_patches() : mesh.num_vertices();
  Eigen::VectorXd out(grid.num_steps() * dt * nn);
  const auto pts = patch_points(mesh, 4);
  Eigen::VectorXd moments(dt);
  for (Index i = 0; i < grid.num_steps(); ++i) {
    for (Index n = 0; n < nn; ++n) {
      moments.setZero();
      for (int q = 0; q < gt.size(); ++q) {
        const double t = h * (static_cast<double>(i) + gt.nodes[q]);
        double v;
        if (mesh.element_order() == 0) {
          const auto& P = pts[n];
          v = 0.0;
          for (std::size_t a = 0; a < P.x.size(); ++a) v += P.w[a] * g(P.x[a], t);
          v /= mesh.geometry(n).area;
        } else {
          v = g(mesh.vertex(n), t);
        }
        for (int j = 0; j < dt; ++j) moments(j) += gt.weights[q] * v * temporal_shape(pt, j, gt.nodes[q]);
      }
      Eigen::VectorXd c = time_solver.solve(moments);
      for (int j = 0; j < dt; ++j) out((i * dt + j) * nn + n) = c(j);
    }
  }
  return out;
}

/// Value of a discrete density at a point of patch k with shape values phi.
inline double density_value(const SurfaceMesh& mesh, const Eigen::VectorXd& coeff, Index step_block, Index k,
                            const std::array<double, 3>& phi) {
  if (mesh.element_order() == 0) return coeff(step_block * mesh.num_patches() + k);
  double v = 0.0;
  for (int m = 0; m < 3; ++m) v += phi[m] * coeff(step_block * mesh.num_vertices() + mesh.node(k, m));
  return v;
}

/// L2(Gamma_h x (0, T)) norm of a discrete density given by its
/// coefficients (patch layout for a = 0, node layout for a = 1), computed
/// exactly with the element mass matrices.
inline double l2_norm(const SurfaceMesh& mesh, const TemporalGrid& grid, const Eigen::VectorXd& coeff) {
  const int pt = grid.degree(), dt = grid.dofs_per_step();
  const Index nn = mesh.element_order() == 0 ? mesh.num_patches() : mesh.num_vertices();
  if (coeff.size() != grid.num_steps() * dt * nn) throw std::invalid_argument("l2_norm: coefficient size mismatch");
  const auto& gt = gauss_legendre(pt + 1);
  Eigen::MatrixXd Mt = Eigen::MatrixXd::Zero(dt, dt);
  for (int q = 0; q < gt.size(); ++q) {
    for (int j = 0; j < dt; ++j) {
      for (int jp = 0; jp < dt; ++jp) {
        Mt(j, jp) += grid.step() * gt.weights[q] * temporal_shape(pt, j, gt.nodes[q]) * temporal_shape(pt, jp, gt.nodes[q]);
      }
    }
  }
  double sum = 0.0;
  for (Index i = 0; i < grid.num_steps(); ++i) {
    for (int j = 0; j < dt; ++j) {
      for (int jp = 0; jp < dt; ++jp) {
        const Index bj = i * dt + j, bjp = i * dt + jp;
        double s = 0.0;
        for (Index k = 0; k < mesh.num_patches(); ++k) {
          const double area = mesh.geometry(k).area;
          if (mesh.element_order() == 0) {
            s += area * coeff(bj * nn + k) * coeff(bjp * nn + k);
          } else {
            for (int m = 0; m < 3; ++m) {
              for (int mp = 0; mp < 3; ++mp) {
                const double mass = area / 12.0 * (m == mp ? 2.0 : 1.0);
                s += mass * coeff(bj * nn + mesh.node(k, m)) * coeff(bjp * nn + mesh.node(k, mp));
              }
            }
          }
        }
        sum += Mt(j, jp) * s;
      }
    }
  }
  return std::sqrt(std::max(0.0, sum));
}

/// L2 distance between two discrete densities in the same space.
inline double l2_error(const Eigen::VectorXd& qh, const Eigen::VectorXd& qs, const SurfaceMesh& mesh,
                       const TemporalGrid& grid) {
  if (qh.size() != qs.size()) throw std::invalid_argument("l2_error: size mismatch");
  return l2_norm(mesh, grid, qh - qs);
}

/// L2(Gamma_h x (0, T)) distance between a discrete density and a function,
/// by tensor quadrature on every patch and step.
inline double l2_error_to_function(const Eigen::VectorXd& qh, const SurfaceMesh& mesh, const TemporalGrid& grid,
                                   const std::function<double(const Vec3&, double)>& g, int space_order = 4) {
  const int pt = grid.degree(), dt = grid.dofs_per_step();
  const auto pts = patch_points(mesh, space_order);
  const auto& gt = gauss_legendre(pt + 3);
  const double h = grid.step();
  double sum = 0.0;
  for (Index i = 0; i < grid.num_steps(); ++i) {
    for (int q = 0; q < gt.size(); ++q) {
      const double t = h * (static_cast<double>(i) + gt.nodes[q]);
      double chi[8];
      for (int j = 0; j < dt; ++j) chi[j] = temporal_shape(pt, j, gt.nodes[q]);
      for (Index k = 0; k < mesh.num_patches(); ++k) {
        const auto& P = pts[k];
        for (std::size_t a = 0; a < P.x.size(); ++a) {
          double v = 0.0;
          for (int j = 0; j < dt; ++j) v += chi[j] * density_value(mesh, qh, i * dt + j, k, P.phi[a]);
          const double e = v - g(P.x[a], t);
          sum += h * gt.weights[q] * P.w[a] * e * e;
        }
      }
    }
  }
  return std::sqrt(sum);
}

// ---------------------------------------------------------------------------
// Benchmark pipeline

struct RunReport {
  RunConfig config;
  bool ok = false;
  std::string failure;
  Index num_patches = 0, num_vertices = 0, num_steps = 0;
  double h_s = 0.0, h_t = 0.0;
  Index gamma = 0;
  double setup_seconds = 0.0;
  double rhs_seconds = 0.0;
  double solve_seconds = 0.0;
  std::string reference;  // dense or compressed
  double error = NAN;            // against the exact density
  double projected_error = NAN;  // against the projected density
  double exact_norm = NAN;
  ToleranceSchedule tolerances;
  AssemblyStats assembly;
  SolveReport solve;
  std::vector<std::string> warnings;

  Index ns_nt() const { return num_patches * num_steps; }
  double far_ratio() const {
    return assembly.far_dense() ? static_cast<double>(assembly.far_stored()) / assembly.far_dense() : NAN;
  }
  double near_ratio() const {
    return assembly.near_dense() ? static_cast<double>(assembly.near_stored()) / assembly.near_dense() : NAN;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config"] = config.to_json();
    j["status"] = ok ? "ok" : "failed";
    if (!ok) j["failure"] = failure;
    j["num_patches"] = num_patches;
    j["num_vertices"] = num_vertices;
    j["num_steps"] = num_steps;
    j["ns_nt"] = ns_nt();
    j["h_s"] = h_s;
    j["h_t"] = h_t;
    j["gamma"] = gamma;
    j["setup_seconds"] = setup_seconds;
    j["rhs_seconds"] = rhs_seconds;
    j["solve_seconds"] = solve_seconds;
    j["reference"] = reference;
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    j["l2_error"] = num(error);
    j["l2_error_projected"] = num(projected_error);
    j["l2_norm_exact"] = num(exact_norm);
    j["far_stored"] = assembly.far_stored();
    j["far_dense"] = assembly.far_dense();
    j["near_stored"] = assembly.near_stored();
    j["near_dense"] = assembly.near_dense();
    j["far_ratio"] = num(far_ratio());
    j["near_ratio"] = num(near_ratio());
    j["tolerances"] = {{"near", tolerances.near}, {"far", tolerances.far}};
    j["assembly"] = assembly.to_json();
    j["solve"] = solve.to_json();
    j["warnings"] = warnings;
    return j;
  }
};

/// Manufactured right-hand side for the coefficients qs (patch or node
/// layout), by applying the reference operator.
inline Eigen::VectorXd apply_operator(const SpaceTimeOperator& op, const ExtensionOperator* ext,
                                      const Eigen::VectorXd& q, bool flat) {
  if (ext) return apply_continuous(op, *ext, q, !flat);
  return flat ? apply_flat(op, q) : apply_hierarchical(op, q);
}

/// Runs the full pipeline for one configuration. Failures are recorded in the
/// report instead of propagating.
inline RunReport run_benchmark(const RunConfig& cfg, std::ostream* log = nullptr) {
  using Clock = std::chrono::steady_clock;
  auto since = [](Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); };
  RunReport rep;
  rep.config = cfg;
  try {
    cfg.validate();
    auto base = build_sphere_mesh(cfg.mesh_level, cfg.element_order, std::max(cfg.mesh_level, kDefaultMaxSphereLevel));
    auto [mesh, tree] = sort_by_clusters(base, cfg.spatial_levels, cfg.eta0);
    TemporalGrid grid(cfg.final_time, cfg.temporal_levels, cfg.leaf_steps, 0);
    rep.num_patches = mesh.num_patches();
    rep.num_vertices = mesh.num_vertices();
    rep.num_steps = grid.num_steps();
    rep.h_s = mesh.max_diameter();
    rep.h_t = grid.step();
    rep.gamma = tree.gamma();
    if (log) *log << "[" << cfg.label << "] N_s=" << rep.num_patches << " N_t=" << rep.num_steps << " assembling\n";

    AssemblyOptions aopt;
    aopt.epsilon = cfg.epsilon;
    aopt.cheb_order = cfg.cheb_order;
    aopt.quad_order = cfg.quad_order;
    aopt.near_aca = cfg.near_aca;
    aopt.keep_far = cfg.solve;

    std::unique_ptr<ExtensionOperator> ext;
    if (cfg.element_order == 1) ext = std::make_unique<ExtensionOperator>(build_extension(mesh));
    Eigen::VectorXd qs, rhs;
    auto t0 = Clock::now();
    if (cfg.solve) {
      qs = project_density(mesh, grid, manufactured_density);
      const int dt = grid.dofs_per_step();
      const double sdofs = static_cast<double>(mesh.num_patches() * mesh.dofs_per_patch());
      const double dense_bytes = 8.0 * grid.num_steps() * dt * dt * sdofs * sdofs;
      if (cfg.force_oracle || dense_bytes <= cfg.dense_limit_bytes) {
        DenseAssemblyOptions dopt;
        dopt.quad_order = cfg.quad_order;
        dopt.max_memory_bytes = cfg.force_oracle ? std::max(dense_bytes, cfg.dense_limit_bytes) : cfg.dense_limit_bytes;
        DenseToeplitzOperator ref(mesh, grid, dopt);
        rhs = apply_operator(ref, ext.get(), qs, true);
        rep.reference = "dense";
      } else {
        AssemblyOptions ropt = aopt;
        ropt.epsilon = cfg.epsilon * cfg.reference_factor;
        CompressedOperator ref(mesh, tree, grid, ropt);
        rhs = apply_operator(ref, ext.get(), qs, false);
        rep.reference = "compressed";
      }
      rep.rhs_seconds = since(t0);
      if (log) *log << "[" << cfg.label << "] rhs (" << rep.reference << ") " << rep.rhs_seconds << " s\n";
    }

    t0 = Clock::now();
    CompressedOperator op(mesh, tree, grid, aopt);
    rep.setup_seconds = since(t0);
    rep.tolerances = op.tolerances();
    rep.assembly = op.stats();
    if (rep.assembly.uncertified() > 0) {
      rep.warnings.push_back(std::to_string(rep.assembly.uncertified()) + " blocks without certified tolerance");
    }
    if (log) *log << "[" << cfg.label << "] setup " << rep.setup_seconds << " s\n";
    if (!cfg.solve) {
      rep.ok = true;
      return rep;
    }

    StepSolverOptions sopt;
    sopt.cg.tol = cg_tolerance(op.tolerances().near);
    t0 = Clock::now();
    Eigen::VectorXd qh;
    if (ext) {
      qh = continuous_solve(op, *ext, rhs, sopt, &rep.solve);
    } else {
      StepSolver solver(op, nullptr, sopt);
      qh = hierarchical_solve(op, solver, rhs, &rep.solve);
    }
    rep.solve_seconds = since(t0);
    rep.error = l2_error_to_function(qh, mesh, grid, manufactured_density);
    rep.projected_error = l2_error(qh, qs, mesh, grid);
    rep.exact_norm = l2_error_to_function(Eigen::VectorXd::Zero(qh.size()), mesh, grid, manufactured_density);
    if (log) {
      *log << "[" << cfg.label << "] solve " << rep.solve_seconds << " s, L2 error " << rep.error
           << ", CG mean iterations " << rep.solve.mean_iterations() << "\n";
    }
    rep.ok = true;
  } catch (const std::exception& e) {
    rep.ok = false;
    rep.failure = e.what();
    if (log) *log << "[" << cfg.label << "] failed: " << e.what() << "\n";
  }
  return rep;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope needs two or more points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  if (den == 0.0) throw std::invalid_argument("loglog_slope: degenerate abscissae");
  return (n * sxy - sx * sy) / den;
}

/// report.json and plots/{setup,solve,error,far_entries,near_entries}.csv.
inline void write_reports(const std::vector<RunReport>& runs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "plots");
  nlohmann::json j;
  for (const auto& r : runs) j["runs"].push_back(r.to_json());
  std::vector<double> hs, err, nsnt, solve;
  for (const auto& r : runs) {
    if (!r.ok || !std::isfinite(r.error)) continue;
    hs.push_back(r.h_s);
    err.push_back(r.error);
    nsnt.push_back(static_cast<double>(r.ns_nt()));
    solve.push_back(r.solve_seconds);
  }
  if (hs.size() >= 2) {
    j["error_slope_vs_h_s"] = loglog_slope(hs, err);
    j["solve_time_slope_vs_ns_nt"] = loglog_slope(nsnt, solve);
  }
  std::ofstream(dir / "report.json") << j.dump(2) << "\n";
  auto csv = [&](const std::string& name, auto value) {
    std::ofstream f(dir / "plots" / (name + ".csv"));
    f << "NsNt,value\n";
    for (const auto& r : runs) {
      const double v = value(r);
      if (r.ok && std::isfinite(v)) f << r.ns_nt() << "," << v << "\n";
    }
  };
  csv("setup", [](const RunReport& r) { return r.setup_seconds; });
  csv("solve", [](const RunReport& r) { return r.config.solve ? r.solve_seconds : NAN; });
  csv("error", [](const RunReport& r) { return r.error; });
  csv("far_entries", [](const RunReport& r) { return static_cast<double>(r.assembly.far_stored()); });
  csv("near_entries", [](const RunReport& r) { return static_cast<double>(r.assembly.near_stored()); });
}

}  // namespace heatbem
