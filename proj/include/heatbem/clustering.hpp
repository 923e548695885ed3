#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "heatbem/mesh.hpp"

namespace heatbem {

/// Nonempty cube of one level. Patches are stored in tree order, so the
/// cluster covers the contiguous range [begin, end) of ClusterTree::order().
struct Cluster {
  std::array<std::int64_t, 3> cube{};
  Index begin = 0;
  Index end = 0;
  Vec3 centroid = Vec3::Zero();
  double diameter = 0.0;
  std::vector<Index> neighbors;

  Index size() const { return end - begin; }
};

/// (rho + rho') / |x - x'|; infinite for the same cluster or coincident centroids.
inline double separation_ratio(const Cluster& a, const Cluster& b, bool same) {
  if (same) return std::numeric_limits<double>::infinity();
  const double dist = (a.centroid - b.centroid).norm();
  if (dist == 0.0) return std::numeric_limits<double>::infinity();
  return (a.diameter + b.diameter) / dist;
}

/// Uniform cube hierarchy over the patch centroids. Level 0 holds the finest
/// cubes (2^L_s per direction of the bounding cube), level L_s the single
/// root cube.
class ClusterTree {
 public:
  ClusterTree(const SurfaceMesh& mesh, int spatial_levels, double eta0) : Ls_(spatial_levels), eta0_(eta0) {
    if (mesh.num_patches() == 0) throw std::invalid_argument("cluster tree of an empty mesh");
    if (spatial_levels < 0 || spatial_levels > 20) throw std::invalid_argument("spatial levels out of range");
    if (!(eta0 > 0.0 && eta0 < 1.0)) throw std::invalid_argument("eta0 must lie in (0, 1)");
    const Index ns = mesh.num_patches();
    if (ns > 1) {
      bool all_same = true;
      for (Index k = 1; k < ns && all_same; ++k) {
        all_same = (mesh.geometry(k).centroid - mesh.geometry(0).centroid).norm() == 0.0;
      }
      if (all_same) throw std::invalid_argument("degenerate mesh: all patch centroids coincide");
    }
    Vec3 lo = mesh.vertex(0), hi = mesh.vertex(0);
    for (const auto& v : mesh.vertices()) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    const double edge = std::max((hi - lo).maxCoeff(), 1e-300);
    origin_ = lo;
    edge_ = edge;
    const std::int64_t cells = std::int64_t{1} << Ls_;
    const double cell = edge / static_cast<double>(cells);

    std::vector<std::array<std::int64_t, 3>> fine(ns);
    std::vector<std::uint64_t> key(ns);
    for (Index k = 0; k < ns; ++k) {
      const Vec3 u = (mesh.geometry(k).centroid - lo) / cell;
      for (int a = 0; a < 3; ++a) {
        // Points on a cube face belong to the lower cube.
        auto c = static_cast<std::int64_t>(std::ceil(u[a])) - 1;
        fine[k][a] = std::clamp<std::int64_t>(c, 0, cells - 1);
      }
      key[k] = morton(fine[k]);
    }
    order_.resize(ns);
    std::iota(order_.begin(), order_.end(), Index{0});
    std::stable_sort(order_.begin(), order_.end(), [&](Index a, Index b) { return key[a] < key[b]; });

    levels_.resize(Ls_ + 1);
    for (int l = 0; l <= Ls_; ++l) {
      auto& clusters = levels_[l];
      for (Index pos = 0; pos < ns;) {
        const std::uint64_t ck = key[order_[pos]] >> (3 * l);
        Index end = pos;
        while (end < ns && (key[order_[end]] >> (3 * l)) == ck) ++end;
        Cluster c;
        for (int a = 0; a < 3; ++a) c.cube[a] = fine[order_[pos]][a] >> l;
        c.begin = pos;
        c.end = end;
        finish_cluster(mesh, c);
        clusters.push_back(std::move(c));
        pos = end;
      }
      build_neighbors(l);
    }
  }

  int levels() const { return Ls_; }
  double eta0() const { return eta0_; }
  const Vec3& origin() const { return origin_; }
  double edge() const { return edge_; }

  /// order()[i] is the mesh patch at tree position i.
  const std::vector<Index>& order() const { return order_; }
  bool is_identity_order() const {
    for (Index i = 0; i < static_cast<Index>(order_.size()); ++i) {
      if (order_[i] != i) return false;
    }
    return true;
  }

  const std::vector<Cluster>& clusters(int level) const { return levels_.at(level); }
  const Cluster& cluster(int level, Index c) const { return levels_.at(level).at(c); }

  double separation_ratio(int level, Index a, Index b) const {
    return heatbem::separation_ratio(cluster(level, a), cluster(level, b), a == b);
  }

  /// Largest neighbor count over the given level.
  Index gamma(int level) const {
    Index g = 0;
    for (const auto& c : levels_.at(level)) g = std::max<Index>(g, c.neighbors.size());
    return g;
  }

  /// Largest neighbor count over all levels.
  Index gamma() const {
    Index g = 0;
    for (int l = 0; l <= Ls_; ++l) g = std::max(g, gamma(l));
    return g;
  }

  Index num_neighbor_pairs(int level) const {
    Index n = 0;
    for (const auto& c : levels_.at(level)) n += c.neighbors.size();
    return n;
  }

 private:
  static std::uint64_t spread(std::uint64_t v) {
    std::uint64_t r = 0;
    for (int b = 0; b < 21; ++b) r |= ((v >> b) & 1u) << (3 * b);
    return r;
  }
  static std::uint64_t morton(const std::array<std::int64_t, 3>& c) {
    return spread(c[0]) | (spread(c[1]) << 1) | (spread(c[2]) << 2);
  }

  void finish_cluster(const SurfaceMesh& mesh, Cluster& c) const {
    double area = 0.0;
    Vec3 x = Vec3::Zero();
    std::vector<Index> verts;
    for (Index i = c.begin; i < c.end; ++i) {
      const Index k = order_[i];
      const auto& g = mesh.geometry(k);
      area += g.area;
      x += g.area * g.centroid;
      for (Index v : mesh.triangle(k)) verts.push_back(v);
    }
    c.centroid = x / area;
    std::sort(verts.begin(), verts.end());
    verts.erase(std::unique(verts.begin(), verts.end()), verts.end());
    double d2 = 0.0;
    for (std::size_t a = 0; a < verts.size(); ++a) {
      const Vec3& pa = mesh.vertex(verts[a]);
      for (std::size_t b = a + 1; b < verts.size(); ++b) d2 = std::max(d2, (pa - mesh.vertex(verts[b])).squaredNorm());
    }
    c.diameter = std::sqrt(d2);
  }

  // Candidate pairs are found by binning centroids on a grid whose cell is
  // at least the largest possible neighbor distance (2 rho_max / eta0).
  void build_neighbors(int l) {
    auto& cl = levels_[l];
    double rho_max = 0.0;
    for (const auto& c : cl) rho_max = std::max(rho_max, c.diameter);
    const double cell = std::max(2.0 * rho_max / eta0_, 1e-300);
    auto bin = [&](const Vec3& x) {
      std::array<std::int64_t, 3> b{};
      for (int a = 0; a < 3; ++a) b[a] = static_cast<std::int64_t>(std::floor((x[a] - origin_[a]) / cell));
      return b;
    };
    auto hash = [](const std::array<std::int64_t, 3>& b) {
      return static_cast<std::uint64_t>(b[0] * 73856093) ^ static_cast<std::uint64_t>(b[1] * 19349663) ^
             static_cast<std::uint64_t>(b[2] * 83492791);
    };
    std::unordered_map<std::uint64_t, std::vector<Index>> bins;
    std::vector<std::array<std::int64_t, 3>> where(cl.size());
    for (Index i = 0; i < static_cast<Index>(cl.size()); ++i) {
      where[i] = bin(cl[i].centroid);
      bins[hash(where[i])].push_back(i);
    }
    for (Index i = 0; i < static_cast<Index>(cl.size()); ++i) {
      auto& nb = cl[i].neighbors;
      nb.clear();
      for (int dx = -1; dx <= 1; ++dx) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dz = -1; dz <= 1; ++dz) {
            std::array<std::int64_t, 3> b{where[i][0] + dx, where[i][1] + dy, where[i][2] + dz};
            auto it = bins.find(hash(b));
            if (it == bins.end()) continue;
            for (Index j : it->second) {
              if (where[j] != b) continue;
              if (heatbem::separation_ratio(cl[i], cl[j], i == j) > eta0_) nb.push_back(j);
            }
          }
        }
      }
      std::sort(nb.begin(), nb.end());
      nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
  }

  int Ls_;
  double eta0_;
  Vec3 origin_ = Vec3::Zero();
  double edge_ = 1.0;
  std::vector<Index> order_;
  std::vector<std::vector<Cluster>> levels_;
};

/// Spatial level used for temporal level l: min(floor(l / 2), L_s).
inline int temporal_to_spatial_level(int level, int spatial_levels) {
  if (level < 0) throw std::invalid_argument("negative temporal level");
  return std::min(level / 2, spatial_levels);
}

/// Smallest depth whose finest cubes hold at most max_patches_per_leaf patches.
inline int spatial_levels_for_leaf_size(const SurfaceMesh& mesh, Index max_patches_per_leaf, double eta0,
                                        int max_levels = 12) {
  if (max_patches_per_leaf < 1) throw std::invalid_argument("leaf size must be positive");
  for (int l = 0; l <= max_levels; ++l) {
    ClusterTree t(mesh, l, eta0);
    Index worst = 0;
    for (const auto& c : t.clusters(0)) worst = std::max(worst, c.size());
    if (worst <= max_patches_per_leaf) return l;
  }
  throw ResourceError("leaf size not reachable within the depth limit");
}

/// Reorders the patches so the cluster tree order is the identity, and
/// returns the reordered mesh together with its tree.
inline std::pair<SurfaceMesh, ClusterTree> sort_by_clusters(const SurfaceMesh& mesh, int spatial_levels,
                                                            double eta0) {
  ClusterTree first(mesh, spatial_levels, eta0);
  SurfaceMesh sorted = mesh.permuted(first.order());
  ClusterTree tree(sorted, spatial_levels, eta0);
  if (!tree.is_identity_order()) throw std::logic_error("cluster order is not stable under permutation");
  return {std::move(sorted), std::move(tree)};
}

}  // namespace heatbem
