#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "heatbem/error.hpp"

namespace heatbem {

using Index = Eigen::Index;
using Vec3 = Eigen::Vector3d;

struct PatchGeometry {
  Vec3 centroid = Vec3::Zero();
  double diameter = 0.0;
  double area = 0.0;
};

inline PatchGeometry triangle_geometry(const Vec3& a, const Vec3& b, const Vec3& c) {
  PatchGeometry g;
  g.centroid = (a + b + c) / 3.0;
  g.diameter = std::max({(a - b).norm(), (b - c).norm(), (c - a).norm()});
  g.area = 0.5 * (b - a).cross(c - a).norm();
  return g;
}

/// Flat triangulated surface with piecewise constant (a = 0) or piecewise
/// linear (a = 1) nodal shape functions on every patch.
///
/// For a = 1 the local nodes of patch k are its three vertices and
/// node(k, m) is the global vertex index; for a = 0 there is one node per
/// patch, located at the centroid, and node(k, 0) == k.
class SurfaceMesh {
 public:
  SurfaceMesh() = default;

  SurfaceMesh(std::vector<Vec3> vertices, std::vector<std::array<Index, 3>> triangles,
              int element_order = 0)
      : vertices_(std::move(vertices)), triangles_(std::move(triangles)) {
    set_element_order(element_order);
    geometry_.reserve(triangles_.size());
    for (const auto& t : triangles_) {
      for (Index v : t) {
        if (v < 0 || v >= num_vertices()) throw std::invalid_argument("triangle refers to a missing vertex");
      }
      auto g = triangle_geometry(vertices_[t[0]], vertices_[t[1]], vertices_[t[2]]);
      if (!(g.area > 0.0)) throw std::invalid_argument("degenerate patch with zero area");
      geometry_.push_back(g);
    }
  }

  Index num_patches() const { return static_cast<Index>(triangles_.size()); }
  Index num_vertices() const { return static_cast<Index>(vertices_.size()); }

  int element_order() const { return element_order_; }
  /// Number of shape functions per patch (D_s).
  int dofs_per_patch() const { return element_order_ == 0 ? 1 : 3; }
  /// Number of distinct nodes (N_v); equals N_s for piecewise constants.
  Index num_nodes() const { return element_order_ == 0 ? num_patches() : num_vertices(); }

  Index node(Index k, int m) const { return element_order_ == 0 ? k : triangles_[k][m]; }

  Vec3 node_position(Index k, int m) const {
    return element_order_ == 0 ? geometry_[k].centroid : vertices_[triangles_[k][m]];
  }

  const Vec3& vertex(Index v) const { return vertices_[v]; }
  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::array<Index, 3>& triangle(Index k) const { return triangles_[k]; }
  const std::vector<std::array<Index, 3>>& triangles() const { return triangles_; }

  std::array<Vec3, 3> corners(Index k) const {
    const auto& t = triangles_[k];
    return {vertices_[t[0]], vertices_[t[1]], vertices_[t[2]]};
  }

  const PatchGeometry& geometry(Index k) const { return geometry_[k]; }

  /// Largest patch diameter (h_s).
  double max_diameter() const {
    double h = 0.0;
    for (const auto& g : geometry_) h = std::max(h, g.diameter);
    return h;
  }

  double total_area() const {
    double a = 0.0;
    for (const auto& g : geometry_) a += g.area;
    return a;
  }

  SurfaceMesh with_element_order(int a) const {
    SurfaceMesh m = *this;
    m.set_element_order(a);
    return m;
  }

  /// Splits every patch into four at its edge midpoints. New vertices are
  /// optionally projected onto the unit sphere.
  SurfaceMesh refined(bool project_to_unit_sphere) const {
    std::vector<Vec3> verts = vertices_;
    std::map<std::pair<Index, Index>, Index> midpoint;
    auto mid = [&](Index a, Index b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Vec3 p = 0.5 * (vertices_[a] + vertices_[b]);
      if (project_to_unit_sphere) p.normalize();
      verts.push_back(p);
      Index id = static_cast<Index>(verts.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<std::array<Index, 3>> tris;
    tris.reserve(4 * triangles_.size());
    for (const auto& t : triangles_) {
      Index ab = mid(t[0], t[1]);
      Index bc = mid(t[1], t[2]);
      Index ca = mid(t[2], t[0]);
      tris.push_back({t[0], ab, ca});
      tris.push_back({ab, t[1], bc});
      tris.push_back({ca, bc, t[2]});
      tris.push_back({ab, bc, ca});
    }
    return SurfaceMesh(std::move(verts), std::move(tris), element_order_);
  }

  /// Mesh whose patch k is patch order[k] of this mesh. Vertices are shared.
  SurfaceMesh permuted(std::span<const Index> order) const {
    if (static_cast<Index>(order.size()) != num_patches()) throw std::invalid_argument("permutation size mismatch");
    std::vector<std::array<Index, 3>> tris;
    tris.reserve(order.size());
    std::vector<char> seen(order.size(), 0);
    for (Index k : order) {
      if (k < 0 || k >= num_patches() || seen[k]) throw std::invalid_argument("not a permutation");
      seen[k] = 1;
      tris.push_back(triangles_[k]);
    }
    return SurfaceMesh(vertices_, std::move(tris), element_order_);
  }

 private:
  void set_element_order(int a) {
    if (a != 0 && a != 1) throw std::invalid_argument("element order must be 0 or 1");
    element_order_ = a;
  }

  std::vector<Vec3> vertices_;
  std::vector<std::array<Index, 3>> triangles_;
  std::vector<PatchGeometry> geometry_;
  int element_order_ = 0;
};

inline const PatchGeometry& patch_geometry(const SurfaceMesh& mesh, Index k) { return mesh.geometry(k); }

enum class PairKind { identical, common_edge, common_vertex, disjoint };

inline const char* to_string(PairKind k) {
  switch (k) {
    case PairKind::identical: return "identical";
    case PairKind::common_edge: return "common_edge";
    case PairKind::common_vertex: return "common_vertex";
    case PairKind::disjoint: return "disjoint";
  }
  return "?";
}

/// Relationship between two patches. perm_x[i] (perm_y[i]) is the local
/// vertex of the first (second) patch that plays the role of reference
/// vertex i; shared vertices come first and appear in the same order in
/// both permutations.
struct PatchPairClass {
  PairKind kind = PairKind::disjoint;
  std::array<int, 3> perm_x{0, 1, 2};
  std::array<int, 3> perm_y{0, 1, 2};
};

inline PatchPairClass classify_pair(const SurfaceMesh& mesh, Index k, Index kp) {
  PatchPairClass c;
  if (k == kp) {
    c.kind = PairKind::identical;
    return c;
  }
  const auto& tx = mesh.triangle(k);
  const auto& ty = mesh.triangle(kp);
  std::array<int, 3> sx{}, sy{};
  int n = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (tx[i] == ty[j]) {
        sx[n] = i;
        sy[n] = j;
        ++n;
      }
    }
  }
  if (n == 3) {
    // Two patches with the same vertex set; only possible for duplicated
    // patches, which the mesh constructor does not reject.
    throw std::invalid_argument("distinct patches share all three vertices");
  }
  if (n == 2) {
    c.kind = PairKind::common_edge;
    c.perm_x = {sx[0], sx[1], 3 - sx[0] - sx[1]};
    c.perm_y = {sy[0], sy[1], 3 - sy[0] - sy[1]};
  } else if (n == 1) {
    c.kind = PairKind::common_vertex;
    c.perm_x = {sx[0], (sx[0] + 1) % 3, (sx[0] + 2) % 3};
    c.perm_y = {sy[0], (sy[0] + 1) % 3, (sy[0] + 2) % 3};
  }
  return c;
}

/// True if every edge is shared by exactly two patches with opposite
/// orientation.
inline bool is_closed_oriented_manifold(const SurfaceMesh& mesh) {
  std::map<std::pair<Index, Index>, int> directed;
  for (const auto& t : mesh.triangles()) {
    for (int e = 0; e < 3; ++e) {
      auto key = std::make_pair(t[e], t[(e + 1) % 3]);
      if (++directed[key] > 1) return false;
    }
  }
  for (const auto& [edge, count] : directed) {
    if (!directed.count({edge.second, edge.first})) return false;
  }
  return true;
}

inline constexpr int kDefaultMaxSphereLevel = 6;

/// Unit sphere triangulation: the cube surface split into 2x2 quads per
/// face, each quad cut along the diagonal through the face centre, then
/// projected onto the sphere. Level 0 has 48 patches and 26 vertices; every
/// level splits each patch into four.
inline SurfaceMesh build_sphere_mesh(int refinement_level, int element_order = 0,
                                     int max_level = kDefaultMaxSphereLevel) {
  if (refinement_level < 0) throw std::invalid_argument("refinement level must be non-negative");
  if (refinement_level > max_level) {
    throw ResourceError("sphere refinement level " + std::to_string(refinement_level) +
                        " exceeds the configured maximum " + std::to_string(max_level));
  }
  std::map<std::array<int, 3>, Index> ids;
  std::vector<Vec3> verts;
  auto vertex_id = [&](const std::array<int, 3>& g) {
    auto it = ids.find(g);
    if (it != ids.end()) return it->second;
    Vec3 p(g[0], g[1], g[2]);
    verts.push_back(p.normalized());
    Index id = static_cast<Index>(verts.size()) - 1;
    ids.emplace(g, id);
    return id;
  };
  std::vector<std::array<Index, 3>> tris;
  for (int axis = 0; axis < 3; ++axis) {
    for (int sign : {-1, 1}) {
      // (u, v, sign * e_axis) is right handed so quads listed counter
      // clockwise in (u, v) are oriented outwards.
      int ua = (axis + 1) % 3;
      int va = (axis + 2) % 3;
      int us = sign;
      auto grid = [&](int i, int j) {
        std::array<int, 3> g{};
        g[axis] = sign;
        g[ua] = us * i;
        g[va] = j;
        return g;
      };
      for (int i = -1; i <= 0; ++i) {
        for (int j = -1; j <= 0; ++j) {
          std::array<std::array<int, 2>, 4> q{{{i, j}, {i + 1, j}, {i + 1, j + 1}, {i, j + 1}}};
          std::array<Index, 4> id{};
          int centre = 0;
          for (int c = 0; c < 4; ++c) {
            id[c] = vertex_id(grid(q[c][0], q[c][1]));
            if (q[c][0] == 0 && q[c][1] == 0) centre = c;
          }
          if (centre % 2 == 0) {
            tris.push_back({id[0], id[1], id[2]});
            tris.push_back({id[0], id[2], id[3]});
          } else {
            tris.push_back({id[1], id[2], id[3]});
            tris.push_back({id[1], id[3], id[0]});
          }
        }
      }
    }
  }
  SurfaceMesh mesh(std::move(verts), std::move(tris), element_order);
  for (int l = 0; l < refinement_level; ++l) mesh = mesh.refined(true);
  return mesh;
}

/// Merges positions closer than tol * (bounding box diagonal). Returns the
/// unique positions and, for every input position, its unique index.
inline std::pair<std::vector<Vec3>, std::vector<Index>> deduplicate_positions(std::span<const Vec3> pts,
                                                                              double rel_tol = 1e-12) {
  std::vector<Vec3> unique;
  std::vector<Index> map(pts.size());
  if (pts.empty()) return {unique, map};
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double tol = rel_tol * std::max((hi - lo).norm(), 1e-300);
  std::vector<Index> order(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) order[i] = static_cast<Index>(i);
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return pts[a].x() < pts[b].x(); });
  std::vector<Index> rep(pts.size(), -1);
  for (std::size_t a = 0; a < order.size(); ++a) {
    Index i = order[a];
    if (rep[i] >= 0) continue;
    rep[i] = static_cast<Index>(unique.size());
    unique.push_back(pts[i]);
    for (std::size_t b = a + 1; b < order.size() && pts[order[b]].x() - pts[i].x() <= tol; ++b) {
      Index j = order[b];
      if (rep[j] < 0 && (pts[j] - pts[i]).norm() <= tol) rep[j] = rep[i];
    }
  }
  for (std::size_t i = 0; i < pts.size(); ++i) map[i] = rep[i];
  return {unique, map};
}

inline void write_off(const SurfaceMesh& mesh, std::ostream& os) {
  os << "OFF\n" << mesh.num_vertices() << ' ' << mesh.num_patches() << " 0\n";
  os.precision(17);
  for (const auto& v : mesh.vertices()) os << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& t : mesh.triangles()) os << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
}

/// Reads an OFF file with triangular faces; coincident vertices are merged.
inline SurfaceMesh read_off(std::istream& is, int element_order = 0) {
  std::string header;
  if (!(is >> header) || header != "OFF") throw std::runtime_error("not an OFF stream");
  Index nv = 0, nf = 0, ne = 0;
  if (!(is >> nv >> nf >> ne) || nv < 0 || nf < 0) throw std::runtime_error("bad OFF counts");
  std::vector<Vec3> raw(nv);
  for (auto& v : raw) {
    if (!(is >> v.x() >> v.y() >> v.z())) throw std::runtime_error("truncated OFF vertex list");
  }
  auto [verts, map] = deduplicate_positions(raw);
  std::vector<std::array<Index, 3>> tris(nf);
  for (auto& t : tris) {
    int n = 0;
    if (!(is >> n) || n != 3) throw std::runtime_error("only triangular OFF faces are supported");
    for (auto& v : t) {
      Index id = 0;
      if (!(is >> id) || id < 0 || id >= nv) throw std::runtime_error("bad OFF face index");
      v = map[id];
    }
  }
  return SurfaceMesh(std::move(verts), std::move(tris), element_order);
}

}  // namespace heatbem
