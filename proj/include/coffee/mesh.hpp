#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "coffee/geom.hpp"

// Triangle meshes: construction, invariant checks, integral properties
// (volume, inertia), and ASCII OBJ round-tripping.

namespace coffee {

struct TriMesh {
  std::vector<Vec3> positions;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> normals;  // per-vertex, unit length

  Vec3 face_normal(int f) const {
    const auto& t = faces[f];
    return (positions[t[1]] - positions[t[0]])
        .cross(positions[t[2]] - positions[t[0]])
        .normalized();
  }

  double face_area(int f) const {
    const auto& t = faces[f];
    return 0.5 * (positions[t[1]] - positions[t[0]])
                     .cross(positions[t[2]] - positions[t[0]])
                     .norm();
  }

  double mean_radius() const {
    double s = 0.0;
    for (const Vec3& p : positions) s += p.norm();
    return s / static_cast<double>(positions.size());
  }

  double bounding_radius() const {
    double r = 0.0;
    for (const Vec3& p : positions) r = std::max(r, p.norm());
    return r;
  }

  /// Area-weighted vertex normals from the current positions.
  void recompute_normals() {
    normals.assign(positions.size(), Vec3::Zero());
    for (const auto& t : faces) {
      const Vec3 n = (positions[t[1]] - positions[t[0]])
                         .cross(positions[t[2]] - positions[t[0]]);
      normals[t[0]] += n;
      normals[t[1]] += n;
      normals[t[2]] += n;
    }
    for (Vec3& n : normals) {
      const double len = n.norm();
      if (len > 0.0) n /= len;
    }
  }

  /// Every undirected edge must be shared by exactly two triangles.
  bool watertight() const {
    std::map<std::pair<int, int>, int> edge_count;
    for (const auto& t : faces) {
      for (int e = 0; e < 3; ++e) {
        int a = t[e], b = t[(e + 1) % 3];
        if (a > b) std::swap(a, b);
        ++edge_count[{a, b}];
      }
    }
    for (const auto& [edge, count] : edge_count) {
      if (count != 2) return false;
    }
    return !faces.empty();
  }

  double min_face_area() const {
    double m = 1e300;
    for (size_t f = 0; f < faces.size(); ++f)
      m = std::min(m, face_area(static_cast<int>(f)));
    return m;
  }

  /// Signed volume by the divergence theorem (sum of signed tetrahedra).
  double volume() const {
    double v = 0.0;
    for (const auto& t : faces)
      v += positions[t[0]].dot(positions[t[1]].cross(positions[t[2]]));
    return v / 6.0;
  }

  void validate() const {
    if (positions.empty() || faces.empty())
      throw ValidationError("TriMesh: empty mesh");
    if (normals.size() != positions.size())
      throw ValidationError("TriMesh: normals missing");
    for (const Vec3& n : normals)
      if (std::abs(n.norm() - 1.0) > 1e-9)
        throw ValidationError("TriMesh: non-unit vertex normal");
    if (!watertight()) throw ValidationError("TriMesh: not watertight");
    if (min_face_area() <= 1e-12)
      throw ValidationError("TriMesh: degenerate triangle");
  }
};

/// Icosphere: regular icosahedron with `level` rounds of 4-way subdivision,
/// every vertex on the unit sphere. Midpoint caching keeps the result
/// watertight. level 5 has 20480 faces.
inline TriMesh make_icosphere(int level) {
  TriMesh mesh;
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  const std::array<Vec3, 12> base = {
      Vec3(-1, phi, 0), Vec3(1, phi, 0),   Vec3(-1, -phi, 0),
      Vec3(1, -phi, 0), Vec3(0, -1, phi),  Vec3(0, 1, phi),
      Vec3(0, -1, -phi), Vec3(0, 1, -phi), Vec3(phi, 0, -1),
      Vec3(phi, 0, 1),  Vec3(-phi, 0, -1), Vec3(-phi, 0, 1)};
  for (const Vec3& v : base) mesh.positions.push_back(v.normalized());
  mesh.faces = {{0, 11, 5},  {0, 5, 1},   {0, 1, 7},   {0, 7, 10},
                {0, 10, 11}, {1, 5, 9},   {5, 11, 4},  {11, 10, 2},
                {10, 7, 6},  {7, 1, 8},   {3, 9, 4},   {3, 4, 2},
                {3, 2, 6},   {3, 6, 8},   {3, 8, 9},   {4, 9, 5},
                {2, 4, 11},  {6, 2, 10},  {8, 6, 7},   {9, 8, 1}};

  for (int round = 0; round < level; ++round) {
    std::unordered_map<uint64_t, int> midpoint;
    const auto mid = [&](int a, int b) {
      const uint64_t key =
          (static_cast<uint64_t>(std::min(a, b)) << 32) |
          static_cast<uint64_t>(std::max(a, b));
      const auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const int idx = static_cast<int>(mesh.positions.size());
      mesh.positions.push_back(
          (mesh.positions[a] + mesh.positions[b]).normalized());
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(mesh.faces.size() * 4);
    for (const auto& t : mesh.faces) {
      const int ab = mid(t[0], t[1]), bc = mid(t[1], t[2]),
                ca = mid(t[2], t[0]);
      next.push_back({t[0], ab, ca});
      next.push_back({t[1], bc, ab});
      next.push_back({t[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    mesh.faces = std::move(next);
  }
  mesh.recompute_normals();
  return mesh;
}

/// Inertia tensor of the solid bounded by the mesh at uniform unit density,
/// about the origin, via per-tetrahedron canonical integrals.
inline Mat3 mesh_inertia(const TriMesh& mesh) {
  // Accumulate second moments of the signed tetrahedra (origin, v0, v1, v2).
  // For a canonical tetrahedron the covariance integral has closed form
  // C = det/120 * (A + sum_i v_i v_i^T) with A = S S^T contributions; use
  // the standard polyhedral covariance formula.
  Mat3 cov = Mat3::Zero();
  for (const auto& t : mesh.faces) {
    const Vec3& a = mesh.positions[t[0]];
    const Vec3& b = mesh.positions[t[1]];
    const Vec3& c = mesh.positions[t[2]];
    const double det = a.dot(b.cross(c));
    Mat3 outer = Mat3::Zero();
    const std::array<const Vec3*, 3> vs = {&a, &b, &c};
    for (const Vec3* vi : vs)
      for (const Vec3* vj : vs)
        outer += (*vi) * vj->transpose() * ((vi == vj) ? 2.0 : 1.0);
    cov += det / 120.0 * outer;
  }
  return Mat3::Identity() * cov.trace() - cov;
}

/// Principal moments (ascending) and the rotation whose columns are the
/// corresponding principal axes.
inline void principal_inertia(const TriMesh& mesh, Vec3& moments, Mat3& axes) {
  const Mat3 inertia = mesh_inertia(mesh);
  Eigen::SelfAdjointEigenSolver<Mat3> eig(inertia);
  moments = eig.eigenvalues();
  axes = eig.eigenvectors();
  if (axes.determinant() < 0.0) axes.col(2) = -axes.col(2);
}

// ---------------------------------------------------------------------------
// Triangle-triangle intersection (used by the self-intersection audit)
// ---------------------------------------------------------------------------

namespace detail {

/// Segment-triangle intersection with strict interior crossing.
inline bool segment_hits_triangle(const Vec3& p, const Vec3& q, const Vec3& a,
                                  const Vec3& b, const Vec3& c) {
  const Vec3 dir = q - p;
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 h = dir.cross(e2);
  const double det = e1.dot(h);
  if (std::abs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 s = p - a;
  const double u = s.dot(h) * inv;
  if (u < 1e-10 || u > 1.0 - 1e-10) return false;
  const Vec3 qv = s.cross(e1);
  const double v = dir.dot(qv) * inv;
  if (v < 1e-10 || u + v > 1.0 - 1e-10) return false;
  const double t = e2.dot(qv) * inv;
  return t > 1e-10 && t < 1.0 - 1e-10;
}

/// Non-adjacent triangles properly intersect iff an edge of one crosses the
/// interior of the other.
inline bool triangles_intersect(const Vec3& a0, const Vec3& a1, const Vec3& a2,
                                const Vec3& b0, const Vec3& b1,
                                const Vec3& b2) {
  const std::array<std::pair<const Vec3*, const Vec3*>, 3> ea = {
      {{&a0, &a1}, {&a1, &a2}, {&a2, &a0}}};
  const std::array<std::pair<const Vec3*, const Vec3*>, 3> eb = {
      {{&b0, &b1}, {&b1, &b2}, {&b2, &b0}}};
  for (const auto& [p, q] : ea)
    if (segment_hits_triangle(*p, *q, b0, b1, b2)) return true;
  for (const auto& [p, q] : eb)
    if (segment_hits_triangle(*p, *q, a0, a1, a2)) return true;
  return false;
}

}  // namespace detail

/// Brute-force count of properly intersecting non-adjacent triangle pairs.
inline int self_intersection_count(const TriMesh& mesh) {
  int count = 0;
  const int n = static_cast<int>(mesh.faces.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const auto& ti = mesh.faces[i];
      const auto& tj = mesh.faces[j];
      bool adjacent = false;
      for (int u : ti)
        for (int v : tj)
          if (u == v) adjacent = true;
      if (adjacent) continue;
      if (detail::triangles_intersect(
              mesh.positions[ti[0]], mesh.positions[ti[1]],
              mesh.positions[ti[2]], mesh.positions[tj[0]],
              mesh.positions[tj[1]], mesh.positions[tj[2]]))
        ++count;
    }
  }
  return count;
}

// ---------------------------------------------------------------------------
// ASCII OBJ import/export (positions + faces)
// ---------------------------------------------------------------------------

inline void save_obj(const TriMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_obj: cannot open " + path);
  out.precision(17);
  for (const Vec3& p : mesh.positions)
    out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const auto& t : mesh.faces)
    out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  if (!out) throw IoError("save_obj: write failed for " + path);
}

inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_obj: cannot open " + path);
  TriMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 p;
      ls >> p.x() >> p.y() >> p.z();
      if (!ls) throw IoError("load_obj: malformed vertex line");
      mesh.positions.push_back(p);
    } else if (tag == "f") {
      std::array<int, 3> t{};
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        ls >> tok;
        if (tok.empty()) throw IoError("load_obj: malformed face line");
        t[k] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      mesh.faces.push_back(t);
    }
  }
  if (mesh.positions.empty() || mesh.faces.empty())
    throw IoError("load_obj: no geometry in " + path);
  mesh.recompute_normals();
  return mesh;
}

}  // namespace coffee
