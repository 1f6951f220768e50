#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "coffee/mesh.hpp"

// Axis-aligned bounding-box tree over mesh triangles for nearest-hit and
// any-hit ray queries. A brute-force path over all triangles is kept as the
// correctness reference.

namespace coffee {

struct Ray {
  Vec3 origin;
  Vec3 dir;  // need not be unit; hit t is in units of |dir|
};

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int face = -1;
  double u = 0.0, v = 0.0;  // barycentric weights of vertices 1 and 2

  bool valid() const { return face >= 0; }
};

namespace detail {

/// Moller-Trumbore ray/triangle intersection; hits only for t in
/// (t_min, t_max).
inline bool ray_triangle(const Ray& ray, const Vec3& a, const Vec3& b,
                         const Vec3& c, double t_min, double t_max, double& t,
                         double& u, double& v) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 h = ray.dir.cross(e2);
  const double det = e1.dot(h);
  if (std::abs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 s = ray.origin - a;
  u = s.dot(h) * inv;
  if (u < 0.0 || u > 1.0) return false;
  const Vec3 q = s.cross(e1);
  v = ray.dir.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return false;
  t = e2.dot(q) * inv;
  return t > t_min && t < t_max;
}

struct Box {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void expand(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  void expand(const Box& b) {
    lo = lo.cwiseMin(b.lo);
    hi = hi.cwiseMax(b.hi);
  }

  /// Slab test against [t_min, t_max].
  bool intersects(const Ray& ray, double t_min, double t_max) const {
    for (int a = 0; a < 3; ++a) {
      const double inv = 1.0 / ray.dir[a];  // +-inf for parallel rays is fine
      double t0 = (lo[a] - ray.origin[a]) * inv;
      double t1 = (hi[a] - ray.origin[a]) * inv;
      if (inv < 0.0) std::swap(t0, t1);
      t_min = std::max(t_min, t0);
      t_max = std::min(t_max, t1);
      if (t_max < t_min) return false;
    }
    return true;
  }
};

}  // namespace detail

class Bvh {
 public:
  static constexpr int kLeafSize = 4;

  explicit Bvh(const TriMesh& mesh) : mesh_(&mesh) {
    const int n = static_cast<int>(mesh.faces.size());
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), 0);
    std::vector<detail::Box> boxes(n);
    std::vector<Vec3> centroids(n);
    for (int f = 0; f < n; ++f) {
      for (int k = 0; k < 3; ++k)
        boxes[f].expand(mesh.positions[mesh.faces[f][k]]);
      centroids[f] = 0.5 * (boxes[f].lo + boxes[f].hi);
    }
    nodes_.reserve(2 * n);
    build(0, n, boxes, centroids);
  }

  /// Nearest intersection with t in (t_min, t_max).
  Hit nearest(const Ray& ray, double t_min = 1e-12,
              double t_max = std::numeric_limits<double>::infinity()) const {
    Hit hit;
    hit.t = t_max;
    if (!nodes_.empty()) walk(0, ray, t_min, false, hit);
    if (!hit.valid()) hit.t = std::numeric_limits<double>::infinity();
    return hit;
  }

  /// True if anything lies along the ray with t in (t_min, t_max).
  bool occluded(const Ray& ray, double t_min = 1e-12,
                double t_max = std::numeric_limits<double>::infinity()) const {
    Hit hit;
    hit.t = t_max;
    if (nodes_.empty()) return false;
    return walk(0, ray, t_min, true, hit);
  }

  /// Reference implementation: test every triangle.
  Hit nearest_brute_force(
      const Ray& ray, double t_min = 1e-12,
      double t_max = std::numeric_limits<double>::infinity()) const {
    Hit hit;
    hit.t = t_max;
    for (int f = 0; f < static_cast<int>(mesh_->faces.size()); ++f) {
      double t, u, v;
      const auto& tri = mesh_->faces[f];
      if (detail::ray_triangle(ray, mesh_->positions[tri[0]],
                               mesh_->positions[tri[1]],
                               mesh_->positions[tri[2]], t_min, hit.t, t, u,
                               v)) {
        hit.t = t;
        hit.face = f;
        hit.u = u;
        hit.v = v;
      }
    }
    if (!hit.valid()) hit.t = std::numeric_limits<double>::infinity();
    return hit;
  }

  /// Every triangle appears in exactly one leaf and inside its leaf box.
  bool audit() const {
    std::vector<int> seen(mesh_->faces.size(), 0);
    for (const Node& node : nodes_) {
      if (node.count == 0) continue;
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int f = order_[i];
        ++seen[f];
        for (int k = 0; k < 3; ++k) {
          const Vec3& p = mesh_->positions[mesh_->faces[f][k]];
          if ((p - node.box.lo).minCoeff() < -1e-12 ||
              (node.box.hi - p).minCoeff() < -1e-12)
            return false;
        }
        if (node.count > kLeafSize) return false;
      }
    }
    return std::all_of(seen.begin(), seen.end(),
                       [](int c) { return c == 1; });
  }

 private:
  struct Node {
    detail::Box box;
    int first = 0;  // leaf: index into order_; inner: left child index
    int count = 0;  // leaf: triangle count; inner: 0
    int right = -1;
  };

  int build(int begin, int end, const std::vector<detail::Box>& boxes,
            const std::vector<Vec3>& centroids) {
    const int index = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    detail::Box box;
    for (int i = begin; i < end; ++i) box.expand(boxes[order_[i]]);
    nodes_[index].box = box;

    const int count = end - begin;
    if (count <= kLeafSize) {
      nodes_[index].first = begin;
      nodes_[index].count = count;
      return index;
    }
    int axis = 0;
    const Vec3 extent = box.hi - box.lo;
    if (extent.y() > extent.x()) axis = 1;
    if (extent.z() > extent[axis]) axis = 2;
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid,
                     order_.begin() + end, [&](int a, int b) {
                       return centroids[a][axis] < centroids[b][axis] ||
                              (centroids[a][axis] == centroids[b][axis] &&
                               a < b);
                     });
    const int left = build(begin, mid, boxes, centroids);
    const int right = build(mid, end, boxes, centroids);
    nodes_[index].first = left;
    nodes_[index].count = 0;
    nodes_[index].right = right;
    return index;
  }

  bool walk(int node_index, const Ray& ray, double t_min, bool any_hit,
            Hit& hit) const {
    const Node& node = nodes_[node_index];
    if (!node.box.intersects(ray, t_min, hit.t)) return false;
    if (node.count > 0) {
      bool found = false;
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int f = order_[i];
        const auto& tri = mesh_->faces[f];
        double t, u, v;
        if (detail::ray_triangle(ray, mesh_->positions[tri[0]],
                                 mesh_->positions[tri[1]],
                                 mesh_->positions[tri[2]], t_min, hit.t, t, u,
                                 v)) {
          hit.t = t;
          hit.face = f;
          hit.u = u;
          hit.v = v;
          found = true;
          if (any_hit) return true;
        }
      }
      return found;
    }
    const bool l = walk(node.first, ray, t_min, any_hit, hit);
    if (any_hit && l) return true;
    const bool r = walk(node.right, ray, t_min, any_hit, hit);
    return l || r;
  }

  const TriMesh* mesh_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

}  // namespace coffee
