#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <cmath>
#include <vector>

#include "coffee/common.hpp"

// Reference frames and the sun vanishing-point geometry that anchors the
// detector. Camera convention used throughout: +z forward, +x right, +y down,
// pixel origin at the top-left corner, pixel centers at integer + 0.5.

namespace coffee {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Unit-quaternion rotation. Normalized after every operation.
class Rotation3 {
 public:
  Rotation3() : q_(1.0, 0.0, 0.0, 0.0) {}
  Rotation3(double w, double x, double y, double z) : q_(w, x, y, z) {
    normalize();
  }
  explicit Rotation3(const Eigen::Quaterniond& q) : q_(q) { normalize(); }
  explicit Rotation3(const Mat3& m) : q_(m) { normalize(); }

  static Rotation3 identity() { return Rotation3(); }

  static Rotation3 from_axis_angle(const Vec3& axis, double angle) {
    return Rotation3(Eigen::Quaterniond(
        Eigen::AngleAxisd(angle, axis.normalized())));
  }

  /// Uniform random rotation (4D gaussian, normalized).
  static Rotation3 random(Rng& rng) {
    Eigen::Quaterniond q(rng.gaussian(), rng.gaussian(), rng.gaussian(),
                         rng.gaussian());
    if (q.norm() < 1e-12) q = Eigen::Quaterniond::Identity();
    return Rotation3(q);
  }

  const Eigen::Quaterniond& quat() const { return q_; }
  Mat3 matrix() const { return q_.toRotationMatrix(); }
  Vec3 apply(const Vec3& v) const { return q_ * v; }
  Rotation3 inverse() const { return Rotation3(q_.conjugate()); }
  Rotation3 operator*(const Rotation3& rhs) const {
    return Rotation3(q_ * rhs.q_);
  }

  /// Geodesic angle to another rotation, in radians.
  double angle_to(const Rotation3& other) const {
    const double d = std::min(1.0, std::abs(q_.dot(other.q_)));
    return 2.0 * std::acos(d);
  }

  /// Axis-angle vector (log map), angle in [0, pi].
  Vec3 log() const {
    Eigen::AngleAxisd aa(q_);
    double angle = aa.angle();
    Vec3 axis = aa.axis();
    if (angle > kPi) {
      angle = 2.0 * kPi - angle;
      axis = -axis;
    }
    return axis * angle;
  }

 private:
  void normalize() {
    const double n = q_.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw NumericError("Rotation3: quaternion norm is not positive finite");
    }
    q_.coeffs() /= n;
  }

  Eigen::Quaterniond q_;
};

/// Rigid motion x -> rotation * x + translation.
struct RigidTransform {
  Rotation3 rotation;
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return rotation.apply(x) + translation; }

  RigidTransform inverse() const {
    const Rotation3 rinv = rotation.inverse();
    return RigidTransform{rinv, -rinv.apply(translation)};
  }

  RigidTransform compose(const RigidTransform& rhs) const {
    // this ∘ rhs: first rhs, then this.
    return RigidTransform{rotation * rhs.rotation,
                          rotation.apply(rhs.translation) + translation};
  }
};

/// Pinhole intrinsics. fx, fy in pixels; (cx, cy) principal point; W x H size.
struct CameraModel {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  CameraModel() = default;
  CameraModel(double fx_, double fy_, double cx_, double cy_, int w, int h)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    validate();
  }

  static CameraModel from_vfov(int w, int h, double vfov_rad) {
    const double f = 0.5 * h / std::tan(0.5 * vfov_rad);
    return CameraModel(f, f, 0.5 * w, 0.5 * h, w, h);
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0))
      throw ValidationError("CameraModel: focal lengths must be positive");
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height))
      throw ValidationError("CameraModel: principal point outside image");
  }

  Mat3 intrinsic_matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  /// Unit-free normalized coordinates K^-1 * (u, v, 1).
  Vec3 normalized_ray(const Vec2& pixel) const {
    return Vec3((pixel.x() - cx) / fx, (pixel.y() - cy) / fy, 1.0);
  }

  bool contains(const Vec2& pixel) const {
    return pixel.x() >= 0.0 && pixel.x() <= width && pixel.y() >= 0.0 &&
           pixel.y() <= height;
  }
};

/// Sun-ray direction (propagation direction, sun towards scene) in the
/// inertial and camera frames, tied together by the camera attitude R^i_c.
struct SunGeometry {
  Vec3 d_inertial = Vec3(0, 0, 1);
  Vec3 d_camera = Vec3(0, 0, 1);
  Rotation3 cam_from_inertial;

  SunGeometry() = default;
  SunGeometry(const Vec3& d_i, const Rotation3& r_ic)
      : d_inertial(d_i.normalized()),
        d_camera(r_ic.apply(d_i.normalized())),
        cam_from_inertial(r_ic) {}

  void validate() const {
    if (std::abs(d_inertial.norm() - 1.0) > 1e-12 ||
        std::abs(d_camera.norm() - 1.0) > 1e-12)
      throw ValidationError("SunGeometry: directions must be unit norm");
    if ((cam_from_inertial.apply(d_inertial) - d_camera).norm() > 1e-10)
      throw ValidationError("SunGeometry: D_c inconsistent with R^i_c * D_i");
  }
};

constexpr double kVanishingPointEpsilonW = 1e-8;

/// Homogeneous image point K * D_c where all projected sun rays intersect.
/// The homogeneous w is the camera-frame depth component of the sun
/// direction; |w| below epsilon flags the point at infinity.
struct VanishingPoint {
  Vec3 homogeneous = Vec3(0, 0, 1);
  bool finite = true;

  Vec2 pixel() const {
    if (!finite)
      throw NumericError("VanishingPoint: dehomogenizing point at infinity");
    return Vec2(homogeneous.x() / homogeneous.z(),
                homogeneous.y() / homogeneous.z());
  }

  /// Image-space direction of increasing shadow length at `at`. Toward the
  /// finite point when w > 0, away from it when w < 0, constant at infinity.
  Vec2 scan_direction(const Vec2& at) const {
    if (!finite) return Vec2(homogeneous.x(), homogeneous.y()).normalized();
    const Vec2 to_vp = pixel() - at;
    const double n = to_vp.norm();
    if (n < 1e-9) return Vec2(1.0, 0.0);
    return (homogeneous.z() > 0.0 ? 1.0 : -1.0) * to_vp / n;
  }
};

/// Perspective projection of a camera-frame point onto the image, in pixels.
inline Vec2 project(const Vec3& point, const CameraModel& cam) {
  if (!(point.z() > 0.0))
    throw ValidationError("project: point is behind the camera");
  return Vec2(cam.fx * point.x() / point.z() + cam.cx,
              cam.fy * point.y() / point.z() + cam.cy);
}

/// Vanishing point of all sun rays: homogeneous K * D_c.
inline VanishingPoint vanishing_point(const SunGeometry& sun,
                                      const CameraModel& cam) {
  VanishingPoint vp;
  vp.homogeneous = cam.intrinsic_matrix() * sun.d_camera;
  vp.finite = std::abs(sun.d_camera.z()) >= kVanishingPointEpsilonW;
  return vp;
}

/// One scan ray: a directed segment inside the image rectangle, oriented
/// along increasing shadow length.
struct ScanRay {
  Vec2 origin;
  Vec2 dir;  // unit
  double length = 0.0;

  Vec2 at(double s) const { return origin + s * dir; }
};

namespace detail {

/// Clip the line p + t*d to the image rectangle [0,W]x[0,H]. Returns false
/// when the intersection is empty or degenerate.
inline bool clip_to_image(const Vec2& p, const Vec2& d, double w, double h,
                          double& t0, double& t1) {
  t0 = -1e300;
  t1 = 1e300;
  for (int axis = 0; axis < 2; ++axis) {
    const double lo = 0.0, hi = (axis == 0) ? w : h;
    const double pa = p[axis], da = d[axis];
    if (std::abs(da) < 1e-14) {
      if (pa < lo || pa > hi) return false;
    } else {
      double ta = (lo - pa) / da, tb = (hi - pa) / da;
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
  }
  return t1 > t0 + 1e-9;
}

}  // namespace detail

/// Family of scan rays covering the image, each oriented along increasing
/// shadow length. Finite vanishing point: one chord through the vanishing
/// point per border pixel, truncated at the vanishing point (scans end
/// there when converging, begin there when diverging). Seeding every border
/// pixel keeps the fan dense on the side far from the vanishing point,
/// where chords spread apart. Infinite vanishing point: parallel chords
/// seeded from the border faces the direction enters through, which yields
/// exactly one chord per scan line (e.g. one per row for an eastward
/// direction). Every pixel center lies within 0.5 px of some ray.
inline std::vector<ScanRay> shadow_scan_directions(const VanishingPoint& vp,
                                                   const CameraModel& cam) {
  const double w = cam.width, h = cam.height;
  std::vector<Vec2> seeds;
  seeds.reserve(2 * (cam.width + cam.height));
  for (int i = 0; i < cam.width; ++i) {
    seeds.emplace_back(i + 0.5, 0.5);
    seeds.emplace_back(i + 0.5, h - 0.5);
  }
  for (int j = 1; j + 1 < cam.height; ++j) {
    seeds.emplace_back(0.5, j + 0.5);
    seeds.emplace_back(w - 0.5, j + 0.5);
  }

  constexpr double kMinLength = 0.75;  // drop degenerate slivers
  std::vector<ScanRay> rays;
  rays.reserve(seeds.size());

  if (!vp.finite) {
    const Vec2 g =
        Vec2(vp.homogeneous.x(), vp.homogeneous.y()).normalized();
    for (const Vec2& s : seeds) {
      // Emit a chord only from seeds on an upstream face so each parallel
      // scan line appears exactly once.
      const bool upstream = (s.x() < 1.0 && g.x() > 1e-12) ||
                            (s.x() > w - 1.0 && g.x() < -1e-12) ||
                            (s.y() < 1.0 && g.y() > 1e-12) ||
                            (s.y() > h - 1.0 && g.y() < -1e-12);
      if (!upstream) continue;
      double t0, t1;
      if (!detail::clip_to_image(s, g, w, h, t0, t1)) continue;
      if (t1 - t0 < kMinLength) continue;
      rays.push_back(ScanRay{s + t0 * g, g, t1 - t0});
    }
    return rays;
  }

  const Vec2 v = vp.pixel();
  const bool converging = vp.homogeneous.z() > 0.0;
  // The inset pixel centers miss the exact corners; seed those too so the
  // fan covers the full closed perimeter.
  seeds.emplace_back(0.0, 0.0);
  seeds.emplace_back(w, 0.0);
  seeds.emplace_back(0.0, h);
  seeds.emplace_back(w, h);
  for (const Vec2& s : seeds) {
    if ((v - s).norm() < 1e-9) continue;  // seed at the vanishing point
    const Vec2 d = vp.scan_direction(s);
    double t0, t1;
    if (!detail::clip_to_image(s, d, w, h, t0, t1)) continue;
    const double t_vp = (v - s).dot(d);  // signed position of vp on the line
    if (converging) {
      t1 = std::min(t1, t_vp);  // shadow length grows into the vp
    } else {
      t0 = std::max(t0, t_vp);  // shadow length grows away from the vp
    }
    if (t1 - t0 < kMinLength) continue;
    rays.push_back(ScanRay{s + t0 * d, d, t1 - t0});
  }
  return rays;
}

}  // namespace coffee
