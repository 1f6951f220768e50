#pragma once

// Relative-pose estimation between two calibrated views: the five-point
// minimal solver for the essential matrix (Groebner-basis action-matrix
// formulation), essential-matrix decomposition with a cheirality vote, and a
// seeded RANSAC loop with damped Gauss-Newton refinement of the winning pose.

#include "coffee/geom.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace coffee {

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

namespace poly {

// Polynomials in (x, y, z) of bounded total degree, stored as dense
// coefficient vectors over fixed monomial bases. Degree-3 ordering doubles as
// the column order of the constraint system in five_point_candidates.
//   lin:   [x, y, z, 1]
//   quad:  [x2, xy, y2, xz, yz, z2, x, y, z, 1]
//   cubic: [x3, x2y, xy2, y3, x2z, xyz, y2z, xz2, yz2, z3,
//           x2, xy, y2, xz, yz, z2, x, y, z, 1]

struct Lin {
  std::array<double, 4> c{};
  double eval(double x, double y, double z) const {
    return c[0] * x + c[1] * y + c[2] * z + c[3];
  }
};

struct Quad {
  std::array<double, 10> c{};
  double eval(double x, double y, double z) const {
    return c[0] * x * x + c[1] * x * y + c[2] * y * y + c[3] * x * z +
           c[4] * y * z + c[5] * z * z + c[6] * x + c[7] * y + c[8] * z + c[9];
  }
};

struct Cubic {
  std::array<double, 20> c{};
  double eval(double x, double y, double z) const {
    const double x2 = x * x, y2 = y * y, z2 = z * z;
    return c[0] * x2 * x + c[1] * x2 * y + c[2] * x * y2 + c[3] * y2 * y +
           c[4] * x2 * z + c[5] * x * y * z + c[6] * y2 * z + c[7] * x * z2 +
           c[8] * y * z2 + c[9] * z2 * z + c[10] * x2 + c[11] * x * y +
           c[12] * y2 + c[13] * x * z + c[14] * y * z + c[15] * z2 +
           c[16] * x + c[17] * y + c[18] * z + c[19];
  }
};

// Exponent triples backing each basis position, shared by the two products.
constexpr std::array<std::array<int, 3>, 4> kLinExp = {
    {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}}};
constexpr std::array<std::array<int, 3>, 10> kQuadExp = {
    {{2, 0, 0},
     {1, 1, 0},
     {0, 2, 0},
     {1, 0, 1},
     {0, 1, 1},
     {0, 0, 2},
     {1, 0, 0},
     {0, 1, 0},
     {0, 0, 1},
     {0, 0, 0}}};
constexpr std::array<std::array<int, 3>, 20> kCubicExp = {
    {{3, 0, 0}, {2, 1, 0}, {1, 2, 0}, {0, 3, 0}, {2, 0, 1},
     {1, 1, 1}, {0, 2, 1}, {1, 0, 2}, {0, 1, 2}, {0, 0, 3},
     {2, 0, 0}, {1, 1, 0}, {0, 2, 0}, {1, 0, 1}, {0, 1, 1},
     {0, 0, 2}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}}};

template <size_t N>
constexpr int find_exponent(const std::array<std::array<int, 3>, N>& table,
                            std::array<int, 3> e) {
  for (size_t i = 0; i < N; ++i)
    if (table[i][0] == e[0] && table[i][1] == e[1] && table[i][2] == e[2])
      return static_cast<int>(i);
  return -1;
}

inline Quad operator*(const Lin& a, const Lin& b) {
  Quad out;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const std::array<int, 3> e = {kLinExp[i][0] + kLinExp[j][0],
                                    kLinExp[i][1] + kLinExp[j][1],
                                    kLinExp[i][2] + kLinExp[j][2]};
      out.c[find_exponent(kQuadExp, e)] += a.c[i] * b.c[j];
    }
  return out;
}

inline Cubic operator*(const Quad& a, const Lin& b) {
  Cubic out;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 4; ++j) {
      const std::array<int, 3> e = {kQuadExp[i][0] + kLinExp[j][0],
                                    kQuadExp[i][1] + kLinExp[j][1],
                                    kQuadExp[i][2] + kLinExp[j][2]};
      out.c[find_exponent(kCubicExp, e)] += a.c[i] * b.c[j];
    }
  return out;
}

inline Quad operator+(const Quad& a, const Quad& b) {
  Quad out;
  for (int i = 0; i < 10; ++i) out.c[i] = a.c[i] + b.c[i];
  return out;
}

inline Quad operator-(const Quad& a, const Quad& b) {
  Quad out;
  for (int i = 0; i < 10; ++i) out.c[i] = a.c[i] - b.c[i];
  return out;
}

inline Cubic operator+(const Cubic& a, const Cubic& b) {
  Cubic out;
  for (int i = 0; i < 20; ++i) out.c[i] = a.c[i] + b.c[i];
  return out;
}

inline Cubic operator-(const Cubic& a, const Cubic& b) {
  Cubic out;
  for (int i = 0; i < 20; ++i) out.c[i] = a.c[i] - b.c[i];
  return out;
}

inline Quad scale(const Quad& a, double s) {
  Quad out;
  for (int i = 0; i < 10; ++i) out.c[i] = s * a.c[i];
  return out;
}

}  // namespace poly

// Candidate essential matrices from N >= 5 correspondences in normalized
// image coordinates (points_b' * E * points_a = 0 for each pair). Returns up
// to ten real solutions, each scaled to Frobenius norm sqrt(2); an empty list
// means the configuration was degenerate.
inline std::vector<Mat3> five_point_candidates(const std::vector<Vec2>& points_a,
                                               const std::vector<Vec2>& points_b) {
  if (points_a.size() != points_b.size())
    throw ValidationError("five_point_candidates: size mismatch");
  const int n = static_cast<int>(points_a.size());
  if (n < 5) throw ValidationError("five_point_candidates: need at least 5 points");

  // Each correspondence gives one linear constraint on the 9 entries of E
  // (row-major): coefficient of E(j,k) is b[j] * a[k] in homogeneous coords.
  Eigen::MatrixXd design(n, 9);
  for (int i = 0; i < n; ++i) {
    const Vec3 a(points_a[i].x(), points_a[i].y(), 1.0);
    const Vec3 b(points_b[i].x(), points_b[i].y(), 1.0);
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) design(i, 3 * j + k) = b[j] * a[k];
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeFullV);
  std::array<Mat3, 4> basis;
  for (int s = 0; s < 4; ++s) {
    const Eigen::VectorXd v = svd.matrixV().col(5 + s);
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) basis[s](j, k) = v(3 * j + k);
  }

  // E(x, y, z) = x*B0 + y*B1 + z*B2 + B3; every entry is linear in (x, y, z).
  std::array<std::array<poly::Lin, 3>, 3> e;
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k)
      e[j][k].c = {basis[0](j, k), basis[1](j, k), basis[2](j, k),
                   basis[3](j, k)};

  // Ten cubic constraints: det(E) = 0 and 2*E*E^T*E - trace(E*E^T)*E = 0.
  std::array<poly::Cubic, 10> constraints;
  constraints[0] = (e[1][1] * e[2][2] - e[1][2] * e[2][1]) * e[0][0] -
                   (e[1][0] * e[2][2] - e[1][2] * e[2][0]) * e[0][1] +
                   (e[1][0] * e[2][1] - e[1][1] * e[2][0]) * e[0][2];
  std::array<std::array<poly::Quad, 3>, 3> gram;  // E * E^T
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k)
      gram[j][k] =
          e[j][0] * e[k][0] + e[j][1] * e[k][1] + e[j][2] * e[k][2];
  const poly::Quad trace = gram[0][0] + gram[1][1] + gram[2][2];
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k) {
      constraints[1 + 3 * j + k] =
          poly::scale(gram[j][0], 2.0) * e[0][k] +
          poly::scale(gram[j][1], 2.0) * e[1][k] +
          poly::scale(gram[j][2], 2.0) * e[2][k] - trace * e[j][k];
    }

  // Gauss-Jordan elimination with partial pivoting reduces the 10x20
  // coefficient matrix to [I | B].
  Eigen::Matrix<double, 10, 20> coeffs;
  for (int r = 0; r < 10; ++r)
    for (int col = 0; col < 20; ++col) coeffs(r, col) = constraints[r].c[col];
  for (int col = 0; col < 10; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 10; ++r)
      if (std::abs(coeffs(r, col)) > std::abs(coeffs(pivot, col))) pivot = r;
    if (std::abs(coeffs(pivot, col)) < 1e-12) return {};
    coeffs.row(col).swap(coeffs.row(pivot));
    coeffs.row(col) /= coeffs(col, col);
    for (int r = 0; r < 10; ++r) {
      if (r == col) continue;
      coeffs.row(r) -= coeffs(r, col) * coeffs.row(col);
    }
  }
  const Eigen::Matrix<double, 10, 10> reduced = coeffs.rightCols<10>();

  // Action matrix for multiplication in the quotient ring; its eigenvectors
  // are the monomial vectors [.., x, y, z, 1] of the solutions.
  Eigen::Matrix<double, 10, 10> action = Eigen::Matrix<double, 10, 10>::Zero();
  const std::array<int, 6> kDropRows = {0, 1, 2, 4, 5, 7};
  for (int r = 0; r < 6; ++r) action.row(r) = -reduced.row(kDropRows[r]);
  action(6, 0) = 1.0;
  action(7, 1) = 1.0;
  action(8, 3) = 1.0;
  action(9, 6) = 1.0;

  const Eigen::EigenSolver<Eigen::Matrix<double, 10, 10>> eig(action);
  std::vector<Mat3> out;
  for (int i = 0; i < 10; ++i) {
    if (std::abs(eig.eigenvalues()(i).imag()) > 1e-10) continue;
    const Eigen::Matrix<std::complex<double>, 10, 1> v =
        eig.eigenvectors().col(i);
    if (std::abs(v(9)) < 1e-12) continue;
    const double x = (v(6) / v(9)).real();
    const double y = (v(7) / v(9)).real();
    const double z = (v(8) / v(9)).real();
    Mat3 candidate = x * basis[0] + y * basis[1] + z * basis[2] + basis[3];
    const double norm = candidate.norm();
    if (norm < 1e-12) continue;
    candidate *= std::sqrt(2.0) / norm;

    // Keep only candidates that satisfy the internal structure of an
    // essential matrix after normalization.
    const Mat3 structural = 2.0 * candidate * candidate.transpose() * candidate -
                            (candidate * candidate.transpose()).trace() * candidate;
    if (std::abs(candidate.determinant()) > 1e-8) continue;
    if (structural.cwiseAbs().maxCoeff() > 1e-8) continue;

    const bool duplicate =
        std::any_of(out.begin(), out.end(), [&](const Mat3& seen) {
          return std::min((candidate - seen).norm(), (candidate + seen).norm()) <
                 1e-6;
        });
    if (!duplicate) out.push_back(candidate);
  }
  return out;
}

// Rigid relative motion between two calibrated views of the same rigid body:
// a point X_a expressed in camera A maps to camera B as
// X_b = rotation * X_a + scale * translation, with |translation| = 1 (the
// scale of the baseline is unobservable from image data alone).
struct RelativePose {
  Rotation3 rotation;
  Vec3 translation = Vec3(0, 0, 1);
};

inline Mat3 essential_from_pose(const RelativePose& pose) {
  return skew(pose.translation) * pose.rotation.matrix();
}

// Angle in radians between two rotations.
inline double rotation_error(const Rotation3& a, const Rotation3& b) {
  return a.angle_to(b);
}

// Angle in radians between two directions (sign-sensitive).
inline double direction_error(const Vec3& a, const Vec3& b) {
  const double c = a.normalized().dot(b.normalized());
  return std::acos(std::clamp(c, -1.0, 1.0));
}

// Signed rotation bias about a reference axis, estimate minus truth: the
// component along the axis of the rotation vector of R_est * R_true^T.  For
// a single-axis sequence this is the signed over/under-rotation; error about
// orthogonal axes contributes nothing.
inline double signed_axis_bias(const Rotation3& estimate,
                               const Rotation3& truth, const Vec3& axis) {
  const double n = axis.norm();
  if (!(n > 0.0))
    throw ValidationError("signed_axis_bias: axis must be non-zero");
  const Eigen::AngleAxisd residual(estimate.matrix() *
                                   truth.matrix().transpose());
  return residual.angle() * residual.axis().dot(axis / n);
}

// Ground-truth relative pose between two frames given each frame's
// body-to-camera transform.
inline RelativePose relative_pose(const RigidTransform& body_to_cam_a,
                                  const RigidTransform& body_to_cam_b) {
  const RigidTransform ab = body_to_cam_b.compose(body_to_cam_a.inverse());
  const double baseline = ab.translation.norm();
  if (baseline < 1e-12)
    throw NumericError("relative_pose: zero baseline");
  return RelativePose{ab.rotation, ab.translation / baseline};
}

namespace detail {

struct Triangulated {
  double parallax = 0.0;  // radians between the two viewing rays
  bool in_front = false;  // midpoint has positive depth in both cameras
};

inline Triangulated triangulate_midpoint(const Mat3& rot, const Vec3& t,
                                         const Vec2& a, const Vec2& b) {
  const Vec3 da = Vec3(a.x(), a.y(), 1.0).normalized();
  const Vec3 db = (rot.transpose() * Vec3(b.x(), b.y(), 1.0)).normalized();
  const Vec3 center_b = -rot.transpose() * t;  // camera B center in frame A

  Triangulated result;
  result.parallax = std::asin(std::clamp(da.cross(db).norm(), 0.0, 1.0));
  if (da.dot(db) < 0.0) result.parallax = kPi - result.parallax;

  // Closest points of the two viewing rays; the midpoint is the estimate.
  const double d12 = da.dot(db);
  const double det = 1.0 - d12 * d12;
  if (det < 1e-16) return result;
  const double r1 = da.dot(center_b);
  const double r2 = db.dot(center_b);
  const double lambda = (r1 - d12 * r2) / det;
  const double mu = (d12 * r1 - r2) / det;
  const Vec3 midpoint = 0.5 * (lambda * da + center_b + mu * db);
  const double depth_b = (rot * midpoint + t).z();
  result.in_front = midpoint.z() > 0.0 && depth_b > 0.0;
  return result;
}

}  // namespace detail

inline const double kMinParallaxRad = deg2rad(0.1);

// Decompose an essential matrix into the relative pose, using the
// correspondences to vote among the four (rotation, translation) candidates.
// Throws NumericError when the vote is ambiguous: fewer than half the
// correspondences with usable parallax land in front of both cameras, or no
// correspondence has usable parallax at all.
inline RelativePose decompose_essential(const Mat3& essential,
                                        const std::vector<Vec2>& points_a,
                                        const std::vector<Vec2>& points_b) {
  if (points_a.size() != points_b.size() || points_a.empty())
    throw ValidationError("decompose_essential: bad correspondence set");
  Eigen::JacobiSVD<Mat3> svd(essential,
                             Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  if (u.determinant() < 0.0) u = -u;
  if (v.determinant() < 0.0) v = -v;
  Mat3 w;
  w << 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0;

  const std::array<Mat3, 2> rotations = {u * w * v.transpose(),
                                         u * w.transpose() * v.transpose()};
  const std::array<Vec3, 2> translations = {u.col(2), -u.col(2)};

  int best_support = -1;
  int counted = 0;
  RelativePose best;
  for (const Mat3& rot : rotations) {
    for (const Vec3& t : translations) {
      int support = 0;
      int with_parallax = 0;
      for (size_t i = 0; i < points_a.size(); ++i) {
        const detail::Triangulated tri =
            detail::triangulate_midpoint(rot, t, points_a[i], points_b[i]);
        if (tri.parallax < kMinParallaxRad) continue;
        ++with_parallax;
        if (tri.in_front) ++support;
      }
      if (support > best_support) {
        best_support = support;
        counted = with_parallax;
        best = RelativePose{Rotation3(rot), t};
      }
    }
  }
  if (counted == 0)
    throw NumericError("decompose_essential: no correspondence has parallax");
  if (2 * best_support <= counted)
    throw NumericError("decompose_essential: cheirality vote is ambiguous");
  return best;
}

// First-order geometric reprojection error of a correspondence under an
// essential matrix, reported in pixels via the mean focal length.
inline double sampson_error_px(const Mat3& essential, const Vec2& a,
                               const Vec2& b, double mean_focal) {
  const Vec3 ha(a.x(), a.y(), 1.0);
  const Vec3 hb(b.x(), b.y(), 1.0);
  const Vec3 ea = essential * ha;
  const Vec3 etb = essential.transpose() * hb;
  const double num = hb.dot(ea);
  const double denom = ea.x() * ea.x() + ea.y() * ea.y() + etb.x() * etb.x() +
                       etb.y() * etb.y();
  if (denom < 1e-300) return std::numeric_limits<double>::infinity();
  return mean_focal * std::abs(num) / std::sqrt(denom);
}

struct RansacOptions {
  int max_iterations = 2000;
  double threshold_px = 1.0;
  double confidence = 0.999;
  uint64_t seed = 0;
  int refine_steps = 8;
  double mean_focal = 512.0;
};

struct PoseEstimate {
  RelativePose pose;
  Mat3 essential = Mat3::Zero();
  std::vector<char> inliers;
  int iterations = 0;
  double inlier_ratio = 0.0;
  bool low_confidence = false;
};

namespace detail {

inline std::vector<char> classify_inliers(const Mat3& essential,
                                          const std::vector<Vec2>& a,
                                          const std::vector<Vec2>& b,
                                          double threshold_px,
                                          double mean_focal, int* count) {
  std::vector<char> mask(a.size(), 0);
  int n = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (sampson_error_px(essential, a[i], b[i], mean_focal) <= threshold_px) {
      mask[i] = 1;
      ++n;
    }
  }
  *count = n;
  return mask;
}

inline double pose_cost(const RelativePose& pose, const std::vector<Vec2>& a,
                        const std::vector<Vec2>& b,
                        const std::vector<char>& mask, double mean_focal) {
  const Mat3 essential = essential_from_pose(pose);
  double cost = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    const double err = sampson_error_px(essential, a[i], b[i], mean_focal);
    cost += err * err;
  }
  return cost;
}

// Apply a 5-dof update: rotation perturbed by the exponential of delta[0..2],
// unit translation moved in its tangent plane by delta[3..4].
inline RelativePose apply_update(const RelativePose& pose,
                                 const Eigen::Matrix<double, 5, 1>& delta) {
  RelativePose out = pose;
  const Vec3 axis(delta[0], delta[1], delta[2]);
  const double angle = axis.norm();
  if (angle > 0.0)
    out.rotation = Rotation3::from_axis_angle(axis / angle, angle) * pose.rotation;
  Vec3 u = pose.translation.cross(Vec3::UnitX());
  if (u.norm() < 1e-6) u = pose.translation.cross(Vec3::UnitY());
  u.normalize();
  const Vec3 v = pose.translation.cross(u).normalized();
  out.translation =
      (pose.translation + delta[3] * u + delta[4] * v).normalized();
  return out;
}

// Damped Gauss-Newton on the summed squared Sampson error over the inlier
// set, with numerical Jacobians. Small and safe: steps that increase the cost
// are rejected and the damping raised.
inline RelativePose refine_pose(RelativePose pose, const std::vector<Vec2>& a,
                                const std::vector<Vec2>& b,
                                const std::vector<char>& mask,
                                const RansacOptions& options) {
  std::vector<int> idx;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(static_cast<int>(i));
  if (idx.size() < 5) return pose;

  auto residuals = [&](const RelativePose& p) {
    const Mat3 essential = essential_from_pose(p);
    Eigen::VectorXd r(idx.size());
    for (size_t k = 0; k < idx.size(); ++k)
      r[k] = sampson_error_px(essential, a[idx[k]], b[idx[k]],
                              options.mean_focal);
    return r;
  };

  double damping = 1e-3;
  for (int step = 0; step < options.refine_steps; ++step) {
    const Eigen::VectorXd r0 = residuals(pose);
    Eigen::MatrixXd jac(idx.size(), 5);
    const double h = 1e-7;
    for (int p = 0; p < 5; ++p) {
      Eigen::Matrix<double, 5, 1> delta = Eigen::Matrix<double, 5, 1>::Zero();
      delta[p] = h;
      const Eigen::VectorXd plus = residuals(apply_update(pose, delta));
      delta[p] = -h;
      const Eigen::VectorXd minus = residuals(apply_update(pose, delta));
      jac.col(p) = (plus - minus) / (2.0 * h);
    }
    const Eigen::Matrix<double, 5, 5> hessian =
        jac.transpose() * jac +
        damping * Eigen::Matrix<double, 5, 5>::Identity();
    const Eigen::Matrix<double, 5, 1> delta =
        hessian.ldlt().solve(-jac.transpose() * r0);
    if (!delta.allFinite()) break;
    const RelativePose trial = apply_update(pose, delta);
    if (residuals(trial).squaredNorm() < r0.squaredNorm()) {
      pose = trial;
      damping = std::max(damping / 3.0, 1e-9);
    } else {
      damping *= 10.0;
    }
  }
  return pose;
}

}  // namespace detail

// Robust relative pose from putative correspondences in normalized image
// coordinates. The sample sequence is generated up front from the seed, so
// results are reproducible regardless of where the adaptive loop stops.
inline PoseEstimate ransac_pose(const std::vector<Vec2>& points_a,
                                const std::vector<Vec2>& points_b,
                                const RansacOptions& options = {}) {
  if (points_a.size() != points_b.size())
    throw ValidationError("ransac_pose: size mismatch");
  const int n = static_cast<int>(points_a.size());
  if (n < 5) throw ValidationError("ransac_pose: need at least 5 points");
  if (options.max_iterations < 1 || options.threshold_px <= 0.0 ||
      options.confidence <= 0.0 || options.confidence >= 1.0 ||
      options.mean_focal <= 0.0)
    throw ValidationError("ransac_pose: bad options");

  Rng rng(options.seed);
  std::vector<std::vector<int>> samples(options.max_iterations);
  for (auto& s : samples) s = rng.sample_distinct(5, n);

  Mat3 best_essential = Mat3::Zero();
  int best_count = -1;
  int needed = options.max_iterations;
  int used = 0;
  for (int it = 0; it < needed; ++it) {
    used = it + 1;
    std::vector<Vec2> sample_a(5), sample_b(5);
    for (int k = 0; k < 5; ++k) {
      sample_a[k] = points_a[samples[it][k]];
      sample_b[k] = points_b[samples[it][k]];
    }
    std::vector<Mat3> candidates;
    try {
      candidates = five_point_candidates(sample_a, sample_b);
    } catch (const NumericError&) {
      continue;
    }
    for (const Mat3& essential : candidates) {
      int count = 0;
      detail::classify_inliers(essential, points_a, points_b,
                               options.threshold_px, options.mean_focal,
                               &count);
      if (count > best_count) {
        best_count = count;
        best_essential = essential;
        const double w = static_cast<double>(count) / n;
        const double p_outlier = 1.0 - std::pow(w, 5);
        if (p_outlier < 1e-12) {
          needed = used;
        } else if (p_outlier < 1.0) {
          const double want = std::log(1.0 - options.confidence) /
                              std::log(p_outlier);
          needed = std::min(options.max_iterations,
                            static_cast<int>(std::ceil(want)));
        }
      }
    }
  }
  if (best_count < 5)
    throw NumericError("ransac_pose: no hypothesis explains the data");

  int count = 0;
  std::vector<char> mask =
      detail::classify_inliers(best_essential, points_a, points_b,
                               options.threshold_px, options.mean_focal,
                               &count);
  std::vector<Vec2> in_a, in_b;
  for (int i = 0; i < n; ++i) {
    if (mask[i]) {
      in_a.push_back(points_a[i]);
      in_b.push_back(points_b[i]);
    }
  }
  RelativePose pose = decompose_essential(best_essential, in_a, in_b);
  pose = detail::refine_pose(pose, points_a, points_b, mask, options);

  PoseEstimate estimate;
  estimate.pose = pose;
  estimate.essential = essential_from_pose(pose);
  estimate.inliers =
      detail::classify_inliers(estimate.essential, points_a, points_b,
                               options.threshold_px, options.mean_focal,
                               &count);
  estimate.iterations = used;
  estimate.inlier_ratio = static_cast<double>(count) / n;
  estimate.low_confidence = estimate.inlier_ratio < 0.10;
  return estimate;
}

}  // namespace coffee
