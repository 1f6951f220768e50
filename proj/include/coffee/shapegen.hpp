#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "coffee/mesh.hpp"

// Procedural asteroid shapes: an icosphere displaced by low-order
// spherical-harmonic deformation, multi-octave value-noise roughness,
// crater bowls, and Gaussian rock bumps, then anisotropically scaled.
// Every feature is driven by one seed; a zero parameter disables its
// feature, otherwise the value must lie inside its sampling interval.

namespace coffee {

struct ShapeParams {
  double roughness = 0.0;       // 0 or [2, 10]
  Vec3 scale = Vec3(1, 1, 1);   // per-axis, each in [1, 3]
  double deform = 0.0;          // 0 or [1, 10]
  double crater_depth = 0.0;    // 0 or [0.1, 0.5], fraction of crater radius
  int crater_count = 0;         // 0 or [1, 64]
  int rocks_large = 0;          // 0 or [1, 10]
  int rocks_medium = 0;         // 0 or [10, 100]
  int rocks_small = 0;          // 0 or [100, 1000]
  double rock_size_large = 0.0;   // 0 or [0.01, 0.03]
  double rock_size_medium = 0.0;  // 0 or [0.003, 0.01]
  double rock_size_small = 0.0;   // 0 or [0.001, 0.003]
  uint64_t seed = 0;

  /// Draw a full parameter set from the sampling distributions.
  static ShapeParams sample(Rng& rng) {
    ShapeParams p;
    p.roughness = rng.uniform(2.0, 10.0);
    p.scale = Vec3(rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0),
                   rng.uniform(1.0, 3.0));
    p.deform = rng.uniform(1.0, 10.0);
    p.crater_depth = rng.uniform(0.1, 0.5);
    p.crater_count = 10;
    p.rocks_large = 1 + static_cast<int>(rng.below(10));
    p.rocks_medium = 10 + static_cast<int>(rng.below(91));
    p.rocks_small = 100 + static_cast<int>(rng.below(901));
    p.rock_size_large = rng.uniform(0.01, 0.03);
    p.rock_size_medium = rng.uniform(0.003, 0.01);
    p.rock_size_small = rng.uniform(0.001, 0.003);
    p.seed = rng.next_u64();
    return p;
  }

  void validate() const {
    const auto in = [](double v, double lo, double hi) {
      return v == 0.0 || (v >= lo && v <= hi);
    };
    if (!in(roughness, 2.0, 10.0))
      throw ValidationError("ShapeParams: roughness outside [2,10]");
    for (int a = 0; a < 3; ++a)
      if (scale[a] < 1.0 || scale[a] > 3.0)
        throw ValidationError("ShapeParams: scale outside [1,3]");
    if (!in(deform, 1.0, 10.0))
      throw ValidationError("ShapeParams: deform outside [1,10]");
    if (!in(crater_depth, 0.1, 0.5))
      throw ValidationError("ShapeParams: crater depth outside [0.1,0.5]");
    if (crater_count < 0 || crater_count > 64)
      throw ValidationError("ShapeParams: crater count outside [0,64]");
    const auto count_in = [](int v, int lo, int hi) {
      return v == 0 || (v >= lo && v <= hi);
    };
    if (!count_in(rocks_large, 1, 10))
      throw ValidationError("ShapeParams: large rock count outside [1,10]");
    if (!count_in(rocks_medium, 10, 100))
      throw ValidationError("ShapeParams: medium rock count outside [10,100]");
    if (!count_in(rocks_small, 100, 1000))
      throw ValidationError("ShapeParams: small rock count outside [100,1000]");
    if (!in(rock_size_large, 0.01, 0.03))
      throw ValidationError("ShapeParams: large rock size outside [0.01,0.03]");
    if (!in(rock_size_medium, 0.003, 0.01))
      throw ValidationError(
          "ShapeParams: medium rock size outside [0.003,0.01]");
    if (!in(rock_size_small, 0.001, 0.003))
      throw ValidationError(
          "ShapeParams: small rock size outside [0.001,0.003]");
  }
};

namespace detail {

/// Deterministic lattice noise value in [-1, 1].
inline double lattice_value(int64_t x, int64_t y, int64_t z, uint64_t salt) {
  uint64_t h = salt;
  h ^= static_cast<uint64_t>(x) * 0x9e3779b97f4a7c15ull;
  h ^= static_cast<uint64_t>(y) * 0xc2b2ae3d27d4eb4full;
  h ^= static_cast<uint64_t>(z) * 0x165667b19e3779f9ull;
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return 2.0 * (static_cast<double>(h >> 11) * 0x1.0p-53) - 1.0;
}

inline double fade(double t) { return t * t * t * (t * (6.0 * t - 15.0) + 10.0); }

/// Trilinearly interpolated value noise at a 3D point, in [-1, 1].
inline double value_noise(const Vec3& p, uint64_t salt) {
  const int64_t ix = static_cast<int64_t>(std::floor(p.x()));
  const int64_t iy = static_cast<int64_t>(std::floor(p.y()));
  const int64_t iz = static_cast<int64_t>(std::floor(p.z()));
  const double fx = fade(p.x() - std::floor(p.x()));
  const double fy = fade(p.y() - std::floor(p.y()));
  const double fz = fade(p.z() - std::floor(p.z()));
  double corners[2][2][2];
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz)
        corners[dx][dy][dz] = lattice_value(ix + dx, iy + dy, iz + dz, salt);
  const auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  double xy[2][2];
  for (int dy = 0; dy < 2; ++dy)
    for (int dz = 0; dz < 2; ++dz)
      xy[dy][dz] = lerp(corners[0][dy][dz], corners[1][dy][dz], fx);
  double x[2];
  for (int dz = 0; dz < 2; ++dz) x[dz] = lerp(xy[0][dz], xy[1][dz], fy);
  return lerp(x[0], x[1], fz);
}

/// Low-order spherical-harmonic basis evaluated on a unit direction.
/// Polynomial real forms, roughly sup-normalized; index 0..4 are the five
/// second-order modes, 5..11 the seven third-order ones.
inline double sh_basis(int idx, const Vec3& u) {
  const double x = u.x(), y = u.y(), z = u.z();
  switch (idx) {
    case 0: return 0.5 * (3.0 * z * z - 1.0);
    case 1: return 2.0 * x * z;
    case 2: return 2.0 * y * z;
    case 3: return x * x - y * y;
    case 4: return 2.0 * x * y;
    case 5: return 0.5 * z * (5.0 * z * z - 3.0);
    case 6: return x * (5.0 * z * z - 1.0);
    case 7: return y * (5.0 * z * z - 1.0);
    case 8: return 2.6 * z * (x * x - y * y);
    case 9: return 5.2 * x * y * z;
    case 10: return x * (x * x - 3.0 * y * y);
    default: return y * (3.0 * x * x - y * y);
  }
}

}  // namespace detail

/// The radial displacement field of one shape: radius multiplier over unit
/// directions, before anisotropic scaling. Deterministic in the parameter
/// seed; also serves as the reference the mesh is checked against.
class ShapeField {
 public:
  explicit ShapeField(const ShapeParams& params) : params_(params) {
    params.validate();
    Rng rng(params.seed);

    if (params.deform > 0.0) {
      for (int k = 0; k < 3; ++k) {
        Mode m;
        m.basis = rng.index(12);
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        m.amplitude = 0.025 * params.deform * sign * rng.uniform(0.5, 1.0);
        modes_.push_back(m);
      }
    }

    noise_salt_ = rng.next_u64();
    if (params.roughness > 0.0)
      noise_amplitude_ = 0.002 + (params.roughness - 2.0) / 8.0 * 0.008;

    if (params.crater_count > 0 && params.crater_depth > 0.0) {
      for (int k = 0; k < params.crater_count; ++k) {
        Crater c;
        c.center = random_direction(rng);
        c.angular_radius = rng.uniform(0.08, 0.25);
        c.depth = params.crater_depth * c.angular_radius;
        craters_.push_back(c);
      }
    }

    add_rocks(rng, params.rocks_large, params.rock_size_large, true);
    add_rocks(rng, params.rocks_medium, params.rock_size_medium, false);
    add_rocks(rng, params.rocks_small, params.rock_size_small, false);
  }

  /// Radius (multiplier of the unit sphere) along unit direction u.
  double radius(const Vec3& u) const {
    double r = 1.0;
    for (const Mode& m : modes_)
      r += m.amplitude * detail::sh_basis(m.basis, u);
    if (noise_amplitude_ > 0.0) {
      double n = 0.0, amp = 1.0, freq = 3.0, norm = 0.0;
      for (int octave = 0; octave < 4; ++octave) {
        n += amp * detail::value_noise(u * freq, noise_salt_ + octave);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
      }
      r += noise_amplitude_ * n / norm;
    }
    for (const Crater& c : craters_) {
      const double theta = angle_between(u, c.center);
      if (theta < c.angular_radius) {
        const double s = theta / c.angular_radius;
        const double bowl = (1.0 - s * s) * (1.0 - s * s);
        r -= c.depth * bowl;
      }
    }
    for (const Rock& k : rocks_) {
      const double theta = angle_between(u, k.center);
      if (theta < 3.0 * k.size) {
        const double s = theta / k.size;
        r += k.size * std::exp(-s * s);
      }
    }
    return r;
  }

  /// Additive displacement of the rocks alone (peak = rock size).
  double rock_displacement(const Vec3& u) const {
    double d = 0.0;
    for (const Rock& k : rocks_) {
      const double theta = angle_between(u, k.center);
      if (theta < 3.0 * k.size) {
        const double s = theta / k.size;
        d += k.size * std::exp(-s * s);
      }
    }
    return d;
  }

  const ShapeParams& params() const { return params_; }

 private:
  struct Mode {
    int basis = 0;
    double amplitude = 0.0;
  };
  struct Crater {
    Vec3 center;
    double angular_radius = 0.0;
    double depth = 0.0;
  };
  struct Rock {
    Vec3 center;
    double size = 0.0;
  };

  static Vec3 random_direction(Rng& rng) {
    while (true) {
      const Vec3 v(rng.gaussian(), rng.gaussian(), rng.gaussian());
      const double n = v.norm();
      if (n > 1e-6) return v / n;
    }
  }

  static double angle_between(const Vec3& a, const Vec3& b) {
    return std::atan2(a.cross(b).norm(), a.dot(b));
  }

  void add_rocks(Rng& rng, int count, double size, bool separated) {
    if (count <= 0 || size <= 0.0) return;
    std::vector<Vec3> centers;
    for (int k = 0; k < count; ++k) {
      Vec3 c;
      for (int attempt = 0; attempt < 1000; ++attempt) {
        c = random_direction(rng);
        if (!separated) break;
        bool clear = true;
        for (const Vec3& other : centers)
          if (angle_between(c, other) < 8.0 * size) clear = false;
        if (clear) break;
      }
      centers.push_back(c);
      rocks_.push_back(Rock{c, size});
    }
  }

  ShapeParams params_;
  std::vector<Mode> modes_;
  std::vector<Crater> craters_;
  std::vector<Rock> rocks_;
  uint64_t noise_salt_ = 0;
  double noise_amplitude_ = 0.0;
};

/// Displace an icosphere by the field, then scale anisotropically.
inline TriMesh apply_shape_field(const ShapeField& field, int subdivision) {
  TriMesh mesh = make_icosphere(subdivision);
  for (Vec3& p : mesh.positions) {
    const Vec3 u = p.normalized();
    p = field.radius(u) * u;
    p = p.cwiseProduct(field.params().scale);
  }
  mesh.recompute_normals();
  return mesh;
}

constexpr int kShapeSubdivision = 5;       // 20480 faces
constexpr int kShapeAuditSubdivision = 2;  // 320-face copy for audits

inline TriMesh generate_shape(const ShapeParams& params) {
  return apply_shape_field(ShapeField(params), kShapeSubdivision);
}

/// Low-resolution resampling of the same displacement field, used by the
/// brute-force self-intersection audit.
inline TriMesh generate_shape_decimated(const ShapeParams& params) {
  return apply_shape_field(ShapeField(params), kShapeAuditSubdivision);
}

}  // namespace coffee
