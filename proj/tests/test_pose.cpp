#include "coffee/pose.hpp"

#include <gtest/gtest.h>

namespace {

using coffee::Mat3;
using coffee::RelativePose;
using coffee::RigidTransform;
using coffee::Rng;
using coffee::Rotation3;
using coffee::Vec2;
using coffee::Vec3;

// ---------------------------------------------------------------------------
// Polynomial algebra oracle: a symbolic product must agree with the product
// of pointwise evaluations everywhere.
// ---------------------------------------------------------------------------

coffee::poly::Lin RandomLin(Rng& rng) {
  coffee::poly::Lin p;
  for (double& c : p.c) c = rng.uniform(-2, 2);
  return p;
}

TEST(PolyAlgebra, ProductsMatchPointwiseEvaluation) {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = RandomLin(rng);
    const auto b = RandomLin(rng);
    const auto c = RandomLin(rng);
    const coffee::poly::Quad ab = a * b;
    const coffee::poly::Cubic abc = ab * c;
    for (int i = 0; i < 20; ++i) {
      const double x = rng.uniform(-3, 3);
      const double y = rng.uniform(-3, 3);
      const double z = rng.uniform(-3, 3);
      EXPECT_NEAR(ab.eval(x, y, z), a.eval(x, y, z) * b.eval(x, y, z), 1e-10);
      EXPECT_NEAR(abc.eval(x, y, z), ab.eval(x, y, z) * c.eval(x, y, z),
                  1e-9);
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic two-view fixtures
// ---------------------------------------------------------------------------

struct TwoViewData {
  RelativePose truth;
  Mat3 essential;  // scaled to Frobenius norm sqrt(2)
  std::vector<Vec2> a, b;
};

Vec3 RandomUnit(Rng& rng) {
  Vec3 v(rng.gaussian(), rng.gaussian(), rng.gaussian());
  while (v.norm() < 1e-6) v = Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian());
  return v.normalized();
}

// Points drawn in front of camera A; correspondences are exact projections.
TwoViewData MakeTwoView(Rng& rng, int num_points, bool planar = false) {
  TwoViewData data;
  data.truth.rotation =
      Rotation3::from_axis_angle(RandomUnit(rng), rng.uniform(0.05, 0.6));
  data.truth.translation = RandomUnit(rng);
  const Mat3 rot = data.truth.rotation.matrix();
  data.essential = coffee::essential_from_pose(data.truth);
  data.essential *= std::sqrt(2.0) / data.essential.norm();

  while (static_cast<int>(data.a.size()) < num_points) {
    const double z = planar ? 6.0 : rng.uniform(4.0, 8.0);
    const Vec3 point(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), z);
    const Vec3 in_b = rot * point + data.truth.translation;
    if (in_b.z() < 0.5) continue;
    data.a.emplace_back(point.x() / point.z(), point.y() / point.z());
    data.b.emplace_back(in_b.x() / in_b.z(), in_b.y() / in_b.z());
  }
  return data;
}

double EssentialDistance(const Mat3& x, const Mat3& y) {
  return std::min((x - y).norm(), (x + y).norm());
}

TEST(FivePoint, RecoversTrueEssentialFromExactMinimalSets) {
  Rng rng(202);
  int total_candidates = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const TwoViewData data = MakeTwoView(rng, 5);
    const std::vector<Mat3> candidates =
        coffee::five_point_candidates(data.a, data.b);
    ASSERT_FALSE(candidates.empty()) << "trial " << trial;
    total_candidates += static_cast<int>(candidates.size());

    double best = 1e9;
    for (const Mat3& candidate : candidates) {
      best = std::min(best, EssentialDistance(candidate, data.essential));
      // Every candidate satisfies the defining constraints.
      for (size_t i = 0; i < data.a.size(); ++i) {
        const Vec3 ha(data.a[i].x(), data.a[i].y(), 1.0);
        const Vec3 hb(data.b[i].x(), data.b[i].y(), 1.0);
        EXPECT_LT(std::abs(hb.dot(candidate * ha)), 1e-7);
      }
      EXPECT_LT(std::abs(candidate.determinant()), 1e-8);
    }
    EXPECT_LT(best, 1e-6) << "trial " << trial;
  }
  // Minimal problems have up to ten solutions; several per trial is typical.
  EXPECT_GT(total_candidates, 150);
}

TEST(FivePoint, HandlesCoplanarPoints) {
  Rng rng(203);
  for (int trial = 0; trial < 20; ++trial) {
    const TwoViewData data = MakeTwoView(rng, 5, /*planar=*/true);
    const std::vector<Mat3> candidates =
        coffee::five_point_candidates(data.a, data.b);
    ASSERT_FALSE(candidates.empty());
    double best = 1e9;
    for (const Mat3& candidate : candidates)
      best = std::min(best, EssentialDistance(candidate, data.essential));
    EXPECT_LT(best, 1e-6) << "trial " << trial;
  }
}

TEST(FivePoint, RejectsUndersizedInput) {
  const std::vector<Vec2> four(4, Vec2(0.1, 0.2));
  EXPECT_THROW(coffee::five_point_candidates(four, four),
               coffee::ValidationError);
}

// ---------------------------------------------------------------------------
// Essential-matrix decomposition
// ---------------------------------------------------------------------------

TEST(Decompose, RecoversPoseFromTrueEssential) {
  Rng rng(303);
  for (int trial = 0; trial < 50; ++trial) {
    const TwoViewData data = MakeTwoView(rng, 20);
    const RelativePose pose =
        coffee::decompose_essential(data.essential, data.a, data.b);
    // The angle metrics bottom out near sqrt(machine epsilon) because of
    // acos; 1e-6 radians is far below any wrong candidate (off by >= 90 deg).
    EXPECT_LT(coffee::rotation_error(pose.rotation, data.truth.rotation), 1e-6);
    EXPECT_LT(coffee::direction_error(pose.translation, data.truth.translation),
              1e-6);
  }
}

TEST(Decompose, RejectsZeroParallaxCorrespondences) {
  Rng rng(304);
  // Correspondences generated by a pure rotation: every pair of viewing rays
  // is parallel once the rotation is undone, so no candidate can be ranked.
  const Rotation3 rot = Rotation3::from_axis_angle(RandomUnit(rng), 0.3);
  std::vector<Vec2> a, b;
  for (int i = 0; i < 20; ++i) {
    const Vec3 point(rng.uniform(-1, 1), rng.uniform(-1, 1),
                     rng.uniform(4, 8));
    const Vec3 in_b = rot.apply(point);
    a.emplace_back(point.x() / point.z(), point.y() / point.z());
    b.emplace_back(in_b.x() / in_b.z(), in_b.y() / in_b.z());
  }
  const Mat3 essential =
      coffee::essential_from_pose(RelativePose{rot, RandomUnit(rng)});
  EXPECT_THROW(coffee::decompose_essential(essential, a, b),
               coffee::NumericError);
}

TEST(Decompose, RejectsSplitCheiralityVote) {
  Rng rng(305);
  const Rotation3 rot = Rotation3::from_axis_angle(RandomUnit(rng), 0.2);
  const Vec3 t = RandomUnit(rng);
  const Mat3 rm = rot.matrix();
  std::vector<Vec2> a, b;
  // Half the points in front of both cameras, half behind both: the mirror
  // candidate collects exactly as much support as the true one.
  int front = 0, behind = 0;
  while (front < 10 || behind < 10) {
    const double sign = (front <= behind) ? 1.0 : -1.0;
    const Vec3 point(rng.uniform(-1, 1), rng.uniform(-1, 1),
                     sign * rng.uniform(6, 10));
    const Vec3 in_b = rm * point + 0.2 * t;
    if (sign > 0 && (in_b.z() < 0.5 || front >= 10)) continue;
    if (sign < 0 && (in_b.z() > -0.5 || behind >= 10)) continue;
    (sign > 0 ? front : behind) += 1;
    a.emplace_back(point.x() / point.z(), point.y() / point.z());
    b.emplace_back(in_b.x() / in_b.z(), in_b.y() / in_b.z());
  }
  const Mat3 essential = coffee::skew(0.2 * t) * rm;
  EXPECT_THROW(coffee::decompose_essential(essential, a, b),
               coffee::NumericError);
}

// ---------------------------------------------------------------------------
// Sampson error
// ---------------------------------------------------------------------------

TEST(Sampson, NearZeroOnExactAndGrowsWithPerturbation) {
  Rng rng(404);
  const TwoViewData data = MakeTwoView(rng, 30);
  const double focal = 512.0;
  for (size_t i = 0; i < data.a.size(); ++i) {
    EXPECT_LT(coffee::sampson_error_px(data.essential, data.a[i], data.b[i],
                                       focal),
              1e-7);
  }
  // Perturb one observation perpendicular to its epipolar line.
  const Vec3 line = data.essential * Vec3(data.a[0].x(), data.a[0].y(), 1.0);
  const Vec2 normal = Vec2(line.x(), line.y()).normalized();
  auto perturbed_error = [&](double pixels) {
    const Vec2 moved = data.b[0] + (pixels / focal) * normal;
    return coffee::sampson_error_px(data.essential, data.a[0], moved, focal);
  };
  const double at1 = perturbed_error(1.0);
  const double at3 = perturbed_error(3.0);
  EXPECT_GT(at1, 0.3);
  EXPECT_GT(at3, at1);
  EXPECT_GT(at3, 1.0);
  EXPECT_LT(at3, 4.0);
}

// ---------------------------------------------------------------------------
// Error metrics and frame-to-frame ground truth
// ---------------------------------------------------------------------------

TEST(Metrics, RotationErrorIsAxisAngleMagnitude) {
  Rng rng(505);
  for (int trial = 0; trial < 20; ++trial) {
    const double angle = rng.uniform(0.01, 3.0);
    const Rotation3 r = Rotation3::from_axis_angle(RandomUnit(rng), angle);
    EXPECT_NEAR(coffee::rotation_error(r, Rotation3::identity()), angle, 1e-9);
    const Rotation3 base = Rotation3::from_axis_angle(RandomUnit(rng), 1.1);
    EXPECT_NEAR(coffee::rotation_error(r * base, base), angle, 1e-9);
  }
}

TEST(Metrics, SignedAxisBiasRecoversOverRotation) {
  const Vec3 axis(0, 1, 0);
  Rng rng(509);
  for (int trial = 0; trial < 20; ++trial) {
    const double truth_angle = rng.uniform(-1.0, 1.0);
    const double bias = rng.uniform(-0.5, 0.5);
    const Rotation3 truth = Rotation3::from_axis_angle(axis, truth_angle);
    const Rotation3 estimate =
        Rotation3::from_axis_angle(axis, truth_angle + bias);
    EXPECT_NEAR(coffee::signed_axis_bias(estimate, truth, axis), bias, 1e-9);
    // Flipping the reference axis flips the sign.
    EXPECT_NEAR(coffee::signed_axis_bias(estimate, truth, -axis), -bias, 1e-9);
  }
}

TEST(Metrics, SignedAxisBiasIgnoresOrthogonalError) {
  const Vec3 axis(0, 1, 0);
  const Rotation3 truth = Rotation3::from_axis_angle(axis, 0.4);
  const Rotation3 tilted =
      Rotation3::from_axis_angle(Vec3(1, 0, 0), 0.2) * truth;
  EXPECT_NEAR(coffee::signed_axis_bias(tilted, truth, axis), 0.0, 1e-12);
  EXPECT_THROW(coffee::signed_axis_bias(truth, truth, Vec3::Zero()),
               coffee::ValidationError);
}

TEST(Metrics, RelativePoseMatchesComposedTransforms) {
  Rng rng(506);
  for (int trial = 0; trial < 20; ++trial) {
    RigidTransform to_cam_a{Rotation3::random(rng),
                            Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian())};
    RigidTransform to_cam_b{Rotation3::random(rng),
                            Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian())};
    const RelativePose rel = coffee::relative_pose(to_cam_a, to_cam_b);
    const RigidTransform ab = to_cam_b.compose(to_cam_a.inverse());
    EXPECT_LT(coffee::rotation_error(rel.rotation, ab.rotation), 1e-7);
    EXPECT_NEAR(rel.translation.norm(), 1.0, 1e-12);
    EXPECT_LT(coffee::direction_error(rel.translation, ab.translation), 1e-7);
  }
}

TEST(Metrics, RelativePoseRejectsZeroBaseline) {
  const RigidTransform pose{Rotation3::identity(), Vec3(0, 0, -5)};
  EXPECT_THROW(coffee::relative_pose(pose, pose), coffee::NumericError);
}

// ---------------------------------------------------------------------------
// RANSAC
// ---------------------------------------------------------------------------

TEST(Ransac, RecoversPoseUnderNoiseAndOutliers) {
  Rng rng(606);
  const TwoViewData data = MakeTwoView(rng, 200);
  const double focal = 512.0;
  std::vector<Vec2> noisy_a = data.a;
  std::vector<Vec2> noisy_b = data.b;
  std::vector<bool> is_outlier(200, false);
  const double sigma = 0.5 / focal;
  for (int i = 0; i < 200; ++i) {
    noisy_a[i] += sigma * Vec2(rng.gaussian(), rng.gaussian());
    noisy_b[i] += sigma * Vec2(rng.gaussian(), rng.gaussian());
  }
  for (int i = 0; i < 60; ++i) {
    const int j = 3 * i;  // every third point becomes an outlier
    is_outlier[j] = true;
    noisy_b[j] = Vec2(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
  }

  coffee::RansacOptions options;
  options.threshold_px = 2.0;
  options.mean_focal = focal;
  options.seed = 7;
  const coffee::PoseEstimate estimate =
      coffee::ransac_pose(noisy_a, noisy_b, options);

  EXPECT_FALSE(estimate.low_confidence);
  EXPECT_LT(coffee::rotation_error(estimate.pose.rotation, data.truth.rotation),
            coffee::deg2rad(1.0));
  EXPECT_LT(coffee::direction_error(estimate.pose.translation,
                                    data.truth.translation),
            coffee::deg2rad(3.0));

  int true_positive = 0, false_positive = 0, actual_inliers = 0;
  for (int i = 0; i < 200; ++i) {
    if (!is_outlier[i]) ++actual_inliers;
    if (!estimate.inliers[i]) continue;
    (is_outlier[i] ? false_positive : true_positive) += 1;
  }
  EXPECT_GT(true_positive, static_cast<int>(0.85 * actual_inliers));
  EXPECT_LT(false_positive, 10);

  // Same seed, same data: bitwise identical result.
  const coffee::PoseEstimate again =
      coffee::ransac_pose(noisy_a, noisy_b, options);
  EXPECT_EQ(estimate.inliers, again.inliers);
  EXPECT_EQ(estimate.pose.rotation.quat().coeffs(),
            again.pose.rotation.quat().coeffs());
  EXPECT_EQ(estimate.pose.translation, again.pose.translation);
}

TEST(Ransac, AdaptiveTerminationStopsEarlyOnCleanData) {
  Rng rng(607);
  const TwoViewData data = MakeTwoView(rng, 100);
  coffee::RansacOptions options;
  options.mean_focal = 512.0;
  options.seed = 11;
  const coffee::PoseEstimate estimate =
      coffee::ransac_pose(data.a, data.b, options);
  EXPECT_LT(estimate.iterations, 50);
  EXPECT_GT(estimate.inlier_ratio, 0.99);
  EXPECT_LT(coffee::rotation_error(estimate.pose.rotation, data.truth.rotation),
            1e-4);
}

TEST(Ransac, FlagsGarbageCorrespondences) {
  Rng rng(608);
  std::vector<Vec2> a, b;
  for (int i = 0; i < 150; ++i) {
    a.emplace_back(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
    b.emplace_back(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
  }
  coffee::RansacOptions options;
  options.mean_focal = 512.0;
  options.seed = 13;
  try {
    const coffee::PoseEstimate estimate = coffee::ransac_pose(a, b, options);
    EXPECT_TRUE(estimate.low_confidence);
  } catch (const coffee::NumericError&) {
    // Equally acceptable: unrelated points admit no consistent hypothesis.
  }
}

TEST(Ransac, ValidatesInputs) {
  const std::vector<Vec2> five(5, Vec2(0, 0));
  std::vector<Vec2> four(4, Vec2(0, 0));
  EXPECT_THROW(coffee::ransac_pose(four, four), coffee::ValidationError);
  coffee::RansacOptions bad;
  bad.threshold_px = -1.0;
  EXPECT_THROW(coffee::ransac_pose(five, five, bad), coffee::ValidationError);
}

}  // namespace
