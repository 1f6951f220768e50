// Tests for ground-truth correspondence construction, the matching loss with
// its unmatched buckets, and the joint descriptor+matcher training loop.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "coffee/bvh.hpp"
#include "coffee/shapegen.hpp"
#include "coffee/training.hpp"

namespace {

using coffee::build_truth;
using coffee::CameraModel;
using coffee::CorrespondenceTruth;
using coffee::DescriptorNet;
using coffee::Image;
using coffee::KeypointSet;
using coffee::Mat;
using coffee::MatcherNet;
using coffee::RigidTransform;
using coffee::Rng;
using coffee::TrainConfig;
using coffee::TrainingPair;
using coffee::TrainingRun;
using coffee::Vec2;
using coffee::Vec3;

// Exact-arithmetic camera: power-of-two focal length and integer principal
// point, so that with unit depth and identity pose a keypoint transfers to
// its own pixel with zero floating-point error.  Distances to shifted copies
// are then exact, which the strict 1 px boundary test depends on.
CameraModel ExactCamera() { return CameraModel(128, 128, 32, 32, 64, 64); }

Image FlatDepth(int width, int height, double value) {
  Image d(width, height);
  for (double& p : d.pixels) p = value;
  return d;
}

KeypointSet GridKeypoints(int width, int height, double spacing,
                          double margin) {
  KeypointSet k;
  for (double y = margin; y <= height - margin; y += spacing)
    for (double x = margin; x <= width - margin; x += spacing) {
      k.points.emplace_back(x, y);
      k.shadow_lengths.push_back(3.0 + std::fmod(x + y, 11.0));
    }
  return k;
}

KeypointSet ShiftKeypoints(const KeypointSet& k, const Vec2& delta) {
  KeypointSet out = k;
  out.frame_index = k.frame_index + 1;
  for (Vec2& p : out.points) p += delta;
  return out;
}

// Keypoints spread at least min_spacing apart with an interior margin.
KeypointSet SpreadKeypoints(Rng& rng, int count, int width, int height,
                            double margin = 16.0, double min_spacing = 6.0) {
  KeypointSet k;
  while (static_cast<int>(k.size()) < count) {
    const Vec2 p(margin + rng.uniform() * (width - 2 * margin),
                 margin + rng.uniform() * (height - 2 * margin));
    bool spaced = true;
    for (const Vec2& q : k.points) spaced &= (p - q).norm() >= min_spacing;
    if (!spaced) continue;
    k.points.push_back(p);
    k.shadow_lengths.push_back(1.0 + rng.uniform() * 24.0);
  }
  return k;
}

// A supervised pair on a flat unit-depth plane: n_match keypoints jittered by
// at most jitter pixels between the frames plus n_extra unmatched extras on
// the B side, with the truth built geometrically.
TrainingPair MakeFlatPair(unsigned seed, int n_match, int n_extra,
                          double jitter = 0.3) {
  Rng rng(seed);
  const int w = 128, h = 128;
  TrainingPair pair;
  pair.width = w;
  pair.height = h;
  pair.kps_a = SpreadKeypoints(rng, n_match, w, h);
  pair.kps_b = pair.kps_a;
  pair.kps_b.frame_index = 1;
  for (Vec2& p : pair.kps_b.points)
    p += Vec2(rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter));
  int extras = 0;
  while (extras < n_extra) {
    const Vec2 p(16 + rng.uniform() * (w - 32), 16 + rng.uniform() * (h - 32));
    bool spaced = true;
    for (const Vec2& q : pair.kps_b.points) spaced &= (p - q).norm() >= 3.0;
    if (!spaced) continue;
    pair.kps_b.points.push_back(p);
    pair.kps_b.shadow_lengths.push_back(1.0 + rng.uniform() * 24.0);
    ++extras;
  }
  const Image depth = FlatDepth(w, h, 10.0);
  const CameraModel cam = CameraModel::from_vfov(w, h, coffee::deg2rad(30.0));
  pair.truth = build_truth(pair.kps_a, pair.kps_b, depth, depth,
                           RigidTransform{}, cam);
  return pair;
}

// ---- ground-truth construction ---------------------------------------------

TEST(TruthTest, IdentityPoseRecoversIdentityAssignment) {
  const CameraModel cam = ExactCamera();
  const Image depth = FlatDepth(cam.width, cam.height, 1.0);
  const KeypointSet kps = GridKeypoints(cam.width, cam.height, 8.0, 8.0);
  ASSERT_GE(kps.size(), 16u);

  const CorrespondenceTruth t =
      build_truth(kps, kps, depth, depth, RigidTransform{}, cam);
  t.validate();
  const int n = static_cast<int>(kps.size());
  EXPECT_TRUE(t.match == Eigen::MatrixXi::Identity(n, n));
  EXPECT_DOUBLE_EQ(t.unmatched_rows.sum(), 0.0);
  EXPECT_DOUBLE_EQ(t.unmatched_cols.sum(), 0.0);
}

TEST(TruthTest, SubPixelShiftStillMatches) {
  const CameraModel cam = ExactCamera();
  const Image depth = FlatDepth(cam.width, cam.height, 1.0);
  const KeypointSet kps_a = GridKeypoints(cam.width, cam.height, 8.0, 8.0);
  const KeypointSet kps_b = ShiftKeypoints(kps_a, Vec2(0.4, 0.0));

  const CorrespondenceTruth t =
      build_truth(kps_a, kps_b, depth, depth, RigidTransform{}, cam);
  const int n = static_cast<int>(kps_a.size());
  EXPECT_TRUE(t.match == Eigen::MatrixXi::Identity(n, n));
}

TEST(TruthTest, TwoPixelShiftMatchesNothing) {
  const CameraModel cam = ExactCamera();
  const Image depth = FlatDepth(cam.width, cam.height, 1.0);
  const KeypointSet kps_a = GridKeypoints(cam.width, cam.height, 8.0, 8.0);
  const KeypointSet kps_b = ShiftKeypoints(kps_a, Vec2(2.0, 0.0));

  const CorrespondenceTruth t =
      build_truth(kps_a, kps_b, depth, depth, RigidTransform{}, cam);
  t.validate();
  EXPECT_EQ(t.match.sum(), 0);
  EXPECT_DOUBLE_EQ(t.unmatched_rows.sum(), double(kps_a.size()));
  EXPECT_DOUBLE_EQ(t.unmatched_cols.sum(), double(kps_b.size()));
}

TEST(TruthTest, ExactlyOnePixelIsOutsideTheStrictRadius) {
  // The match radius is a strict inequality, so a transfer landing at
  // exactly 1.0 px stays unmatched; the exact-arithmetic camera guarantees
  // the distance really is 1.0 and not 1.0 +/- one ulp.
  const CameraModel cam = ExactCamera();
  const Image depth = FlatDepth(cam.width, cam.height, 1.0);
  const KeypointSet kps_a = GridKeypoints(cam.width, cam.height, 8.0, 8.0);
  const KeypointSet kps_b = ShiftKeypoints(kps_a, Vec2(1.0, 0.0));

  const CorrespondenceTruth t =
      build_truth(kps_a, kps_b, depth, depth, RigidTransform{}, cam);
  EXPECT_EQ(t.match.sum(), 0);

  const KeypointSet kps_inside = ShiftKeypoints(kps_a, Vec2(0.999, 0.0));
  const CorrespondenceTruth t2 =
      build_truth(kps_a, kps_inside, depth, depth, RigidTransform{}, cam);
  EXPECT_EQ(t2.match.sum(), static_cast<int>(kps_a.size()));
}

TEST(TruthTest, LostTransfersAreUnmatchedNotErrors) {
  const CameraModel cam = CameraModel::from_vfov(64, 64, coffee::deg2rad(30.0));
  Image depth_a = FlatDepth(64, 64, 10.0);
  const Image depth_b = FlatDepth(64, 64, 10.0);

  KeypointSet kps_a;
  kps_a.points = {Vec2(20, 20), Vec2(60, 32), Vec2(40, 32), Vec2(32, 48)};
  kps_a.shadow_lengths = {4.0, 4.0, 4.0, 4.0};
  // Depth hole under the first keypoint.
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) depth_a.at(20 + dx, 20 + dy) = 0.0;

  // Pure x-translation shifts every reprojection by fx * tx / depth.
  RigidTransform pose_ab;
  pose_ab.translation = Vec3(0.5, 0.0, 0.0);
  const double shift = cam.fx * 0.5 / 10.0;
  ASSERT_GT(60.0 + shift, 64.0);  // second keypoint leaves the image

  KeypointSet kps_b;
  kps_b.frame_index = 1;
  for (int i = 2; i < 4; ++i) {
    kps_b.points.push_back(kps_a.points[i] + Vec2(shift, 0.0));
    kps_b.shadow_lengths.push_back(4.0);
  }

  const CorrespondenceTruth t =
      build_truth(kps_a, kps_b, depth_a, depth_b, pose_ab, cam);
  t.validate();
  EXPECT_EQ(t.match.sum(), 2);
  EXPECT_EQ(t.match(2, 0), 1);
  EXPECT_EQ(t.match(3, 1), 1);
  EXPECT_DOUBLE_EQ(t.unmatched_rows(0), 1.0);  // depth hole
  EXPECT_DOUBLE_EQ(t.unmatched_rows(1), 1.0);  // left the image
  EXPECT_EQ(coffee::transferable_count(kps_a, depth_a, depth_b, pose_ab, cam),
            2);
}

TEST(TruthTest, DepthDisagreementVetoesTheMatch) {
  const CameraModel cam = ExactCamera();
  const Image depth_a = FlatDepth(cam.width, cam.height, 1.0);
  KeypointSet kps;
  kps.points = {Vec2(16, 16), Vec2(32, 32), Vec2(48, 48)};
  kps.shadow_lengths = {4.0, 4.0, 4.0};

  // B images a surface at half the depth around the second keypoint: the
  // transferred point is occluded there and must stay unmatched.
  Image depth_b = FlatDepth(cam.width, cam.height, 1.0);
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) depth_b.at(32 + dx, 32 + dy) = 0.5;

  const CorrespondenceTruth occluded =
      build_truth(kps, kps, depth_a, depth_b, RigidTransform{}, cam);
  EXPECT_EQ(occluded.match(0, 0), 1);
  EXPECT_EQ(occluded.match(1, 1), 0);
  EXPECT_EQ(occluded.match(2, 2), 1);
  EXPECT_DOUBLE_EQ(occluded.unmatched_rows(1), 1.0);

  // A 1.5% depth disagreement stays within the 2% tolerance.
  Image depth_close = FlatDepth(cam.width, cam.height, 1.0);
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) depth_close.at(32 + dx, 32 + dy) = 1.015;
  const CorrespondenceTruth kept =
      build_truth(kps, kps, depth_a, depth_close, RigidTransform{}, cam);
  EXPECT_EQ(kept.match(1, 1), 1);
}

TEST(TruthTest, ValidationCatchesCorruptedAssignments) {
  CorrespondenceTruth t;
  t.match = Eigen::MatrixXi::Identity(3, 3);
  t.unmatched_rows = Eigen::VectorXd::Zero(3);
  t.unmatched_cols = Eigen::VectorXd::Zero(3);
  EXPECT_NO_THROW(t.validate());

  CorrespondenceTruth doubled = t;
  doubled.match(0, 1) = 1;  // two matches in row 0
  EXPECT_THROW(doubled.validate(), coffee::ValidationError);

  CorrespondenceTruth skewed = t;
  skewed.unmatched_rows(2) = 1.0;  // indicator out of sync with the row sum
  EXPECT_THROW(skewed.validate(), coffee::ValidationError);

  CorrespondenceTruth nonbinary = t;
  nonbinary.match(1, 1) = 2;
  EXPECT_THROW(nonbinary.validate(), coffee::ValidationError);
}

// Rendered rotating-asteroid pair shared by the coverage and symmetry tests.
struct RotationFixture {
  KeypointSet kps_a, kps_b;
  Image depth_a{1, 1}, depth_b{1, 1};
  RigidTransform pose_ab;
  CameraModel cam;
};

const RotationFixture& GetRotationFixture() {
  static const RotationFixture fixture = [] {
    coffee::ShapeParams params;
    params.roughness = 4.0;
    params.scale = Vec3(1.4, 1.2, 1.0);
    params.deform = 4.0;
    params.crater_depth = 0.5;
    params.crater_count = 40;
    params.rocks_large = 10;
    params.rocks_medium = 30;
    params.rocks_small = 200;
    params.seed = 321;
    const coffee::TriMesh mesh = coffee::generate_shape(params);
    const coffee::Bvh bvh(mesh);
    RotationFixture f;
    f.cam = CameraModel::from_vfov(320, 320, coffee::deg2rad(30.0));
    const double dist =
        mesh.bounding_radius() / std::tan(coffee::deg2rad(10.0));

    std::vector<coffee::SceneFrame> frames;
    for (int i = 0; i < 2; ++i) {
      coffee::Scene scene;
      scene.mesh = &mesh;
      scene.asteroid_pose.rotation = coffee::Rotation3::from_axis_angle(
          Vec3(0, 1, 0), coffee::deg2rad(10.0 * i));
      scene.camera_pose.translation = Vec3(0, 0, -dist);
      scene.sun_dir_inertial = Vec3(std::sin(coffee::deg2rad(45.0)), 0.0,
                                    std::cos(coffee::deg2rad(45.0)));
      frames.push_back(coffee::render(scene, f.cam, bvh, i));
    }
    f.kps_a = coffee::detect(frames[0], f.cam);
    f.kps_b = coffee::detect(frames[1], f.cam);
    f.depth_a = frames[0].depth;
    f.depth_b = frames[1].depth;
    f.pose_ab = frames[1].pose.compose(frames[0].pose.inverse());
    return f;
  }();
  return fixture;
}

TEST(TruthTest, RotationPairCoversTheSharedSurface) {
  const RotationFixture& f = GetRotationFixture();
  ASSERT_GE(f.kps_a.size(), 20u);
  ASSERT_GE(f.kps_b.size(), 20u);

  const CorrespondenceTruth t = build_truth(f.kps_a, f.kps_b, f.depth_a,
                                            f.depth_b, f.pose_ab, f.cam);
  t.validate();
  const int transferable = coffee::transferable_count(f.kps_a, f.depth_a,
                                                      f.depth_b, f.pose_ab,
                                                      f.cam);
  ASSERT_GT(transferable, 0);
  EXPECT_GE(t.match.sum(), 15);
  // At least 30% of the keypoints whose transfer survives visibility and
  // occlusion checks are re-detected within a pixel after a 10 deg rotation.
  EXPECT_GE(double(t.match.sum()) / transferable, 0.30);
}

TEST(TruthTest, SwappingFramesTransposesTheTruth) {
  const RotationFixture& f = GetRotationFixture();
  const CorrespondenceTruth forward = build_truth(
      f.kps_a, f.kps_b, f.depth_a, f.depth_b, f.pose_ab, f.cam);
  const CorrespondenceTruth backward = build_truth(
      f.kps_b, f.kps_a, f.depth_b, f.depth_a, f.pose_ab.inverse(), f.cam);
  EXPECT_TRUE(backward.match.transpose() == forward.match);
  EXPECT_TRUE(backward.unmatched_rows == forward.unmatched_cols);
  EXPECT_TRUE(backward.unmatched_cols == forward.unmatched_rows);
}

// ---- matching loss ----------------------------------------------------------

TEST(LossTest, PerfectScoresGiveZeroLoss) {
  const int n = 4;
  Mat s = Mat::Constant(n, n, -50.0);
  s.diagonal().setZero();  // probability one on every true match
  const Mat g = Mat::Identity(n, n);
  EXPECT_NEAR(coffee::matching_loss(s, g), 0.0, 1e-12);
}

TEST(LossTest, UniformScoresOnIdentityMatchClosedForm) {
  const int n = 4;
  const Mat s = Mat::Constant(n, n, std::log(0.25));
  const Mat g = Mat::Identity(n, n);
  EXPECT_NEAR(coffee::matching_loss(s, g), n * std::log(4.0), 1e-10);
}

TEST(LossTest, HandComputedBucketsMatch) {
  // Valid soft-assignment probabilities: rows and columns all below one.
  Mat p(3, 4);
  p << 0.50, 0.20, 0.05, 0.10,  //
      0.10, 0.30, 0.20, 0.15,   //
      0.05, 0.10, 0.30, 0.40;
  const Mat s = p.array().log();
  Mat g = Mat::Zero(3, 4);
  g(0, 1) = 1.0;
  g(2, 3) = 1.0;  // row 1 and columns 0, 2 stay unmatched

  double expected = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) expected -= s(i, j) * g(i, j);
  for (int i = 0; i < 3; ++i)
    expected -= (1.0 - g.row(i).sum()) *
                std::log(1.0 - p.row(i).sum());
  for (int j = 0; j < 4; ++j)
    expected -= (1.0 - g.col(j).sum()) *
                std::log(1.0 - p.col(j).sum());
  EXPECT_NEAR(coffee::matching_loss(s, g), expected, 1e-12);
}

TEST(LossTest, LossIsLinearInTheLabels) {
  Rng rng(4);
  for (const auto& [na, nb] : {std::pair{5, 7}, std::pair{7, 5}}) {
    Mat s(na, nb);
    for (int i = 0; i < na; ++i)
      for (int j = 0; j < nb; ++j) s(i, j) = rng.gaussian();
    Eigen::MatrixXi g = Eigen::MatrixXi::Zero(na, nb);
    for (int k = 0; k < std::min(na, nb) - 1; ++k) g(k, k) = 1;

    const double noise = 0.05;
    const Mat uniform =
        Mat::Constant(na, nb, 1.0 / std::max(na, nb));
    const double blended =
        coffee::matching_loss(s, coffee::blend_truth(g, noise));
    const double mixed = (1.0 - noise) *
                             coffee::matching_loss(s, g.cast<double>()) +
                         noise * coffee::matching_loss(s, uniform);
    EXPECT_NEAR(blended, mixed, 1e-10);
  }
}

// Random doubly sub-stochastic probabilities: rows normalized to one, then
// columns capped at one, then globally shrunk.
Mat RandomSoftAssignment(Rng& rng, int na, int nb) {
  Mat p(na, nb);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) p(i, j) = 0.05 + rng.uniform();
  for (int i = 0; i < na; ++i) p.row(i) /= p.row(i).sum();
  for (int j = 0; j < nb; ++j)
    p.col(j) /= std::max(1.0, p.col(j).sum());
  return 0.9 * p;
}

TEST(LossTest, LossIsNonNegativeOnValidInputs) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int na = 3 + static_cast<int>(rng.uniform() * 5);
    const int nb = 3 + static_cast<int>(rng.uniform() * 5);
    const Mat s = RandomSoftAssignment(rng, na, nb).array().log();
    Eigen::MatrixXi g = Eigen::MatrixXi::Zero(na, nb);
    for (int k = 0; k < std::min(na, nb); ++k)
      if (rng.uniform() < 0.6) g(k, k) = 1;
    const Mat blended = coffee::blend_truth(g, 0.1 * rng.uniform());
    EXPECT_GE(coffee::matching_loss(s, blended), 0.0);
  }
}

TEST(LossTest, InvalidShapesAndLabelsAreRejected) {
  const Mat s = Mat::Constant(3, 4, std::log(0.1));
  EXPECT_THROW(coffee::matching_loss(s, Mat::Zero(4, 3)),
               coffee::ValidationError);

  Mat negative = Mat::Zero(3, 4);
  negative(0, 0) = -0.2;
  EXPECT_THROW(coffee::matching_loss(s, negative), coffee::ValidationError);

  Mat heavy = Mat::Zero(3, 4);
  heavy.row(0).setConstant(0.5);  // row mass 2
  EXPECT_THROW(coffee::matching_loss(s, heavy), coffee::ValidationError);

  EXPECT_THROW(coffee::blend_truth(Eigen::MatrixXi::Zero(2, 2), 0.2),
               coffee::ValidationError);
  EXPECT_THROW(coffee::blend_truth(Eigen::MatrixXi::Zero(2, 2), -0.01),
               coffee::ValidationError);
}

TEST(LossTest, LossGradientMatchesFiniteDifferences) {
  Rng rng(13);
  const int na = 4, nb = 5;
  coffee::Parameter s_param(RandomSoftAssignment(rng, na, nb).array().log());
  Eigen::MatrixXi g = Eigen::MatrixXi::Zero(na, nb);
  g(0, 2) = g(1, 0) = g(3, 4) = 1;
  const Mat blended = coffee::blend_truth(g, 0.05);

  coffee::Tape t;
  const int leaf = t.leaf(s_param);
  t.backward(coffee::matching_loss(t, leaf, blended));

  const double h = 1e-6;
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) {
      const double save = s_param.value(i, j);
      s_param.value(i, j) = save + h;
      const double lp = coffee::matching_loss(s_param.value, blended);
      s_param.value(i, j) = save - h;
      const double lm = coffee::matching_loss(s_param.value, blended);
      s_param.value(i, j) = save;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_NEAR(s_param.grad(i, j), fd, 1e-6)
          << "entry (" << i << ", " << j << ")";
    }
}

// ---- training loop ----------------------------------------------------------

TEST(TrainLoopTest, LearningRateFollowsExponentialDecay) {
  const TrainingPair pair = MakeFlatPair(21, 4, 0);
  ASSERT_GE(pair.truth.match.sum(), 3);
  Rng net_rng(5);
  DescriptorNet dnet(net_rng);
  MatcherNet mnet(net_rng);

  TrainConfig cfg;  // defaults: base 1e-5, decay 0.95 per epoch
  cfg.epochs = 31;
  cfg.batch_pairs = 1;
  cfg.seed = 3;
  const TrainingRun run = coffee::train_pairs(dnet, mnet, {pair}, {}, cfg);

  ASSERT_EQ(run.metrics.size(), 31u);
  EXPECT_DOUBLE_EQ(run.metrics[0].lr, 1e-5);
  EXPECT_NEAR(run.metrics[30].lr, 1e-5 * std::pow(0.95, 30), 1e-15);
  EXPECT_EQ(run.metrics[30].epoch, 30);
  EXPECT_EQ(run.metrics[30].step, 31);
  for (const auto& row : run.metrics) EXPECT_TRUE(std::isfinite(row.loss));
}

TEST(TrainLoopTest, AccumulatedBatchOfClonesMatchesSingleStep) {
  // Averaging gradients over a window of identical pairs must reproduce the
  // single-pair step exactly.
  const TrainingPair pair = MakeFlatPair(22, 6, 1);
  TrainConfig cfg;
  cfg.base_lr = 1e-4;
  cfg.epochs = 1;
  cfg.seed = 3;

  Rng rng_single(5);
  DescriptorNet d_single(rng_single);
  MatcherNet m_single(rng_single);
  cfg.batch_pairs = 1;
  const TrainingRun run_single =
      coffee::train_pairs(d_single, m_single, {pair}, {}, cfg);

  Rng rng_window(5);
  DescriptorNet d_window(rng_window);
  MatcherNet m_window(rng_window);
  cfg.batch_pairs = 2;
  const TrainingRun run_window =
      coffee::train_pairs(d_window, m_window, {pair, pair}, {}, cfg);

  ASSERT_EQ(run_single.step_losses.size(), 1u);
  ASSERT_EQ(run_window.step_losses.size(), 1u);
  EXPECT_DOUBLE_EQ(run_single.step_losses[0], run_window.step_losses[0]);
  const Mat diff =
      d_single.stem.weights.value - d_window.stem.weights.value;
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TrainLoopTest, TrainingIsSeedDeterministic) {
  const std::vector<TrainingPair> train = {
      MakeFlatPair(31, 6, 1), MakeFlatPair(32, 7, 0), MakeFlatPair(33, 5, 2)};
  const std::vector<TrainingPair> val = {MakeFlatPair(34, 6, 1)};
  TrainConfig cfg;
  cfg.base_lr = 1e-4;
  cfg.epochs = 3;
  cfg.batch_pairs = 2;
  cfg.seed = 11;

  auto run_once = [&](Mat* final_stem) {
    Rng rng(5);
    DescriptorNet dnet(rng);
    MatcherNet mnet(rng);
    const TrainingRun run = coffee::train_pairs(dnet, mnet, train, val, cfg);
    *final_stem = dnet.stem.weights.value;
    return run;
  };
  Mat stem_a, stem_b;
  const TrainingRun ra = run_once(&stem_a);
  const TrainingRun rb = run_once(&stem_b);

  ASSERT_EQ(ra.step_losses.size(), rb.step_losses.size());
  for (std::size_t i = 0; i < ra.step_losses.size(); ++i)
    EXPECT_DOUBLE_EQ(ra.step_losses[i], rb.step_losses[i]);
  EXPECT_TRUE((stem_a.array() == stem_b.array()).all());
  EXPECT_DOUBLE_EQ(ra.final_val_precision, rb.final_val_precision);
}

TEST(TrainLoopTest, NonFiniteLossAbortsWithDiagnostic) {
  const TrainingPair pair = MakeFlatPair(41, 5, 1);
  Rng rng(5);
  DescriptorNet dnet(rng);
  MatcherNet mnet(rng);
  dnet.stem.weights.value(0, 0) = std::nan("");

  TrainConfig cfg;
  cfg.epochs = 1;
  bool threw = false;
  try {
    coffee::train_pairs(dnet, mnet, {pair}, {}, cfg);
  } catch (const coffee::NumericError& e) {
    threw = true;
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("pair"), std::string::npos) << msg;
  }
  EXPECT_TRUE(threw);
}

TEST(TrainLoopTest, EmptyOrInvalidInputsAreRejected) {
  Rng rng(5);
  DescriptorNet dnet(rng);
  MatcherNet mnet(rng);
  TrainConfig cfg;
  cfg.epochs = 1;

  EXPECT_THROW(coffee::train_pairs(dnet, mnet, {}, {}, cfg),
               coffee::ValidationError);

  TrainingPair empty_side = MakeFlatPair(51, 4, 0);
  empty_side.kps_b = KeypointSet{};
  empty_side.truth.match.resize(4, 0);
  empty_side.truth.unmatched_cols.resize(0);
  EXPECT_THROW(coffee::train_pairs(dnet, mnet, {empty_side}, {}, cfg),
               coffee::ValidationError);

  TrainingPair mismatched = MakeFlatPair(52, 4, 0);
  mismatched.truth.match = Eigen::MatrixXi::Zero(3, 3);
  EXPECT_THROW(coffee::train_pairs(dnet, mnet, {mismatched}, {}, cfg),
               coffee::ValidationError);

  TrainConfig bad = cfg;
  bad.epochs = 0;
  EXPECT_THROW(
      coffee::train_pairs(dnet, mnet, {MakeFlatPair(53, 4, 0)}, {}, bad),
      coffee::ValidationError);
  bad = cfg;
  bad.truth_noise = 0.2;
  EXPECT_THROW(
      coffee::train_pairs(dnet, mnet, {MakeFlatPair(53, 4, 0)}, {}, bad),
      coffee::ValidationError);
}

TEST(TrainLoopTest, MetricsAndCheckpointsAreEmittedPerEpoch) {
  const std::vector<TrainingPair> train = {MakeFlatPair(61, 5, 1),
                                           MakeFlatPair(62, 6, 0)};
  Rng rng(5);
  DescriptorNet dnet(rng);
  MatcherNet mnet(rng);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 2;

  const std::string dir = testing::TempDir() + "/coffee_train_out";
  std::filesystem::create_directories(dir);
  const std::string csv_path = dir + "/metrics.csv";
  const TrainingRun run =
      coffee::train_pairs(dnet, mnet, train, train, cfg, csv_path, dir);

  std::ifstream csv(csv_path);
  ASSERT_TRUE(csv.good());
  std::string line;
  ASSERT_TRUE(std::getline(csv, line));
  EXPECT_EQ(line, "epoch,step,loss,val_precision,lr");
  int rows = 0;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    ASSERT_EQ(fields.size(), 5u);
    EXPECT_EQ(std::stoi(fields[0]), rows);
    EXPECT_EQ(std::stoi(fields[1]), rows + 1);  // one step per epoch
    EXPECT_TRUE(std::isfinite(std::stod(fields[2])));
    const double precision = std::stod(fields[3]);
    EXPECT_GE(precision, 0.0);
    EXPECT_LE(precision, 1.0);
    EXPECT_NEAR(std::stod(fields[4]), 1e-5 * std::pow(0.95, rows), 1e-15);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
  ASSERT_EQ(run.metrics.size(), 3u);

  // Per-epoch checkpoints load back into a fresh model of the same shape.
  for (int e = 0; e < 3; ++e) {
    char name[64];
    std::snprintf(name, sizeof(name), "/weights_epoch%03d.cfw", e);
    Rng fresh_rng(9);
    DescriptorNet fresh_d(fresh_rng);
    MatcherNet fresh_m(fresh_rng);
    EXPECT_NO_THROW(coffee::load_model_weights(dir + name, fresh_d, fresh_m));
  }
  EXPECT_NO_THROW(coffee::check_model_manifest(
      coffee::load_model_manifest(dir + "/model.json"), dnet, mnet));
}

TEST(TrainLoopTest, OverfitsASinglePairToHighPrecision) {
  const TrainingPair pair = MakeFlatPair(11, 20, 4);
  ASSERT_EQ(pair.truth.match.sum(), 20);
  ASSERT_DOUBLE_EQ(pair.truth.unmatched_cols.sum(), 4.0);

  Rng rng(5);
  DescriptorNet dnet(rng);
  MatcherNet mnet(rng);
  TrainConfig cfg;
  cfg.base_lr = 1e-4;
  cfg.lr_decay = 1.0;
  cfg.epochs = 500;
  cfg.batch_pairs = 1;
  cfg.truth_noise = 0.0;
  cfg.seed = 3;
  const TrainingRun run =
      coffee::train_pairs(dnet, mnet, {pair}, {pair}, cfg);

  ASSERT_EQ(run.step_losses.size(), 500u);
  std::vector<double> window_means;
  for (int start = 0; start + 50 <= 500; start += 50) {
    double sum = 0.0;
    for (int s = start; s < start + 50; ++s) sum += run.step_losses[s];
    window_means.push_back(sum / 50.0);
  }
  for (std::size_t w = 0; w + 1 < window_means.size(); ++w)
    EXPECT_LT(window_means[w + 1], window_means[w])
        << "window " << w << " -> " << w + 1;
  EXPECT_LT(run.step_losses.back(), 0.05);
  EXPECT_GE(run.final_val_precision, 0.90);
}

// ---- end-to-end gradient flow ----------------------------------------------

TEST(EndToEndGradientTest, DescriptorWeightsShapeTheMatchingLoss) {
  const TrainingPair pair = MakeFlatPair(71, 12, 0);
  ASSERT_GE(pair.truth.match.sum(), 10);

  Rng rng(5);
  DescriptorNet dnet(rng);
  MatcherNet mnet(rng);

  auto loss_value = [&]() {
    coffee::Tape t;
    const int loss = coffee::detail::pair_loss_forward(
        t, dnet, mnet, pair, 0.05, /*train_mode=*/false);
    return t.value(loss)(0, 0);
  };
  coffee::Tape t;
  const int loss = coffee::detail::pair_loss_forward(t, dnet, mnet, pair,
                                                     0.05, false);
  t.backward(loss);

  std::vector<coffee::Parameter*> dparams;
  for (auto& [name, p] : coffee::named_tensors(dnet))
    if (p->trainable) dparams.push_back(p);
  ASSERT_EQ(dparams.size(), 70u);

  // Ten random descriptor weights: the finite difference of the full
  // pipeline loss is nonzero and agrees in sign with the backward pass.
  // A dead ReLU branch may legitimately zero out an individual entry, in
  // which case the analytic gradient must agree that it is exactly zero.
  Rng pick(99);
  int live = 0;
  for (int sample = 0; sample < 10; ++sample) {
    coffee::Parameter* p =
        dparams[static_cast<std::size_t>(pick.uniform() * dparams.size()) %
                dparams.size()];
    const int r =
        static_cast<int>(pick.uniform() * p->value.rows()) % p->value.rows();
    const int c =
        static_cast<int>(pick.uniform() * p->value.cols()) % p->value.cols();
    const double save = p->value(r, c);
    const double h = 1e-4;
    p->value(r, c) = save + h;
    const double lp = loss_value();
    p->value(r, c) = save - h;
    const double lm = loss_value();
    p->value(r, c) = save;
    const double fd = (lp - lm) / (2 * h);
    const double analytic = p->grad(r, c);
    if (std::abs(fd) > 1e-9) {
      ++live;
      EXPECT_GT(fd * analytic, 0.0)
          << "sample " << sample << ": fd " << fd << " vs " << analytic;
    } else {
      EXPECT_NEAR(analytic, 0.0, 1e-9) << "sample " << sample;
    }
  }
  EXPECT_GE(live, 8);

  // Every stage of the descriptor stack receives gradient.
  EXPECT_GT(dnet.stem.weights.grad.norm(), 0.0);
  EXPECT_GT(dnet.down1.weights.grad.norm(), 0.0);
  EXPECT_GT(dnet.up2.weights.grad.norm(), 0.0);
  EXPECT_GT(dnet.head.weights.grad.norm(), 0.0);
}

}  // namespace
