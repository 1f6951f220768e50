#include "coffee/detector.hpp"
#include "coffee/shapegen.hpp"

#include <gtest/gtest.h>

#include <cstdio>

namespace {

using coffee::Bvh;
using coffee::CameraModel;
using coffee::Detection;
using coffee::DetectorOptions;
using coffee::Image;
using coffee::KeypointSet;
using coffee::Rng;
using coffee::Rotation3;
using coffee::Scene;
using coffee::SceneFrame;
using coffee::ShapeParams;
using coffee::TriMesh;
using coffee::Vec2;
using coffee::Vec3;

// ---------------------------------------------------------------------------
// Edge filter
// ---------------------------------------------------------------------------

TEST(EdgeFilter, UnitStepResponsePeaksAtExactlyOne) {
  const std::vector<double> taps = coffee::detail::dog_kernel(1.5);
  const int radius = (static_cast<int>(taps.size()) - 1) / 2;
  EXPECT_EQ(radius, 5);  // ceil(3 sigma)

  // Correlate against a unit step and find the peak response.
  std::vector<double> signal(41, 0.0);
  for (int i = 20; i < 41; ++i) signal[i] = 1.0;
  // The center tap of an odd-symmetric kernel is zero, so the step response
  // plateaus at 1.0 across the two samples bracketing the edge.
  std::vector<double> resp(41, -1e9);
  for (int j = radius; j < 41 - radius; ++j) {
    double acc = 0.0;
    for (int i = -radius; i <= radius; ++i) acc += taps[i + radius] * signal[j + i];
    resp[j] = acc;
  }
  EXPECT_NEAR(resp[19], 1.0, 1e-12);
  EXPECT_NEAR(resp[20], 1.0, 1e-12);
  for (int j = radius; j < 41 - radius; ++j)
    if (j != 19 && j != 20) EXPECT_LT(resp[j], 1.0);

  // Odd symmetry: a falling step gives the mirrored response.
  double trough = 1e9;
  for (int j = radius; j < 41 - radius; ++j) {
    double acc = 0.0;
    for (int i = -radius; i <= radius; ++i)
      acc += taps[i + radius] * (1.0 - signal[j + i]);
    trough = std::min(trough, acc);
  }
  EXPECT_NEAR(trough, -1.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Synthetic profiles
// ---------------------------------------------------------------------------

TEST(Detect, ConstantImageProducesNoKeypoints) {
  const CameraModel cam(256, 256, 128, 64, 256, 128);
  Image img(256, 128);
  for (double& p : img.pixels) p = 0.5;
  const KeypointSet set =
      coffee::detect(img, Vec3(0.6, 0.0, 0.8).normalized(), cam);
  EXPECT_EQ(set.size(), 0u);
}

// Intensity 1 for x < 100, 0 for 100 <= x < 140, 1 for x >= 140; the sun
// shines due east so scan rays are image rows.
Image StepProfileImage(int width, int height) {
  Image img(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      img.at(x, y) = (x < 100 || x >= 140) ? 1.0 : 0.0;
  return img;
}

TEST(Detect, StepProfileGivesSubpixelEdgeAndShadowLength) {
  const CameraModel cam(256, 256, 128, 16, 256, 32);
  const Image img = StepProfileImage(256, 32);
  const KeypointSet set = coffee::detect(img, Vec3(1, 0, 0), cam);
  ASSERT_GE(set.size(), 5u);
  EXPECT_NO_THROW(set.validate(256, 32, DetectorOptions{}.nms_radius));
  for (size_t i = 0; i < set.size(); ++i) {
    EXPECT_NEAR(set.points[i].x(), 100.0, 0.5);
    EXPECT_NEAR(set.shadow_lengths[i], 40.0, 1.0);
  }
}

TEST(Detect, ShadowReachingSilhouetteEndIsDiscarded) {
  // Shadow runs to the right image edge: no terminus, so no keypoint.
  const CameraModel cam(256, 256, 128, 16, 256, 32);
  Image img(256, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 256; ++x) img.at(x, y) = x < 100 ? 1.0 : 0.0;
  const KeypointSet set = coffee::detect(img, Vec3(1, 0, 0), cam);
  EXPECT_EQ(set.size(), 0u);
}

// ---------------------------------------------------------------------------
// Rendered cube scene: analytic shadow oracle
// ---------------------------------------------------------------------------

void AddBox(TriMesh& mesh, const Vec3& lo, const Vec3& hi) {
  const int base = static_cast<int>(mesh.positions.size());
  for (int corner = 0; corner < 8; ++corner)
    mesh.positions.emplace_back(corner & 1 ? hi.x() : lo.x(),
                                corner & 2 ? hi.y() : lo.y(),
                                corner & 4 ? hi.z() : lo.z());
  const std::array<std::array<int, 4>, 6> quads = {{{0, 4, 6, 2},
                                                    {1, 3, 7, 5},
                                                    {0, 1, 5, 4},
                                                    {2, 6, 7, 3},
                                                    {0, 2, 3, 1},
                                                    {4, 5, 7, 6}}};
  for (const auto& q : quads) {
    mesh.faces.push_back({base + q[0], base + q[1], base + q[2]});
    mesh.faces.push_back({base + q[0], base + q[2], base + q[3]});
  }
}

// Unit cube on a ground plane lit at 45 degrees, camera straight overhead
// above the sun-facing base edge. The base edge projects to the image row
// v = 256 and the shadow runs 1.0 world units = 51.2 px along the scan rays.
SceneFrame RenderCubeScene(const TriMesh& mesh, const CameraModel& cam) {
  const Bvh bvh(mesh);
  Scene scene;
  scene.mesh = &mesh;
  coffee::Mat3 rc;
  rc.col(0) = Vec3(0, 0, 1);
  rc.col(1) = Vec3(1, 0, 0);
  rc.col(2) = Vec3(0, 1, 0);
  scene.camera_pose.rotation = Rotation3(rc);
  scene.camera_pose.translation = Vec3(0.5, -10, 0);
  scene.sun_dir_inertial = Vec3(1, 1, 0).normalized();
  scene.albedo = 0.9;
  return coffee::render(scene, cam, bvh);
}

TriMesh CubeOnPlane() {
  TriMesh mesh;
  mesh.positions = {Vec3(-4, 0, -4), Vec3(4, 0, -4), Vec3(4, 0, 4),
                    Vec3(-4, 0, 4)};
  mesh.faces = {{0, 1, 2}, {0, 2, 3}};
  AddBox(mesh, Vec3(-0.5, -1.0, -0.5), Vec3(0.5, 0.0, 0.5));
  mesh.recompute_normals();
  return mesh;
}

TEST(Detect, CubeSceneAnchorsKeypointsAtSunFacingBaseEdge) {
  const CameraModel cam(512, 512, 256, 256, 512, 512);
  const TriMesh mesh = CubeOnPlane();
  const SceneFrame frame = RenderCubeScene(mesh, cam);
  const KeypointSet set = coffee::detect(frame, cam);
  ASSERT_GT(set.size(), 0u);
  EXPECT_NO_THROW(set.validate(512, 512, DetectorOptions{}.nms_radius));

  // Sparsity: well under one keypoint per 200 pixels.
  EXPECT_LE(set.size(), static_cast<size_t>(512 * 512 / 200));

  int on_base_edge = 0;
  for (size_t i = 0; i < set.size(); ++i) {
    if (std::abs(set.points[i].y() - 256.0) > 2.0) continue;
    if (std::abs(set.points[i].x() - 256.0) > 20.0) continue;
    ++on_base_edge;
    EXPECT_NEAR(set.shadow_lengths[i], 51.2, 2.0);
  }
  EXPECT_GE(on_base_edge, 3);
}

TEST(Detect, KeypointsLieOnSupportingScanRays) {
  const CameraModel cam(512, 512, 256, 256, 512, 512);
  const TriMesh mesh = CubeOnPlane();
  const SceneFrame frame = RenderCubeScene(mesh, cam);
  const KeypointSet set = coffee::detect(frame, cam);
  ASSERT_GT(set.size(), 0u);

  const std::vector<coffee::ScanRay> rays = coffee::shadow_scan_directions(
      coffee::vanishing_point(coffee::SunGeometry(frame.sun_c, Rotation3()),
                              cam),
      cam);
  for (const Vec2& p : set.points) {
    double best = 1e9;
    for (const coffee::ScanRay& ray : rays) {
      const Vec2 rel = p - ray.origin;
      const double along = rel.dot(ray.dir);
      const double across = std::abs(rel.x() * ray.dir.y() -
                                     rel.y() * ray.dir.x());
      if (along < -0.5 || along > ray.length + 0.5) continue;
      best = std::min(best, across);
    }
    EXPECT_LT(best, 0.5 + 1e-9);
  }
}

TEST(Detect, DeterministicAcrossWorkerCounts) {
  const CameraModel cam(512, 512, 256, 256, 512, 512);
  const TriMesh mesh = CubeOnPlane();
  const SceneFrame frame = RenderCubeScene(mesh, cam);
  const KeypointSet one = coffee::detect(frame, cam, DetectorOptions{}, 1);
  const KeypointSet three = coffee::detect(frame, cam, DetectorOptions{}, 3);
  EXPECT_TRUE(one == three);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

TEST(KeypointIo, JsonlRoundTripIsExact) {
  Rng rng(77);
  std::vector<KeypointSet> sets(3);
  for (int f = 0; f < 3; ++f) {
    sets[f].frame_index = f;
    for (int i = 0; i < 10; ++i) {
      sets[f].points.emplace_back(rng.uniform(0, 512), rng.uniform(0, 512));
      sets[f].shadow_lengths.push_back(rng.uniform(1, 60));
    }
  }
  const std::string path = ::testing::TempDir() + "keypoints.jsonl";
  coffee::save_keypoints(path, sets);
  const std::vector<KeypointSet> back = coffee::load_keypoints(path);
  ASSERT_EQ(back.size(), sets.size());
  for (size_t f = 0; f < sets.size(); ++f) EXPECT_TRUE(back[f] == sets[f]);
  std::remove(path.c_str());
}

// ---------------------------------------------------------------------------
// Anchor stability under sun motion
// ---------------------------------------------------------------------------

TEST(AnchorStability, RequiresAtLeastTwoFrames) {
  const CameraModel cam(256, 256, 128, 128, 256, 256);
  std::vector<SceneFrame> frames(1);
  EXPECT_THROW(coffee::anchor_stability(frames, cam), coffee::ValidationError);
}

SceneFrame ProfileFrame(int frame_index) {
  SceneFrame frame;
  frame.image = StepProfileImage(256, 32);
  frame.depth = Image(256, 32);
  for (double& d : frame.depth.pixels) d = 1.0;
  frame.sun_c = Vec3(1, 0, 0);
  frame.frame_index = frame_index;
  return frame;
}

TEST(AnchorStability, IdenticalFramesHaveZeroDrift) {
  const CameraModel cam(256, 256, 128, 16, 256, 32);
  const std::vector<SceneFrame> frames = {ProfileFrame(0), ProfileFrame(1)};
  const coffee::DriftStats stats = coffee::anchor_stability(frames, cam);
  EXPECT_GT(stats.matched_pairs, 0);
  EXPECT_EQ(stats.median_keypoint_drift_px, 0.0);
  EXPECT_EQ(stats.median_terminus_drift_px, 0.0);
}

// Fixed asteroid, sun azimuth swung 10 degrees about the body pole between
// frames (the same sun parametrization the dataset generator uses): shadow
// edges anchored at occluder bases stay put while the shadow tips sweep.
TEST(AnchorStability, KeypointsAnchorWhileShadowTipsSweep) {
  ShapeParams params;
  params.roughness = 4.0;
  params.scale = Vec3(1.4, 1.2, 1.0);
  params.deform = 4.0;
  params.crater_depth = 0.5;
  params.crater_count = 40;
  params.rocks_large = 10;
  params.rocks_medium = 30;
  params.rocks_small = 200;
  params.seed = 321;
  const TriMesh mesh = coffee::generate_shape(params);
  const Bvh bvh(mesh);
  const CameraModel cam =
      CameraModel::from_vfov(320, 320, coffee::deg2rad(30.0));
  const double dist = mesh.bounding_radius() / std::tan(coffee::deg2rad(10.0));

  std::vector<SceneFrame> frames;
  for (int f = 0; f < 2; ++f) {
    const double azimuth = coffee::deg2rad(45.0 + 10.0 * f);
    Scene scene;
    scene.mesh = &mesh;
    scene.camera_pose.translation = Vec3(0, 0, -dist);
    scene.sun_dir_inertial = Vec3(std::sin(azimuth), 0.0, std::cos(azimuth));
    scene.albedo = 0.8;
    frames.push_back(coffee::render(scene, cam, bvh, f));
  }

  const coffee::DriftStats shadow_scan = coffee::anchor_stability(frames, cam);
  ASSERT_GT(shadow_scan.matched_pairs, 20);
  EXPECT_LT(shadow_scan.median_keypoint_drift_px, 1.0);
  EXPECT_GE(shadow_scan.median_terminus_drift_px,
            shadow_scan.median_abs_shadow_change_px);
  EXPECT_GT(shadow_scan.median_terminus_drift_px,
            shadow_scan.median_keypoint_drift_px);

  const coffee::DriftStats baseline = coffee::anchor_stability(
      frames, cam, DetectorOptions{}, coffee::DetectorKind::kIntensityEdge);
  ASSERT_GT(baseline.matched_pairs, 20);
  EXPECT_GT(baseline.median_keypoint_drift_px,
            shadow_scan.median_keypoint_drift_px);
}

}  // namespace
