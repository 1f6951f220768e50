// Tests for on-disk dataset generation: configuration validation, shape
// distribution overrides, deterministic manifests, frame round-trips,
// benchmark sequences, cleanup on failure, training-pair assembly from
// disk, and match visualization.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "coffee/dataset.hpp"

namespace {

namespace fs = std::filesystem;

using coffee::deg2rad;
using coffee::GenConfig;
using coffee::generate_dataset;
using coffee::Image;
using coffee::IoError;
using coffee::load_pair_frame;
using coffee::load_pair_manifest;
using coffee::load_sequence_frame;
using coffee::load_sequence_manifest;
using coffee::PairRecord;
using coffee::Rng;
using coffee::Rotation3;
using coffee::sample_shape;
using coffee::SceneFrame;
using coffee::SequenceFrameRecord;
using coffee::ShapeParams;
using coffee::ValidationError;
using coffee::Vec2;
using coffee::Vec3;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

GenConfig TinyConfig() {
  GenConfig cfg;
  cfg.shapes = 2;
  cfg.pairs_per_shape = 3;
  cfg.image_size = 64;
  cfg.vfov_deg = 30.0;
  cfg.rotation_deg_min = 8.0;
  cfg.rotation_deg_max = 15.0;
  cfg.val_fraction = 0.2;
  cfg.test_fraction = 0.2;
  cfg.sequence_frames = 4;
  cfg.sequence_kind = "single_axis";
  cfg.sequence_step_deg = 3.0;
  cfg.seed = 11;
  return cfg;
}

// One shared tiny dataset, generated once and reused read-only.
const std::string& TinyDataset() {
  static const std::string dir = [] {
    const std::string d = ::testing::TempDir() + "coffee_tiny_dataset";
    fs::remove_all(d);
    generate_dataset(d, TinyConfig());
    return d;
  }();
  return dir;
}

// ---- configuration ----------------------------------------------------------

TEST(GenConfigTest, DefaultsValidate) { EXPECT_NO_THROW(GenConfig{}.validate()); }

TEST(GenConfigTest, BadFieldsAreRejected) {
  const auto expect_invalid = [](auto&& mutate) {
    GenConfig cfg;
    mutate(cfg);
    EXPECT_THROW(cfg.validate(), ValidationError);
  };
  expect_invalid([](GenConfig& c) { c.shapes = 0; });
  expect_invalid([](GenConfig& c) { c.pairs_per_shape = 0; });
  expect_invalid([](GenConfig& c) { c.image_size = 8; });
  expect_invalid([](GenConfig& c) { c.vfov_deg = 0.0; });
  expect_invalid([](GenConfig& c) { c.vfov_deg = 180.0; });
  expect_invalid([](GenConfig& c) { c.rotation_deg_min = 0.0; });
  expect_invalid([](GenConfig& c) { c.rotation_deg_max = 5.0; c.rotation_deg_min = 6.0; });
  expect_invalid([](GenConfig& c) { c.val_fraction = 0.5; c.test_fraction = 0.5; });
  expect_invalid([](GenConfig& c) { c.val_fraction = -0.1; });
  expect_invalid([](GenConfig& c) { c.sequence_frames = 1; });
  expect_invalid([](GenConfig& c) { c.sequence_frames = -2; });
  expect_invalid([](GenConfig& c) { c.sequence_kind = "orbit"; });
  expect_invalid([](GenConfig& c) { c.sequence_step_deg = 0.0; });
  expect_invalid([](GenConfig& c) { c.shape_overrides["albedo"] = {0, 1}; });
  expect_invalid([](GenConfig& c) { c.shape_overrides["deform"] = {5, 2}; });
}

TEST(GenConfigTest, ShapeOverridesPinSampledParameters) {
  GenConfig cfg;
  cfg.shape_overrides["roughness"] = {0.0, 0.0};
  cfg.shape_overrides["deform"] = {4.0, 4.0};
  cfg.shape_overrides["crater_count"] = {5.0, 5.0};
  cfg.shape_overrides["crater_depth"] = {0.3, 0.3};
  cfg.shape_overrides["scale"] = {1.5, 1.5};
  cfg.validate();
  Rng rng(3);
  for (int i = 0; i < 8; ++i) {
    const ShapeParams p = sample_shape(rng, cfg);
    EXPECT_DOUBLE_EQ(p.roughness, 0.0);
    EXPECT_DOUBLE_EQ(p.deform, 4.0);
    EXPECT_EQ(p.crater_count, 5);
    EXPECT_DOUBLE_EQ(p.crater_depth, 0.3);
    EXPECT_DOUBLE_EQ(p.scale.x(), 1.5);
    EXPECT_DOUBLE_EQ(p.scale.y(), 1.5);
    EXPECT_DOUBLE_EQ(p.scale.z(), 1.5);
    EXPECT_NO_THROW(p.validate());
  }
}

TEST(GenConfigTest, OverrideRangesAreSampledWithin) {
  GenConfig cfg;
  cfg.shape_overrides["roughness"] = {2.0, 3.0};
  cfg.shape_overrides["rocks_large"] = {1.0, 4.0};
  cfg.validate();
  Rng rng(5);
  bool roughness_varies = false;
  double first = -1.0;
  for (int i = 0; i < 16; ++i) {
    const ShapeParams p = sample_shape(rng, cfg);
    EXPECT_GE(p.roughness, 2.0);
    EXPECT_LE(p.roughness, 3.0);
    EXPECT_GE(p.rocks_large, 1);
    EXPECT_LE(p.rocks_large, 4);
    if (i == 0) first = p.roughness;
    roughness_varies = roughness_varies || p.roughness != first;
  }
  EXPECT_TRUE(roughness_varies);
}

// ---- generation -------------------------------------------------------------

TEST(GenerateTest, WritesEveryArtifactWithExactSplitCounts) {
  const std::string& dir = TinyDataset();
  ASSERT_TRUE(fs::exists(dir + "/manifest.jsonl"));

  int pngs = 0, pfms = 0;
  for (const auto& entry : fs::directory_iterator(dir + "/images")) {
    const std::string ext = entry.path().extension().string();
    pngs += ext == ".png";
    pfms += ext == ".pfm";
  }
  EXPECT_EQ(pngs, 12);  // 2 shapes x 3 pairs x 2 frames
  EXPECT_EQ(pfms, 12);

  const auto records = load_pair_manifest(dir + "/manifest.jsonl");
  ASSERT_EQ(records.size(), 6u);
  int train = 0, val = 0, test = 0;
  std::set<int> pair_ids;
  for (const PairRecord& rec : records) {
    train += rec.split == "train";
    val += rec.split == "val";
    test += rec.split == "test";
    pair_ids.insert(rec.pair);
    EXPECT_EQ(rec.cam.width, 64);
    EXPECT_EQ(rec.cam.height, 64);
    EXPECT_TRUE(fs::exists(dir + "/" + rec.image_a));
    EXPECT_TRUE(fs::exists(dir + "/" + rec.depth_a));
    EXPECT_TRUE(fs::exists(dir + "/" + rec.image_b));
    EXPECT_TRUE(fs::exists(dir + "/" + rec.depth_b));
    EXPECT_NEAR(rec.sun_a.norm(), 1.0, 1e-12);
    EXPECT_NEAR(rec.sun_b.norm(), 1.0, 1e-12);
  }
  // llround(0.2 * 6) = 1 for each held-out split.
  EXPECT_EQ(val, 1);
  EXPECT_EQ(test, 1);
  EXPECT_EQ(train, 4);
  EXPECT_EQ(pair_ids.size(), 6u);  // ids are unique and cover every pair
}

TEST(GenerateTest, RelativeRotationMatchesTheRecordedMagnitude) {
  const auto records = load_pair_manifest(TinyDataset() + "/manifest.jsonl");
  for (const PairRecord& rec : records) {
    EXPECT_GE(rec.rotation_deg, 8.0);
    EXPECT_LE(rec.rotation_deg, 15.0);
    // The camera is fixed, so the relative camera-frame rotation is a
    // conjugate of the asteroid's spin and keeps its angle.
    const double angle =
        rec.pose_ab().rotation.angle_to(Rotation3());
    EXPECT_NEAR(angle, deg2rad(rec.rotation_deg), 1e-9);
  }
}

TEST(GenerateTest, SameSeedIsByteIdenticalDifferentSeedIsNot) {
  GenConfig cfg = TinyConfig();
  cfg.shapes = 1;
  cfg.pairs_per_shape = 2;
  cfg.sequence_frames = 0;
  const std::string a = ::testing::TempDir() + "coffee_det_a";
  const std::string b = ::testing::TempDir() + "coffee_det_b";
  const std::string c = ::testing::TempDir() + "coffee_det_c";
  for (const auto& d : {a, b, c}) fs::remove_all(d);
  generate_dataset(a, cfg);
  generate_dataset(b, cfg);
  cfg.seed = 12;
  generate_dataset(c, cfg);

  EXPECT_EQ(read_file(a + "/manifest.jsonl"), read_file(b + "/manifest.jsonl"));
  EXPECT_NE(read_file(a + "/manifest.jsonl"), read_file(c + "/manifest.jsonl"));
  const auto recs = load_pair_manifest(a + "/manifest.jsonl");
  for (const PairRecord& rec : recs) {
    EXPECT_EQ(read_file(a + "/" + rec.image_a),
              read_file(b + "/" + rec.image_a));
    EXPECT_EQ(read_file(a + "/" + rec.depth_a),
              read_file(b + "/" + rec.depth_a));
  }
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(GenerateTest, RecordsRoundTripThroughJsonExactly) {
  const auto records = load_pair_manifest(TinyDataset() + "/manifest.jsonl");
  for (const PairRecord& rec : records) {
    const PairRecord back =
        coffee::pair_record_from_json(coffee::pair_record_json(rec));
    EXPECT_EQ(back.pair, rec.pair);
    EXPECT_EQ(back.shape, rec.shape);
    EXPECT_EQ(back.shape_seed, rec.shape_seed);
    EXPECT_EQ(back.split, rec.split);
    EXPECT_EQ(back.image_a, rec.image_a);
    EXPECT_EQ(back.depth_b, rec.depth_b);
    EXPECT_DOUBLE_EQ(back.rotation_deg, rec.rotation_deg);
    EXPECT_DOUBLE_EQ(
        (back.pose_a.translation - rec.pose_a.translation).norm(), 0.0);
    EXPECT_DOUBLE_EQ(back.pose_b.rotation.angle_to(rec.pose_b.rotation), 0.0);
    EXPECT_DOUBLE_EQ((back.sun_a - rec.sun_a).norm(), 0.0);
  }
}

TEST(GenerateTest, LoadedFramesPassValidationAndSeeTheAsteroid) {
  const std::string& dir = TinyDataset();
  const auto records = load_pair_manifest(dir + "/manifest.jsonl");
  const SceneFrame frame = load_pair_frame(dir, records.front(), false);
  EXPECT_EQ(frame.image.width, 64);
  EXPECT_EQ(frame.depth.height, 64);
  EXPECT_EQ(frame.frame_index, 0);
  double lit = 0.0, hit = 0.0;
  for (const double v : frame.image.pixels) lit += v > 0.01;
  for (const double v : frame.depth.pixels) hit += v > 0.0;
  EXPECT_GT(lit, 50.0);  // the asteroid occupies a real part of the frame
  EXPECT_GT(hit, lit * 0.9);  // lit pixels sit on geometry
  const SceneFrame second = load_pair_frame(dir, records.front(), true);
  EXPECT_EQ(second.frame_index, 1);
  EXPECT_NE(frame.image.pixels, second.image.pixels);
}

// ---- benchmark sequences ----------------------------------------------------

TEST(SequenceTest, SingleAxisSequenceStepsUniformly) {
  const std::string& dir = TinyDataset();
  const std::string manifest = dir + "/sequence/manifest.jsonl";
  ASSERT_TRUE(fs::exists(manifest));
  const auto frames = load_sequence_manifest(manifest);
  ASSERT_EQ(frames.size(), 4u);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const SequenceFrameRecord& rec = frames[i];
    EXPECT_EQ(rec.frame, int(i));
    EXPECT_DOUBLE_EQ(rec.time_s, double(i));
    // Paths are relative to the sequence directory itself.
    EXPECT_TRUE(fs::exists(dir + "/sequence/" + rec.image));
    EXPECT_TRUE(fs::exists(dir + "/sequence/" + rec.depth));
    if (i > 0) {
      const double step = frames[i].pose.rotation.angle_to(
          frames[i - 1].pose.rotation);
      EXPECT_NEAR(step, deg2rad(3.0), 1e-9);
    }
  }
  const SceneFrame f = load_sequence_frame(dir + "/sequence", frames[2]);
  EXPECT_EQ(f.frame_index, 2);
  EXPECT_EQ(f.image.width, 64);
}

TEST(SequenceTest, TumblingSequenceRotatesWithoutAFixedAxis) {
  GenConfig cfg = TinyConfig();
  cfg.shapes = 1;
  cfg.pairs_per_shape = 1;
  cfg.sequence_frames = 6;
  cfg.sequence_kind = "tumbling";
  cfg.sequence_step_deg = 5.0;
  const std::string dir = ::testing::TempDir() + "coffee_tumble_dataset";
  fs::remove_all(dir);
  generate_dataset(dir, cfg);
  const auto frames = load_sequence_manifest(dir + "/sequence/manifest.jsonl");
  ASSERT_EQ(frames.size(), 6u);
  std::vector<Vec3> axes;
  for (std::size_t i = 1; i < frames.size(); ++i) {
    const Rotation3 rel = frames[i].pose.rotation *
                          frames[i - 1].pose.rotation.inverse();
    const double angle = rel.angle_to(Rotation3());
    EXPECT_GT(angle, 1e-4);  // the body keeps spinning
    EXPECT_LT(angle, 0.5);   // but a single step stays small
    axes.push_back(rel.log().normalized());
  }
  // Torque-free tumbling about the intermediate axis precesses: the
  // instantaneous rotation axis must drift between steps.
  double max_axis_drift = 0.0;
  for (std::size_t i = 1; i < axes.size(); ++i)
    max_axis_drift = std::max(max_axis_drift,
                              std::acos(std::clamp(axes[i].dot(axes[0]),
                                                   -1.0, 1.0)));
  EXPECT_GT(max_axis_drift, 1e-6);
  fs::remove_all(dir);
}

TEST(SequenceTest, FailedGenerationCleansUpEverything) {
  GenConfig cfg = TinyConfig();
  cfg.shapes = 1;
  cfg.pairs_per_shape = 1;
  const std::string dir = ::testing::TempDir() + "coffee_blocked_dataset";
  fs::remove_all(dir);
  fs::create_directories(dir);
  // A regular file where the sequence directory must go makes the
  // sequence stage fail after the pair images are already on disk.
  std::ofstream(dir + "/sequence").put('x');
  EXPECT_THROW(generate_dataset(dir, cfg), IoError);
  EXPECT_FALSE(fs::exists(dir + "/manifest.jsonl"));
  if (fs::exists(dir + "/images"))
    EXPECT_TRUE(fs::is_empty(dir + "/images"));
  fs::remove_all(dir);
}

TEST(SequenceTest, UnreachableTargetDirectoryIsAnIoError) {
  GenConfig cfg = TinyConfig();
  cfg.shapes = 1;
  cfg.pairs_per_shape = 1;
  cfg.sequence_frames = 0;
  EXPECT_THROW(generate_dataset("/proc/nope/dataset", cfg), IoError);
}

// ---- training pairs from disk -----------------------------------------------

TEST(TrainingPairTest, CloseRotationsYieldTransferableTruth) {
  const std::string& dir = TinyDataset();
  const auto records = load_pair_manifest(dir + "/manifest.jsonl");
  int usable = 0;
  long truth_total = 0;
  for (const PairRecord& rec : records) {
    const auto pair = coffee::make_training_pair(
        dir, rec, {}, coffee::DetectorKind::kIntensityEdge);
    if (!pair) continue;
    ++usable;
    EXPECT_NO_THROW(pair->validate());
    EXPECT_EQ(pair->width, 64);
    EXPECT_EQ(pair->height, 64);
    EXPECT_EQ(pair->truth.match.rows(), int(pair->kps_a.size()));
    EXPECT_EQ(pair->truth.match.cols(), int(pair->kps_b.size()));
    truth_total += pair->truth.match.sum();
  }
  EXPECT_GE(usable, 4);       // most tiny pairs detect on both frames
  EXPECT_GT(truth_total, 0);  // and some keypoints survive the rotation
}

// ---- match visualization ----------------------------------------------------

TEST(AnnotateTest, ComposesSideBySideWithMarksAndLines) {
  Image a(32, 24), b(40, 24);
  coffee::KeypointSet ka, kb;
  ka.points.push_back(Vec2(5, 6));
  ka.shadow_lengths.push_back(2.0);
  kb.points.push_back(Vec2(10, 12));
  kb.shadow_lengths.push_back(3.0);
  const Image canvas =
      coffee::annotate_matches(a, b, ka, kb, {{0, 0}});
  EXPECT_EQ(canvas.width, 72);
  EXPECT_EQ(canvas.height, 24);
  EXPECT_DOUBLE_EQ(canvas.at(5 + 2, 6 + 2), 1.0);   // box corner, left frame
  EXPECT_DOUBLE_EQ(canvas.at(32 + 10, 12 + 2), 1.0);  // box edge, right frame
  // The match line passes through both endpoints.
  EXPECT_DOUBLE_EQ(canvas.at(5, 6), 1.0);
  EXPECT_DOUBLE_EQ(canvas.at(32 + 10, 12), 1.0);
}

TEST(AnnotateTest, MalformedInputsAreRejected) {
  Image a(32, 24), b(32, 30);
  coffee::KeypointSet ka, kb;
  EXPECT_THROW(coffee::annotate_matches(a, b, ka, kb, {}), ValidationError);
  Image c(32, 24);
  EXPECT_THROW(coffee::annotate_matches(a, c, ka, kb, {{0, 0}}),
               ValidationError);
}

}  // namespace
