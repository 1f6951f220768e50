#pragma once

// Procedurally sampled asteroid datasets on disk: rendered frame pairs with
// ground-truth poses for training and evaluation, benchmark rotation
// sequences (torque-free tumbling or single-axis), and the JSONL manifests
// that make every artifact reloadable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "coffee/bvh.hpp"
#include "coffee/renderer.hpp"
#include "coffee/shapegen.hpp"
#include "coffee/training.hpp"
#include "coffee/tumble.hpp"

namespace coffee {

// ---- generation configuration -----------------------------------------------

struct GenConfig {
  int shapes = 2;
  int pairs_per_shape = 5;
  int image_size = 512;
  double vfov_deg = 30.0;
  double rotation_deg_min = 10.0;  // relative rotation magnitude per pair
  double rotation_deg_max = 20.0;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  int sequence_frames = 0;  // 0 disables the benchmark sequence
  std::string sequence_kind = "tumbling";  // "tumbling" | "single_axis"
  double sequence_step_deg = 3.0;          // rotation per sequence frame
  std::uint64_t seed = 7;
  // Per-knob [lo, hi] overrides replacing the default shape sampling
  // distributions; an equal pair pins the knob to a constant.
  std::map<std::string, std::pair<double, double>> shape_overrides;

  void validate() const {
    if (shapes < 1 || pairs_per_shape < 1)
      throw ValidationError("GenConfig: need at least one shape and pair");
    if (image_size < 16)
      throw ValidationError("GenConfig: image_size must be at least 16");
    if (!(vfov_deg > 0.0 && vfov_deg < 180.0))
      throw ValidationError("GenConfig: vfov_deg outside (0, 180)");
    if (!(rotation_deg_min > 0.0 && rotation_deg_max >= rotation_deg_min))
      throw ValidationError("GenConfig: bad rotation magnitude range");
    if (!(val_fraction >= 0.0 && test_fraction >= 0.0 &&
          val_fraction + test_fraction <= 0.9))
      throw ValidationError(
          "GenConfig: split fractions must be non-negative and leave "
          "at least 10% for training");
    if (sequence_frames < 0 || sequence_frames == 1)
      throw ValidationError(
          "GenConfig: sequence_frames must be 0 (off) or at least 2");
    if (sequence_kind != "tumbling" && sequence_kind != "single_axis")
      throw ValidationError("GenConfig: unknown sequence_kind '" +
                            sequence_kind + "'");
    if (!(sequence_step_deg > 0.0))
      throw ValidationError("GenConfig: sequence_step_deg must be positive");
    for (const auto& [knob, range] : shape_overrides) {
      if (!shape_override_known(knob))
        throw ValidationError("GenConfig: unknown shape knob '" + knob + "'");
      if (!(range.second >= range.first))
        throw ValidationError("GenConfig: empty range for shape knob '" +
                              knob + "'");
    }
  }

  static bool shape_override_known(const std::string& knob) {
    static const char* knobs[] = {
        "roughness",   "scale",           "deform",
        "crater_depth", "crater_count",   "rocks_large",
        "rocks_medium", "rocks_small",    "rock_size_large",
        "rock_size_medium", "rock_size_small"};
    for (const char* k : knobs)
      if (knob == k) return true;
    return false;
  }
};

// Draws a shape from the default distributions, then resamples any
// overridden knob uniformly in its configured range (sorted knob order, so
// the stream of random draws is reproducible).
inline ShapeParams sample_shape(Rng& rng, const GenConfig& cfg) {
  ShapeParams p = ShapeParams::sample(rng);
  for (const auto& [knob, range] : cfg.shape_overrides) {
    const double v = rng.uniform(range.first, range.second);
    if (knob == "roughness") p.roughness = v;
    else if (knob == "scale")
      p.scale = Vec3(v, rng.uniform(range.first, range.second),
                     rng.uniform(range.first, range.second));
    else if (knob == "deform") p.deform = v;
    else if (knob == "crater_depth") p.crater_depth = v;
    else if (knob == "crater_count")
      p.crater_count = static_cast<int>(std::llround(v));
    else if (knob == "rocks_large")
      p.rocks_large = static_cast<int>(std::llround(v));
    else if (knob == "rocks_medium")
      p.rocks_medium = static_cast<int>(std::llround(v));
    else if (knob == "rocks_small")
      p.rocks_small = static_cast<int>(std::llround(v));
    else if (knob == "rock_size_large") p.rock_size_large = v;
    else if (knob == "rock_size_medium") p.rock_size_medium = v;
    else if (knob == "rock_size_small") p.rock_size_small = v;
  }
  p.validate();
  return p;
}

// ---- manifest records -------------------------------------------------------

struct PairRecord {
  int pair = 0;
  int shape = 0;
  std::uint64_t shape_seed = 0;
  std::string split;  // "train" | "val" | "test"
  CameraModel cam;
  std::string image_a, depth_a, image_b, depth_b;  // dataset-relative paths
  RigidTransform pose_a, pose_b;  // asteroid frame -> camera frame
  Vec3 sun_a = Vec3(0, 0, 1), sun_b = Vec3(0, 0, 1);  // camera-frame sun
  double rotation_deg = 0.0;  // relative rotation magnitude

  RigidTransform pose_ab() const { return pose_b.compose(pose_a.inverse()); }
};

struct SequenceFrameRecord {
  int frame = 0;
  double time_s = 0.0;
  CameraModel cam;
  std::string image, depth;  // dataset-relative paths
  RigidTransform pose;       // asteroid frame -> camera frame
  Vec3 sun = Vec3(0, 0, 1);  // camera-frame sun propagation
};

namespace detail {

inline nlohmann::ordered_json camera_json(const CameraModel& cam) {
  return {{"fx", cam.fx}, {"fy", cam.fy},         {"cx", cam.cx},
          {"cy", cam.cy}, {"width", cam.width},   {"height", cam.height}};
}

inline CameraModel camera_from_json(const nlohmann::json& j) {
  return CameraModel(j.at("fx").get<double>(), j.at("fy").get<double>(),
                     j.at("cx").get<double>(), j.at("cy").get<double>(),
                     j.at("width").get<int>(), j.at("height").get<int>());
}

inline nlohmann::ordered_json rigid_json(const RigidTransform& p) {
  const Eigen::Quaterniond& q = p.rotation.quat();
  return {{"q", {q.w(), q.x(), q.y(), q.z()}},
          {"t", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

inline RigidTransform rigid_from_json(const nlohmann::json& j) {
  const auto& q = j.at("q");
  const auto& t = j.at("t");
  RigidTransform p;
  p.rotation = Rotation3(q.at(0).get<double>(), q.at(1).get<double>(),
                         q.at(2).get<double>(), q.at(3).get<double>());
  p.translation = Vec3(t.at(0).get<double>(), t.at(1).get<double>(),
                       t.at(2).get<double>());
  return p;
}

inline nlohmann::ordered_json vec3_json(const Vec3& v) {
  return {v.x(), v.y(), v.z()};
}

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  return Vec3(j.at(0).get<double>(), j.at(1).get<double>(),
              j.at(2).get<double>());
}

}  // namespace detail

inline nlohmann::ordered_json pair_record_json(const PairRecord& r) {
  nlohmann::ordered_json j;
  j["pair"] = r.pair;
  j["shape"] = r.shape;
  j["shape_seed"] = r.shape_seed;
  j["split"] = r.split;
  j["camera"] = detail::camera_json(r.cam);
  j["image_a"] = r.image_a;
  j["depth_a"] = r.depth_a;
  j["image_b"] = r.image_b;
  j["depth_b"] = r.depth_b;
  j["pose_a"] = detail::rigid_json(r.pose_a);
  j["pose_b"] = detail::rigid_json(r.pose_b);
  j["sun_a"] = detail::vec3_json(r.sun_a);
  j["sun_b"] = detail::vec3_json(r.sun_b);
  j["rotation_deg"] = r.rotation_deg;
  return j;
}

inline PairRecord pair_record_from_json(const nlohmann::json& j) {
  PairRecord r;
  r.pair = j.at("pair").get<int>();
  r.shape = j.at("shape").get<int>();
  r.shape_seed = j.at("shape_seed").get<std::uint64_t>();
  r.split = j.at("split").get<std::string>();
  r.cam = detail::camera_from_json(j.at("camera"));
  r.image_a = j.at("image_a").get<std::string>();
  r.depth_a = j.at("depth_a").get<std::string>();
  r.image_b = j.at("image_b").get<std::string>();
  r.depth_b = j.at("depth_b").get<std::string>();
  r.pose_a = detail::rigid_from_json(j.at("pose_a"));
  r.pose_b = detail::rigid_from_json(j.at("pose_b"));
  r.sun_a = detail::vec3_from_json(j.at("sun_a"));
  r.sun_b = detail::vec3_from_json(j.at("sun_b"));
  r.rotation_deg = j.at("rotation_deg").get<double>();
  return r;
}

inline nlohmann::ordered_json sequence_record_json(
    const SequenceFrameRecord& r) {
  nlohmann::ordered_json j;
  j["frame"] = r.frame;
  j["time_s"] = r.time_s;
  j["camera"] = detail::camera_json(r.cam);
  j["image"] = r.image;
  j["depth"] = r.depth;
  j["pose"] = detail::rigid_json(r.pose);
  j["sun"] = detail::vec3_json(r.sun);
  return j;
}

inline SequenceFrameRecord sequence_record_from_json(const nlohmann::json& j) {
  SequenceFrameRecord r;
  r.frame = j.at("frame").get<int>();
  r.time_s = j.at("time_s").get<double>();
  r.cam = detail::camera_from_json(j.at("camera"));
  r.image = j.at("image").get<std::string>();
  r.depth = j.at("depth").get<std::string>();
  r.pose = detail::rigid_from_json(j.at("pose"));
  r.sun = detail::vec3_from_json(j.at("sun"));
  return r;
}

namespace detail {

template <typename Record, typename Parser>
std::vector<Record> load_jsonl(const std::string& path, Parser parse) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path);
  std::vector<Record> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw IoError("manifest: malformed JSON at " + path + ":" +
                    std::to_string(line_no));
    try {
      out.push_back(parse(j));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest: bad record at " + path + ":" +
                    std::to_string(line_no) + " (" + e.what() + ")");
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<PairRecord> load_pair_manifest(const std::string& path) {
  return detail::load_jsonl<PairRecord>(path, pair_record_from_json);
}

inline std::vector<SequenceFrameRecord> load_sequence_manifest(
    const std::string& path) {
  return detail::load_jsonl<SequenceFrameRecord>(path,
                                                 sequence_record_from_json);
}

// ---- frame loading ----------------------------------------------------------

inline SceneFrame load_frame(const std::string& root,
                             const std::string& image_rel,
                             const std::string& depth_rel,
                             const RigidTransform& pose, const Vec3& sun_c,
                             int frame_index) {
  SceneFrame f;
  f.image = load_png(root + "/" + image_rel);
  f.depth = load_pfm(root + "/" + depth_rel);
  f.pose = pose;
  f.sun_c = sun_c;
  f.frame_index = frame_index;
  f.validate();
  return f;
}

inline SceneFrame load_pair_frame(const std::string& root,
                                  const PairRecord& rec, bool second) {
  return second ? load_frame(root, rec.image_b, rec.depth_b, rec.pose_b,
                             rec.sun_b, 1)
                : load_frame(root, rec.image_a, rec.depth_a, rec.pose_a,
                             rec.sun_a, 0);
}

inline SceneFrame load_sequence_frame(const std::string& root,
                                      const SequenceFrameRecord& rec) {
  return load_frame(root, rec.image, rec.depth, rec.pose, rec.sun, rec.frame);
}

// ---- dataset generation -----------------------------------------------------

// Renders the configured dataset into `dir`: frame pairs with random
// relative rotations under images/, a pair manifest, and (when configured)
// a benchmark rotation sequence under sequence/.  On an I/O failure every
// file written so far is removed before the error propagates, so a partial
// dataset never survives.
inline void generate_dataset(const std::string& dir, const GenConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::vector<std::string> written;
  const auto emit_png = [&](const Image& img, const std::string& path) {
    save_png(img, path);
    written.push_back(path);
  };
  const auto emit_pfm = [&](const Image& img, const std::string& path) {
    save_pfm(img, path);
    written.push_back(path);
  };
  const auto emit_text = [&](const std::string& text,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("generate_dataset: cannot open " + path);
    out << text;
    if (!out) throw IoError("generate_dataset: write failed for " + path);
    written.push_back(path);
  };

  try {
    std::error_code ec;
    fs::create_directories(dir + "/images", ec);
    if (ec)
      throw IoError("generate_dataset: cannot create " + dir + "/images");

    const CameraModel cam = CameraModel::from_vfov(
        cfg.image_size, cfg.image_size, deg2rad(cfg.vfov_deg));
    Rng rng(cfg.seed);

    // Exact split counts, deterministically shuffled over the pair indices.
    const int total = cfg.shapes * cfg.pairs_per_shape;
    const int n_val = static_cast<int>(std::llround(total * cfg.val_fraction));
    const int n_test =
        static_cast<int>(std::llround(total * cfg.test_fraction));
    std::vector<std::string> split(total, "train");
    for (int i = 0; i < n_val; ++i) split[i] = "val";
    for (int i = n_val; i < n_val + n_test; ++i) split[i] = "test";
    rng.shuffle(split);

    const auto random_unit = [&rng] {
      Vec3 v;
      do {
        v = Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian());
      } while (v.norm() < 1e-9);
      return Vec3(v.normalized());
    };
    const auto sample_sun = [&rng] {
      // Propagation direction within ~67 deg of the viewing axis, so the
      // visible face is always lit.
      const double az = deg2rad(rng.uniform(-60.0, 60.0));
      const double el = deg2rad(rng.uniform(-30.0, 30.0));
      return Vec3(Rotation3::from_axis_angle(Vec3(0, 1, 0), az)
                      .apply(Rotation3::from_axis_angle(Vec3(1, 0, 0), el)
                                 .apply(Vec3(0, 0, 1))));
    };

    std::ostringstream manifest;
    int pair_id = 0;
    for (int s = 0; s < cfg.shapes; ++s) {
      const ShapeParams params = sample_shape(rng, cfg);
      const TriMesh mesh = generate_shape(params);
      const Bvh bvh(mesh);
      const double dist =
          mesh.bounding_radius() / std::tan(deg2rad(10.0));
      for (int k = 0; k < cfg.pairs_per_shape; ++k, ++pair_id) {
        const Rotation3 base = Rotation3::random(rng);
        const double angle_deg =
            rng.uniform(cfg.rotation_deg_min, cfg.rotation_deg_max);
        const Rotation3 rel =
            Rotation3::from_axis_angle(random_unit(), deg2rad(angle_deg));

        Scene scene;
        scene.mesh = &mesh;
        scene.camera_pose.translation = Vec3(0, 0, -dist);
        scene.sun_dir_inertial = sample_sun();
        scene.asteroid_pose.rotation = base;
        const SceneFrame frame_a = render(scene, cam, bvh, 0);
        scene.asteroid_pose.rotation = rel * base;
        const SceneFrame frame_b = render(scene, cam, bvh, 1);

        char stem[32];
        std::snprintf(stem, sizeof(stem), "images/pair_%05d", pair_id);
        PairRecord rec;
        rec.pair = pair_id;
        rec.shape = s;
        rec.shape_seed = params.seed;
        rec.split = split[pair_id];
        rec.cam = cam;
        rec.image_a = std::string(stem) + "_a.png";
        rec.depth_a = std::string(stem) + "_a.pfm";
        rec.image_b = std::string(stem) + "_b.png";
        rec.depth_b = std::string(stem) + "_b.pfm";
        rec.pose_a = frame_a.pose;
        rec.pose_b = frame_b.pose;
        rec.sun_a = frame_a.sun_c;
        rec.sun_b = frame_b.sun_c;
        rec.rotation_deg = angle_deg;

        emit_png(frame_a.image, dir + "/" + rec.image_a);
        emit_pfm(frame_a.depth, dir + "/" + rec.depth_a);
        emit_png(frame_b.image, dir + "/" + rec.image_b);
        emit_pfm(frame_b.depth, dir + "/" + rec.depth_b);
        manifest << pair_record_json(rec).dump() << '\n';
      }
    }
    emit_text(manifest.str(), dir + "/manifest.jsonl");

    if (cfg.sequence_frames >= 2) {
      fs::create_directories(dir + "/sequence", ec);
      if (ec)
        throw IoError("generate_dataset: cannot create " + dir +
                      "/sequence");
      const ShapeParams params = sample_shape(rng, cfg);
      const TriMesh mesh = generate_shape(params);
      const Bvh bvh(mesh);
      const double dist =
          mesh.bounding_radius() / std::tan(deg2rad(10.0));
      const Vec3 sun = sample_sun();

      std::vector<Rotation3> orientations;
      if (cfg.sequence_kind == "single_axis") {
        for (int i = 0; i < cfg.sequence_frames; ++i)
          orientations.push_back(Rotation3::from_axis_angle(
              Vec3(0, 1, 0), deg2rad(cfg.sequence_step_deg * i)));
      } else {
        // Torque-free tumbling: spin mostly about the intermediate
        // principal axis (the unstable one), one second per frame, rate
        // scaled to the configured step.  The mesh frame is treated as the
        // principal frame; the moments come from the actual mass
        // distribution and are nudged apart if degenerate.
        Vec3 moments;
        Mat3 axes;
        principal_inertia(mesh, moments, axes);
        moments = moments.cwiseMax(1e-9);
        if (moments.y() <= moments.x()) moments.y() = moments.x() * 1.01;
        if (moments.z() <= moments.y()) moments.z() = moments.y() * 1.01;
        TumbleState state;
        state.inertia = moments;
        state.orientation = Rotation3::random(rng);
        state.omega = deg2rad(cfg.sequence_step_deg) *
                      Vec3(0.15, 1.0, 0.08).normalized();
        for (const TumbleState& st :
             integrate_tumble(state, 1.0, cfg.sequence_frames - 1))
          orientations.push_back(st.orientation);
      }

      std::ostringstream seq_manifest;
      for (int i = 0; i < cfg.sequence_frames; ++i) {
        Scene scene;
        scene.mesh = &mesh;
        scene.camera_pose.translation = Vec3(0, 0, -dist);
        scene.sun_dir_inertial = sun;
        scene.asteroid_pose.rotation = orientations[i];
        const SceneFrame frame = render(scene, cam, bvh, i);

        // Paths are relative to the sequence directory, so the directory is
        // self-contained: a tracker needs only the manifest path.
        char stem[32];
        std::snprintf(stem, sizeof(stem), "frame_%04d", i);
        SequenceFrameRecord rec;
        rec.frame = i;
        rec.time_s = double(i);
        rec.cam = cam;
        rec.image = std::string(stem) + ".png";
        rec.depth = std::string(stem) + ".pfm";
        rec.pose = frame.pose;
        rec.sun = frame.sun_c;

        emit_png(frame.image, dir + "/sequence/" + rec.image);
        emit_pfm(frame.depth, dir + "/sequence/" + rec.depth);
        seq_manifest << sequence_record_json(rec).dump() << '\n';
      }
      emit_text(seq_manifest.str(), dir + "/sequence/manifest.jsonl");
    }
  } catch (const IoError&) {
    std::error_code ec;
    for (const std::string& path : written) fs::remove(path, ec);
    throw;
  }
}

// ---- training-pair assembly -------------------------------------------------

// Detects keypoints in both frames of a stored pair and assembles the
// geometric-truth training sample; empty detections on either side yield
// nullopt (the pair carries no supervision).
inline std::optional<TrainingPair> make_training_pair(
    const std::string& root, const PairRecord& rec,
    const DetectorOptions& options = {},
    DetectorKind kind = DetectorKind::kShadowScan, int threads = 1) {
  const SceneFrame frame_a = load_pair_frame(root, rec, false);
  const SceneFrame frame_b = load_pair_frame(root, rec, true);
  TrainingPair pair;
  if (kind == DetectorKind::kShadowScan) {
    pair.kps_a = detect(frame_a, rec.cam, options, threads);
    pair.kps_b = detect(frame_b, rec.cam, options, threads);
  } else {
    pair.kps_a = baseline_detect(frame_a.image, rec.cam, options,
                                 &frame_a.depth, 0, threads);
    pair.kps_b = baseline_detect(frame_b.image, rec.cam, options,
                                 &frame_b.depth, 1, threads);
  }
  if (pair.kps_a.size() == 0 || pair.kps_b.size() == 0) return std::nullopt;
  pair.truth = build_truth(pair.kps_a, pair.kps_b, frame_a.depth,
                           frame_b.depth, rec.pose_ab(), rec.cam);
  pair.width = rec.cam.width;
  pair.height = rec.cam.height;
  return pair;
}

// ---- match visualization ----------------------------------------------------

namespace detail {

inline void draw_square(Image& img, int cx, int cy, int radius,
                        double value) {
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (std::max(std::abs(dx), std::abs(dy)) != radius) continue;
      const int x = cx + dx, y = cy + dy;
      if (img.in_bounds(x, y)) img.at(x, y) = value;
    }
}

inline void draw_line(Image& img, int x0, int y0, int x1, int y1,
                      double value) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    if (img.in_bounds(x0, y0)) img.at(x0, y0) = value;
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

// Side-by-side composite of a frame pair with keypoints boxed and matches
// drawn as lines from the left image into the right one.
inline Image annotate_matches(const Image& a, const Image& b,
                              const KeypointSet& kps_a,
                              const KeypointSet& kps_b,
                              const std::vector<std::pair<int, int>>& matches) {
  if (a.height != b.height)
    throw ValidationError("annotate_matches: frame heights differ");
  Image canvas(a.width + b.width, a.height);
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) canvas.at(x, y) = a.at(x, y);
    for (int x = 0; x < b.width; ++x) canvas.at(a.width + x, y) = b.at(x, y);
  }
  for (const Vec2& p : kps_a.points)
    detail::draw_square(canvas, int(std::lround(p.x())),
                        int(std::lround(p.y())), 2, 1.0);
  for (const Vec2& p : kps_b.points)
    detail::draw_square(canvas, a.width + int(std::lround(p.x())),
                        int(std::lround(p.y())), 2, 1.0);
  for (const auto& [i, j] : matches) {
    if (i < 0 || i >= int(kps_a.size()) || j < 0 || j >= int(kps_b.size()))
      throw ValidationError("annotate_matches: match index out of range");
    detail::draw_line(canvas, int(std::lround(kps_a.points[i].x())),
                      int(std::lround(kps_a.points[i].y())),
                      a.width + int(std::lround(kps_b.points[j].x())),
                      int(std::lround(kps_b.points[j].y())), 1.0);
  }
  return canvas;
}

}  // namespace coffee
