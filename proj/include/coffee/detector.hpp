#pragma once

// Shadow-edge keypoint detection. The image is scanned along the ray family
// that converges to the sun's vanishing point; a derivative-of-Gaussian edge
// filter localizes negative (lit-to-shadow) edges, and each keypoint carries
// the arc distance to the shadow terminus (the next positive edge) as its
// scalar feature. An omnidirectional intensity-edge detector built from the
// same machinery serves as the comparison baseline.

#include "coffee/geom.hpp"
#include "coffee/renderer.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

namespace coffee {

struct DetectorOptions {
  double sigma = 1.5;            // derivative-of-Gaussian width, pixels
  double edge_threshold = 0.08;  // response magnitude gate, intensity units
  double nms_radius = 3.0;       // suppression radius across rays, pixels
  double match_gate_px = 15.0;   // cross-frame association gate

  void validate() const {
    if (!(sigma > 0.0) || !(edge_threshold > 0.0) || !(nms_radius >= 0.0) ||
        !(match_gate_px > 0.0))
      throw ValidationError("DetectorOptions: all parameters must be positive");
  }
};

struct KeypointSet {
  std::vector<Vec2> points;            // subpixel pixel coordinates
  std::vector<double> shadow_lengths;  // pixels, along the scan ray
  int frame_index = 0;

  size_t size() const { return points.size(); }

  void validate(int width, int height, double nms_radius) const {
    if (points.size() != shadow_lengths.size())
      throw ValidationError("KeypointSet: parallel lists differ in length");
    for (size_t i = 0; i < points.size(); ++i) {
      const Vec2& p = points[i];
      if (!(p.x() >= 0.0) || !(p.y() >= 0.0) || !(p.x() <= width) ||
          !(p.y() <= height))
        throw ValidationError("KeypointSet: keypoint outside image bounds");
      if (!(shadow_lengths[i] > 0.0))
        throw ValidationError("KeypointSet: non-positive shadow length");
      for (size_t j = i + 1; j < points.size(); ++j)
        if ((points[j] - p).norm() < nms_radius)
          throw ValidationError("KeypointSet: suppression radius violated");
    }
  }

  bool operator==(const KeypointSet& rhs) const {
    return frame_index == rhs.frame_index && points == rhs.points &&
           shadow_lengths == rhs.shadow_lengths;
  }
};

// Detection with per-keypoint diagnostics (terminus location and filter
// response) used by the stability harness and the tests.
struct Detection {
  KeypointSet set;
  std::vector<Vec2> termini;      // shadow end point for each keypoint
  std::vector<double> responses;  // edge-filter value at the keypoint
};

namespace detail {

// Derivative-of-Gaussian taps, normalized so a unit intensity step produces
// a peak response of exactly +1 (rising) / -1 (falling).
inline std::vector<double> dog_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double step_sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    taps[i + radius] = i * std::exp(-0.5 * i * i / (sigma * sigma));
    if (i >= 1) step_sum += taps[i + radius];
  }
  for (double& t : taps) t /= step_sum;
  return taps;
}

struct EdgeCandidate {
  Vec2 point;
  Vec2 terminus;
  double shadow_len = 0.0;
  double response = 0.0;  // signed filter value at the edge
};

// Quadratic interpolation of the extremum of three equally spaced samples;
// returns the offset from the center sample in [-0.5, 0.5].
inline double parabola_offset(double left, double center, double right) {
  const double denom = left - 2.0 * center + right;
  if (std::abs(denom) < 1e-300) return 0.0;
  return std::clamp(0.5 * (left - right) / denom, -0.5, 0.5);
}

// Scan one ray: sample the image at unit arc steps, split into runs of
// supported samples, filter each run, and emit negative edges paired with
// their shadow terminus. `both_polarities` additionally emits positive edges
// (terminated by the next negative edge) for the baseline detector. With a
// depth map the silhouette is exact and tested per sample; without one,
// support is the hull of nonzero-intensity samples along the ray, because
// cast shadows are as dark as empty space and must not break the scan.
inline void scan_one_ray(const Image& image, const Image* depth,
                         const ScanRay& ray, const std::vector<double>& taps,
                         double threshold, bool both_polarities,
                         std::vector<EdgeCandidate>& out) {
  const int radius = (static_cast<int>(taps.size()) - 1) / 2;
  const int samples = static_cast<int>(std::floor(ray.length)) + 1;
  if (samples < 2 * radius + 3) return;

  std::vector<double> value(samples);
  std::vector<char> supported(samples);
  for (int k = 0; k < samples; ++k) {
    const Vec2 p = ray.at(static_cast<double>(k));
    const int px = static_cast<int>(p.x());
    const int py = static_cast<int>(p.y());
    const bool inside = px >= 0 && px < image.width && py >= 0 &&
                        py < image.height;
    const Image& mask = depth ? *depth : image;
    supported[k] = inside && mask.at(px, py) > 0.0;
    value[k] = inside ? image.sample_bilinear(p.x(), p.y()) : 0.0;
  }
  if (!depth) {
    int first = -1, last = -1;
    for (int k = 0; k < samples; ++k) {
      if (supported[k]) {
        if (first < 0) first = k;
        last = k;
      }
    }
    for (int k = 0; k < samples; ++k)
      supported[k] = first >= 0 && k >= first && k <= last;
  }

  int run_start = 0;
  while (run_start < samples) {
    while (run_start < samples && !supported[run_start]) ++run_start;
    int run_end = run_start;
    while (run_end < samples && supported[run_end]) ++run_end;
    const int len = run_end - run_start;
    if (len >= 2 * radius + 3) {
      std::vector<double> response(len, 0.0);
      for (int j = radius; j < len - radius; ++j) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += taps[i + radius] * value[run_start + j + i];
        response[j] = acc;
      }
      const int lo = radius, hi = len - radius - 1;

      auto subpixel_arc = [&](int j) {
        return run_start + j +
               parabola_offset(response[j - 1], response[j], response[j + 1]);
      };

      auto is_edge = [&](int j, double sign) {
        return sign * response[j] > threshold &&
               sign * response[j] > sign * response[j - 1] &&
               sign * response[j] >= sign * response[j + 1];
      };
      for (int j = lo + 1; j < hi; ++j) {
        const bool neg_edge = is_edge(j, -1.0);
        const bool pos_edge = both_polarities && is_edge(j, 1.0);
        if (!neg_edge && !pos_edge) continue;
        const double sign = neg_edge ? 1.0 : -1.0;  // terminus has this sign
        // Shadow terminus: the first opposite-polarity edge further along.
        int term = -1;
        for (int j2 = j + 1; j2 < hi; ++j2) {
          if (is_edge(j2, sign)) {
            term = j2;
            break;
          }
        }
        EdgeCandidate candidate;
        const double arc = subpixel_arc(j);
        candidate.point = ray.at(arc);
        candidate.response = response[j];
        if (term >= 0) {
          const double term_arc = subpixel_arc(term);
          candidate.terminus = ray.at(term_arc);
          candidate.shadow_len = term_arc - arc;
        } else if (both_polarities) {
          // The baseline keeps every edge; without an opposite edge ahead,
          // fall back to the nearest one behind, then to the run end, so the
          // feature stays positive.
          int prev = -1;
          for (int j2 = j - 1; j2 > lo; --j2) {
            if (is_edge(j2, -sign)) {
              prev = j2;
              break;
            }
          }
          const double back_arc = prev > 0 ? subpixel_arc(prev)
                                           : static_cast<double>(run_start + lo);
          candidate.terminus = ray.at(back_arc);
          candidate.shadow_len = arc - back_arc;
        } else {
          continue;  // shadow leaves the silhouette: discard
        }
        if (candidate.shadow_len > 0.0) out.push_back(candidate);
      }
    }
    run_start = run_end;
  }
}

inline Detection detect_candidates(const Image& image, const Image* support,
                                   const std::vector<ScanRay>& rays,
                                   const DetectorOptions& options,
                                   bool both_polarities, int frame_index,
                                   int threads) {
  options.validate();
  const std::vector<double> taps = dog_kernel(options.sigma);
  std::vector<std::vector<EdgeCandidate>> per_ray(rays.size());

  auto worker = [&](std::atomic<size_t>& next) {
    for (size_t r = next.fetch_add(1); r < rays.size();
         r = next.fetch_add(1)) {
      scan_one_ray(image, support, rays[r], taps, options.edge_threshold,
                   both_polarities, per_ray[r]);
    }
  };
  std::atomic<size_t> next{0};
  if (threads <= 1) {
    worker(next);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back([&] { worker(next); });
    for (std::thread& t : pool) t.join();
  }

  // Rays are concatenated in construction order, so the candidate list is
  // identical for any worker count; suppression is a serial reduction.
  std::vector<EdgeCandidate> all;
  for (const auto& v : per_ray) all.insert(all.end(), v.begin(), v.end());
  std::vector<int> order(all.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(all[a].response) > std::abs(all[b].response);
  });

  Detection detection;
  detection.set.frame_index = frame_index;
  for (const int i : order) {
    const bool suppressed = std::any_of(
        detection.set.points.begin(), detection.set.points.end(),
        [&](const Vec2& kept) {
          return (kept - all[i].point).norm() < options.nms_radius;
        });
    if (suppressed) continue;
    detection.set.points.push_back(all[i].point);
    detection.set.shadow_lengths.push_back(all[i].shadow_len);
    detection.termini.push_back(all[i].terminus);
    detection.responses.push_back(all[i].response);
  }
  return detection;
}

// Scan families for the baseline: every row and every column, no
// sun-direction filtering.
inline std::vector<ScanRay> axis_scan_rays(const CameraModel& cam) {
  std::vector<ScanRay> rays;
  for (int j = 0; j < cam.height; ++j)
    rays.push_back(ScanRay{Vec2(0.0, j + 0.5), Vec2(1.0, 0.0),
                           static_cast<double>(cam.width)});
  for (int i = 0; i < cam.width; ++i)
    rays.push_back(ScanRay{Vec2(i + 0.5, 0.0), Vec2(0.0, 1.0),
                           static_cast<double>(cam.height)});
  return rays;
}

}  // namespace detail

// Shadow-aware detection. `depth` supplies the silhouette when available
// (rendered training data); otherwise support falls back to nonzero image
// intensity.
inline Detection detect_full(const Image& image, const Vec3& sun_c,
                             const CameraModel& cam,
                             const DetectorOptions& options = {},
                             const Image* depth = nullptr, int frame_index = 0,
                             int threads = 1) {
  if (std::abs(sun_c.norm() - 1.0) > 1e-9)
    throw ValidationError("detect: sun direction must be unit length");
  if (image.width != cam.width || image.height != cam.height)
    throw ValidationError("detect: image size does not match camera");
  const std::vector<ScanRay> rays =
      shadow_scan_directions(
      vanishing_point(SunGeometry(sun_c, Rotation3()), cam), cam);
  return detail::detect_candidates(image, depth, rays, options,
                                   /*both_polarities=*/false, frame_index,
                                   threads);
}

inline KeypointSet detect(const Image& image, const Vec3& sun_c,
                          const CameraModel& cam,
                          const DetectorOptions& options = {},
                          const Image* depth = nullptr, int frame_index = 0,
                          int threads = 1) {
  return detect_full(image, sun_c, cam, options, depth, frame_index, threads)
      .set;
}

inline Detection detect_full(const SceneFrame& frame, const CameraModel& cam,
                             const DetectorOptions& options = {},
                             int threads = 1) {
  return detect_full(frame.image, frame.sun_c, cam, options, &frame.depth,
                     frame.frame_index, threads);
}

inline KeypointSet detect(const SceneFrame& frame, const CameraModel& cam,
                          const DetectorOptions& options = {},
                          int threads = 1) {
  return detect_full(frame, cam, options, threads).set;
}

// Omnidirectional intensity-edge baseline: the same filter and suppression
// run along every row and column, keeping edges of both polarities.
inline Detection baseline_detect_full(const Image& image,
                                      const CameraModel& cam,
                                      const DetectorOptions& options = {},
                                      const Image* depth = nullptr,
                                      int frame_index = 0, int threads = 1) {
  if (image.width != cam.width || image.height != cam.height)
    throw ValidationError("baseline_detect: image size does not match camera");
  return detail::detect_candidates(image, depth, detail::axis_scan_rays(cam),
                                   options, /*both_polarities=*/true,
                                   frame_index, threads);
}

inline KeypointSet baseline_detect(const Image& image, const CameraModel& cam,
                                   const DetectorOptions& options = {},
                                   const Image* depth = nullptr,
                                   int frame_index = 0, int threads = 1) {
  return baseline_detect_full(image, cam, options, depth, frame_index, threads)
      .set;
}

enum class DetectorKind { kShadowScan, kIntensityEdge };

struct DriftStats {
  double median_keypoint_drift_px = 0.0;
  double median_terminus_drift_px = 0.0;
  double median_abs_shadow_change_px = 0.0;
  int matched_pairs = 0;
  int frames = 0;
};

namespace detail {

inline double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const size_t mid = values.size() / 2;
  if (values.size() % 2 == 1) return values[mid];
  return 0.5 * (values[mid - 1] + values[mid]);
}

}  // namespace detail

// Keypoint stability under sun motion: detect in every frame of a
// fixed-geometry sequence and associate keypoints to the first frame by
// nearest neighbor (the body does not move, so reprojection is the
// identity). Reports median keypoint drift alongside median terminus drift
// and the median shadow-length change that the sun motion induced.
inline DriftStats anchor_stability(const std::vector<SceneFrame>& frames,
                                   const CameraModel& cam,
                                   const DetectorOptions& options = {},
                                   DetectorKind kind = DetectorKind::kShadowScan,
                                   int threads = 1) {
  if (frames.size() < 2)
    throw ValidationError("anchor_stability: need at least 2 frames");

  auto run = [&](const SceneFrame& frame) {
    if (kind == DetectorKind::kShadowScan)
      return detect_full(frame, cam, options, threads);
    return baseline_detect_full(frame.image, cam, options, &frame.depth,
                                frame.frame_index, threads);
  };

  const Detection reference = run(frames[0]);
  std::vector<double> drifts, terminus_drifts, shadow_changes;
  for (size_t f = 1; f < frames.size(); ++f) {
    const Detection current = run(frames[f]);
    for (size_t i = 0; i < reference.set.points.size(); ++i) {
      int best = -1;
      double best_dist = options.match_gate_px;
      for (size_t j = 0; j < current.set.points.size(); ++j) {
        const double dist =
            (current.set.points[j] - reference.set.points[i]).norm();
        if (dist < best_dist) {
          best_dist = dist;
          best = static_cast<int>(j);
        }
      }
      if (best < 0) continue;
      drifts.push_back(best_dist);
      terminus_drifts.push_back(
          (current.termini[best] - reference.termini[i]).norm());
      shadow_changes.push_back(std::abs(current.set.shadow_lengths[best] -
                                        reference.set.shadow_lengths[i]));
    }
  }

  DriftStats stats;
  stats.frames = static_cast<int>(frames.size());
  stats.matched_pairs = static_cast<int>(drifts.size());
  stats.median_keypoint_drift_px = detail::median(drifts);
  stats.median_terminus_drift_px = detail::median(terminus_drifts);
  stats.median_abs_shadow_change_px = detail::median(shadow_changes);
  return stats;
}

// JSON-lines serialization: one record per keypoint.
inline void save_keypoints(const std::string& path,
                           const std::vector<KeypointSet>& sets) {
  std::ofstream out(path);
  if (!out) throw IoError("save_keypoints: cannot open " + path);
  for (const KeypointSet& set : sets) {
    for (size_t i = 0; i < set.points.size(); ++i) {
      nlohmann::ordered_json record;
      record["frame"] = set.frame_index;
      record["u"] = set.points[i].x();
      record["v"] = set.points[i].y();
      record["shadow_len"] = set.shadow_lengths[i];
      out << record.dump() << "\n";
    }
  }
  if (!out) throw IoError("save_keypoints: write failed for " + path);
}

inline std::vector<KeypointSet> load_keypoints(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_keypoints: cannot open " + path);
  std::vector<KeypointSet> sets;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json record = nlohmann::json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.contains("frame"))
      throw IoError("load_keypoints: malformed record in " + path);
    const int frame = record.at("frame").get<int>();
    if (sets.empty() || sets.back().frame_index != frame) {
      sets.emplace_back();
      sets.back().frame_index = frame;
    }
    sets.back().points.emplace_back(record.at("u").get<double>(),
                                    record.at("v").get<double>());
    sets.back().shadow_lengths.push_back(record.at("shadow_len").get<double>());
  }
  return sets;
}

}  // namespace coffee
