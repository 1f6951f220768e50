#pragma once

// Metric suite and experiment harness: precision/recall/F1 over match
// matrices, PR sweep with AUC and best F1, median pixel-error curves, the
// low-roughness pose-bias experiment with its internal intensity-edge
// baseline, per-stage runtime profiling, and the CSV/SVG report bundle.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "coffee/pose.hpp"
#include "coffee/training.hpp"

namespace coffee {

// ---- precision / recall / F1 ------------------------------------------------

struct PrfScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Entry-level precision, recall, and their harmonic mean between a truth
// assignment and a predicted one.  Empty denominators define the metric as
// zero rather than NaN.
inline PrfScores precision_recall_f1(const Eigen::MatrixXi& truth,
                                     const Eigen::MatrixXi& predicted) {
  if (truth.rows() != predicted.rows() || truth.cols() != predicted.cols())
    throw ValidationError("precision_recall_f1: shape mismatch");
  long correct = 0, n_predicted = 0, n_truth = 0;
  for (int i = 0; i < truth.rows(); ++i)
    for (int j = 0; j < truth.cols(); ++j) {
      const bool g = truth(i, j) != 0;
      const bool m = predicted(i, j) != 0;
      correct += (g && m);
      n_predicted += m;
      n_truth += g;
    }
  PrfScores s;
  s.precision = n_predicted ? double(correct) / n_predicted : 0.0;
  s.recall = n_truth ? double(correct) / n_truth : 0.0;
  const double sum = s.precision + s.recall;
  s.f1 = sum > 0.0 ? 2.0 * s.precision * s.recall / sum : 0.0;
  return s;
}

// ---- PR sweep ---------------------------------------------------------------

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long n_predicted = 0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // one per threshold, in the given order
  double auc = 0.0;
  double best_f1 = 0.0;
};

// Threshold sweep over a score matrix: at each threshold every entry with
// score >= threshold counts as predicted.  The AUC is the trapezoid integral
// of precision over recall-sorted points, anchored at zero recall with the
// precision of the smallest-recall point; thresholds that predict nothing
// contribute a (0, 0) point to the curve by the empty-denominator convention
// but are excluded from the integral, since they carry no predictions.
inline PrCurve pr_sweep(const Mat& scores, const Eigen::MatrixXi& truth,
                        const std::vector<double>& thresholds) {
  if (thresholds.size() < 2)
    throw ValidationError("pr_sweep: need at least two thresholds");
  if (scores.rows() != truth.rows() || scores.cols() != truth.cols())
    throw ValidationError("pr_sweep: shape mismatch");

  PrCurve curve;
  for (const double threshold : thresholds) {
    const Eigen::MatrixXi predicted =
        (scores.array() >= threshold).cast<int>().matrix();
    const PrfScores s = precision_recall_f1(truth, predicted);
    PrPoint point;
    point.threshold = threshold;
    point.precision = s.precision;
    point.recall = s.recall;
    point.f1 = s.f1;
    point.n_predicted = predicted.sum();
    curve.points.push_back(point);
    curve.best_f1 = std::max(curve.best_f1, s.f1);
  }

  std::vector<std::pair<double, double>> rp;  // (recall, precision)
  for (const PrPoint& p : curve.points)
    if (p.n_predicted > 0) rp.emplace_back(p.recall, p.precision);
  if (rp.empty()) return curve;
  std::sort(rp.begin(), rp.end());
  rp.insert(rp.begin(), {0.0, rp.front().second});  // zero-recall anchor
  for (std::size_t k = 0; k + 1 < rp.size(); ++k)
    curve.auc += (rp[k + 1].first - rp[k].first) *
                 0.5 * (rp[k].second + rp[k + 1].second);
  return curve;
}

// ---- pixel-error curve ------------------------------------------------------

// Per-pair evaluation record: the ground-truth assignment, the predicted
// one, the log-score matrix behind it, and the reprojection error of each
// predicted match (meaningful only where predicted = 1; matches whose source
// keypoint cannot be transferred geometrically carry +infinity).
struct MatchEvalRecord {
  Eigen::MatrixXi truth;
  Eigen::MatrixXi predicted;
  Mat scores;
  Mat pixel_errors;

  void validate() const {
    const auto rows = truth.rows(), cols = truth.cols();
    if (predicted.rows() != rows || predicted.cols() != cols ||
        scores.rows() != rows || scores.cols() != cols ||
        pixel_errors.rows() != rows || pixel_errors.cols() != cols)
      throw ValidationError("MatchEvalRecord: field shapes disagree");
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        if (predicted(i, j) != 0 && predicted(i, j) != 1)
          throw ValidationError("MatchEvalRecord: predictions must be 0/1");
        if (predicted(i, j) == 1 && !(pixel_errors(i, j) >= 0.0))
          throw ValidationError(
              "MatchEvalRecord: pixel error of a predicted match must be >= 0");
      }
  }
};

struct PixelErrorCurve {
  // median_error[k] = median pixel error over the k+1 best-scoring matches.
  std::vector<double> median_error;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
    m = 0.5 * (m + v[mid - 1]);
  }
  return m;
}

}  // namespace detail

// Pools the predicted matches of all records, prunes ambiguous rows with the
// ratio test (runner-up within lowe_ratio of the best in probability), ranks
// the survivors by score, and reports the median pixel error of every
// top-n prefix.
inline PixelErrorCurve pixel_error_curve(
    const std::vector<MatchEvalRecord>& records, double lowe_ratio = 0.9) {
  if (!(lowe_ratio > 0.0 && lowe_ratio <= 1.0))
    throw ValidationError("pixel_error_curve: ratio must be in (0, 1]");
  std::vector<std::pair<double, double>> ranked;  // (score, error)
  for (const MatchEvalRecord& rec : records) {
    rec.validate();
    for (int i = 0; i < rec.predicted.rows(); ++i)
      for (int j = 0; j < rec.predicted.cols(); ++j) {
        if (rec.predicted(i, j) != 1) continue;
        if (rec.scores.cols() > 1) {
          double runner = -std::numeric_limits<double>::infinity();
          for (int j2 = 0; j2 < rec.scores.cols(); ++j2)
            if (j2 != j) runner = std::max(runner, rec.scores(i, j2));
          if (runner - rec.scores(i, j) >= std::log(lowe_ratio)) continue;
        }
        ranked.emplace_back(rec.scores(i, j), rec.pixel_errors(i, j));
      }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  PixelErrorCurve curve;
  std::vector<double> prefix;
  prefix.reserve(ranked.size());
  for (const auto& [score, error] : ranked) {
    prefix.push_back(error);
    curve.median_error.push_back(detail::median_of(prefix));
  }
  return curve;
}

// Builds the evaluation record for one frame pair from its keypoints, depth
// maps, relative pose, and the matcher's score matrix.  The pixel error of a
// predicted match is the distance between the geometric transfer of the A
// keypoint and the matched B keypoint.
inline MatchEvalRecord make_eval_record(
    const KeypointSet& kps_a, const KeypointSet& kps_b, const Image& depth_a,
    const Image& depth_b, const RigidTransform& pose_ab,
    const CameraModel& cam, const Mat& scores, const MatchSelection& sel = {}) {
  MatchEvalRecord rec;
  rec.truth = build_truth(kps_a, kps_b, depth_a, depth_b, pose_ab, cam).match;
  rec.predicted = select_matches(scores, sel);
  rec.scores = scores;
  rec.pixel_errors = Mat::Zero(scores.rows(), scores.cols());
  for (int i = 0; i < rec.predicted.rows(); ++i)
    for (int j = 0; j < rec.predicted.cols(); ++j) {
      if (rec.predicted(i, j) != 1) continue;
      Vec2 landed;
      const bool ok = detail::transfer_keypoint(
          kps_a.points[i], depth_a, depth_b, pose_ab, cam, &landed);
      rec.pixel_errors(i, j) =
          ok ? (landed - kps_b.points[j]).norm()
             : std::numeric_limits<double>::infinity();
    }
  rec.validate();
  return rec;
}

// Block-diagonal pooling of per-pair records into one corpus-level record.
// Cross-pair score entries are -infinity, so no finite threshold ever
// predicts them: entry-level metrics over the pooled matrices equal the
// aggregate-count metrics over the union of the pairs.
inline MatchEvalRecord pool_eval_records(
    const std::vector<MatchEvalRecord>& records) {
  if (records.empty())
    throw ValidationError("pool_eval_records: nothing to pool");
  long rows = 0, cols = 0;
  for (const MatchEvalRecord& rec : records) {
    rec.validate();
    rows += rec.truth.rows();
    cols += rec.truth.cols();
  }
  MatchEvalRecord pooled;
  pooled.truth = Eigen::MatrixXi::Zero(rows, cols);
  pooled.predicted = Eigen::MatrixXi::Zero(rows, cols);
  pooled.scores =
      Mat::Constant(rows, cols, -std::numeric_limits<double>::infinity());
  pooled.pixel_errors = Mat::Zero(rows, cols);
  long r0 = 0, c0 = 0;
  for (const MatchEvalRecord& rec : records) {
    const auto r = rec.truth.rows(), c = rec.truth.cols();
    pooled.truth.block(r0, c0, r, c) = rec.truth;
    pooled.predicted.block(r0, c0, r, c) = rec.predicted;
    pooled.scores.block(r0, c0, r, c) = rec.scores;
    pooled.pixel_errors.block(r0, c0, r, c) = rec.pixel_errors;
    r0 += r;
    c0 += c;
  }
  return pooled;
}

// ---- frame-pair pipeline ----------------------------------------------------

// Where the correspondences fed to the pose solver come from: the trained
// descriptor+matcher stack, plain mutual pixel proximity (no appearance
// model — associates whatever lies nearest, shadows included), or exact
// geometric transfers (the oracle upper bound).
enum class MatchSource { kTrainedModel, kNearestKeypoint, kGroundTruth };

struct PipelineOptions {
  DetectorKind detector = DetectorKind::kShadowScan;
  MatchSource source = MatchSource::kTrainedModel;
  DetectorOptions detector_options;
  MatchSelection selection;        // trained-model match selection
  double proximity_gate_px = 12.0;  // kNearestKeypoint association gate
  RansacOptions ransac;
};

struct StageTimings {
  double detect_ms = 0.0;
  double describe_ms = 0.0;
  double match_ms = 0.0;
  double pose_ms = 0.0;

  double total_ms() const {
    return detect_ms + describe_ms + match_ms + pose_ms;
  }
};

struct PairResult {
  bool ok = false;
  std::string failure;  // empty when ok
  int keypoints_a = 0;
  int keypoints_b = 0;
  int matches = 0;
  PoseEstimate estimate;
  RelativePose truth;
  double rotation_error_rad = 0.0;
  double signed_bias_rad = 0.0;
  StageTimings timings;
};

namespace detail {

inline double elapsed_ms(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

// Mutual nearest-neighbour association in pixel space within a gate.
inline std::vector<std::pair<int, int>> proximity_matches(
    const KeypointSet& a, const KeypointSet& b, double gate_px) {
  std::vector<int> best_b(a.size(), -1), best_a(b.size(), -1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    double best = gate_px;
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = (a.points[i] - b.points[j]).norm();
      if (d < best) {
        best = d;
        best_b[i] = static_cast<int>(j);
      }
    }
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    double best = gate_px;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = (a.points[i] - b.points[j]).norm();
      if (d < best) {
        best = d;
        best_a[j] = static_cast<int>(i);
      }
    }
  }
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (best_b[i] >= 0 && best_a[best_b[i]] == static_cast<int>(i))
      out.emplace_back(static_cast<int>(i), best_b[i]);
  return out;
}

}  // namespace detail

// Runs detect -> associate -> solve on one frame pair and scores the
// estimate against the ground-truth relative pose.  A pair that cannot be
// solved (too few associations, solver failure) comes back with ok = false
// and the reason recorded; it never throws for data-dependent failures.
inline PairResult evaluate_pair(const SceneFrame& frame_a,
                                const SceneFrame& frame_b,
                                const CameraModel& cam, const Vec3& bias_axis,
                                DescriptorNet* dnet, MatcherNet* mnet,
                                const PipelineOptions& opts,
                                std::uint64_t ransac_salt = 0) {
  if (opts.source == MatchSource::kTrainedModel && (!dnet || !mnet))
    throw ValidationError(
        "evaluate_pair: trained-model matching needs both networks");
  PairResult r;
  r.truth = relative_pose(frame_a.pose, frame_b.pose);

  auto t0 = std::chrono::steady_clock::now();
  KeypointSet kps_a, kps_b;
  if (opts.detector == DetectorKind::kShadowScan) {
    kps_a = detect(frame_a, cam, opts.detector_options);
    kps_b = detect(frame_b, cam, opts.detector_options);
  } else {
    kps_a = baseline_detect(frame_a.image, cam, opts.detector_options,
                            &frame_a.depth, frame_a.frame_index);
    kps_b = baseline_detect(frame_b.image, cam, opts.detector_options,
                            &frame_b.depth, frame_b.frame_index);
  }
  r.timings.detect_ms = detail::elapsed_ms(t0);
  r.keypoints_a = static_cast<int>(kps_a.size());
  r.keypoints_b = static_cast<int>(kps_b.size());

  const RigidTransform pose_ab =
      frame_b.pose.compose(frame_a.pose.inverse());
  std::vector<Vec2> px_a, px_b;
  switch (opts.source) {
    case MatchSource::kTrainedModel: {
      if (kps_a.size() == 0 || kps_b.size() == 0) break;
      t0 = std::chrono::steady_clock::now();
      const FeatureField fa = describe(kps_a, cam.width, cam.height, *dnet);
      const FeatureField fb = describe(kps_b, cam.width, cam.height, *dnet);
      r.timings.describe_ms = detail::elapsed_ms(t0);
      t0 = std::chrono::steady_clock::now();
      const MatchResult m = match(fa, fb, *mnet);
      for (const auto& [i, j] :
           match_pairs(select_matches(m.scores, opts.selection))) {
        px_a.push_back(kps_a.points[i]);
        px_b.push_back(kps_b.points[j]);
      }
      r.timings.match_ms = detail::elapsed_ms(t0);
      break;
    }
    case MatchSource::kNearestKeypoint: {
      t0 = std::chrono::steady_clock::now();
      for (const auto& [i, j] : detail::proximity_matches(
               kps_a, kps_b, opts.proximity_gate_px)) {
        px_a.push_back(kps_a.points[i]);
        px_b.push_back(kps_b.points[j]);
      }
      r.timings.match_ms = detail::elapsed_ms(t0);
      break;
    }
    case MatchSource::kGroundTruth: {
      t0 = std::chrono::steady_clock::now();
      for (const Vec2& p : kps_a.points) {
        Vec2 landed;
        if (detail::transfer_keypoint(p, frame_a.depth, frame_b.depth,
                                      pose_ab, cam, &landed)) {
          px_a.push_back(p);
          px_b.push_back(landed);
        }
      }
      r.timings.match_ms = detail::elapsed_ms(t0);
      break;
    }
  }
  r.matches = static_cast<int>(px_a.size());
  if (r.matches < 5) {
    r.failure = "too few matches (" + std::to_string(r.matches) + ")";
    return r;
  }

  t0 = std::chrono::steady_clock::now();
  std::vector<Vec2> norm_a(px_a.size()), norm_b(px_b.size());
  for (std::size_t k = 0; k < px_a.size(); ++k) {
    norm_a[k] = cam.normalized_ray(px_a[k]).head<2>();
    norm_b[k] = cam.normalized_ray(px_b[k]).head<2>();
  }
  RansacOptions ransac = opts.ransac;
  ransac.mean_focal = 0.5 * (cam.fx + cam.fy);
  ransac.seed += ransac_salt;
  try {
    r.estimate = ransac_pose(norm_a, norm_b, ransac);
  } catch (const NumericError& e) {
    r.failure = e.what();
    r.timings.pose_ms = detail::elapsed_ms(t0);
    return r;
  }
  r.timings.pose_ms = detail::elapsed_ms(t0);

  r.rotation_error_rad =
      rotation_error(r.estimate.pose.rotation, r.truth.rotation);
  r.signed_bias_rad =
      signed_axis_bias(r.estimate.pose.rotation, r.truth.rotation, bias_axis);
  r.ok = true;
  return r;
}

// ---- bias experiment --------------------------------------------------------

struct BiasSummary {
  std::vector<PairResult> pairs;
  int failed = 0;
  bool valid = false;  // false when more than 20% of the pairs failed
  double mean_bias = 0.0;
  double median_bias = 0.0;
  double std_bias = 0.0;
  double mean_rotation_error = 0.0;
};

// Runs the pair pipeline over every consecutive pair of a single-axis
// rotation sequence and summarizes the signed pose bias about that axis.
// The experiment is flagged invalid when more than 20% of the pairs fail.
inline BiasSummary bias_experiment(const std::vector<SceneFrame>& frames,
                                   const CameraModel& cam,
                                   const Vec3& bias_axis, DescriptorNet* dnet,
                                   MatcherNet* mnet,
                                   const PipelineOptions& opts) {
  if (frames.size() < 2)
    throw ValidationError("bias_experiment: need at least two frames");
  BiasSummary summary;
  std::vector<double> biases, errors;
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    PairResult r = evaluate_pair(frames[k], frames[k + 1], cam, bias_axis,
                                 dnet, mnet, opts, k);
    if (r.ok) {
      biases.push_back(r.signed_bias_rad);
      errors.push_back(r.rotation_error_rad);
    } else {
      ++summary.failed;
    }
    summary.pairs.push_back(std::move(r));
  }
  const double n_pairs = static_cast<double>(summary.pairs.size());
  summary.valid = summary.failed <= 0.2 * n_pairs && !biases.empty();
  if (!biases.empty()) {
    const double n = static_cast<double>(biases.size());
    for (const double b : biases) summary.mean_bias += b;
    summary.mean_bias /= n;
    for (const double e : errors) summary.mean_rotation_error += e;
    summary.mean_rotation_error /= n;
    summary.median_bias = detail::median_of(biases);
    double var = 0.0;
    for (const double b : biases) {
      const double d = b - summary.mean_bias;
      var += d * d;
    }
    summary.std_bias = std::sqrt(var / n);
  }
  return summary;
}

// ---- runtime profiling ------------------------------------------------------

struct RuntimeProfile {
  StageTimings median;
  StageTimings p95;
  double pairs_per_second = 0.0;
  std::string hardware;
  int threads = 1;
  std::vector<StageTimings> samples;
};

// CPU model string plus logical core count, for embedding in reports.
inline std::string hardware_descriptor() {
  std::string model = "unknown cpu";
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    const auto colon = line.find(':');
    if (line.rfind("model name", 0) == 0 && colon != std::string::npos) {
      model = line.substr(colon + 1);
      model.erase(0, model.find_first_not_of(' '));
      break;
    }
  }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) +
         " logical cores";
}

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t index = std::min(
      v.size() - 1,
      static_cast<std::size_t>(std::ceil(q * v.size())) - (q > 0.0 ? 1 : 0));
  return v[index];
}

inline StageTimings timing_quantile(const std::vector<StageTimings>& samples,
                                    double q) {
  std::vector<double> detect, describe, match, pose;
  for (const StageTimings& t : samples) {
    detect.push_back(t.detect_ms);
    describe.push_back(t.describe_ms);
    match.push_back(t.match_ms);
    pose.push_back(t.pose_ms);
  }
  StageTimings out;
  out.detect_ms = percentile(detect, q);
  out.describe_ms = percentile(describe, q);
  out.match_ms = percentile(match, q);
  out.pose_ms = percentile(pose, q);
  return out;
}

}  // namespace detail

// Times the pair pipeline stage by stage over every consecutive pair of a
// sequence.  The first pair is run once unrecorded as a warm-up; all timing
// runs are single-threaded for stable numbers.
inline RuntimeProfile runtime_profile(const std::vector<SceneFrame>& frames,
                                      const CameraModel& cam,
                                      DescriptorNet* dnet, MatcherNet* mnet,
                                      const PipelineOptions& opts) {
  if (frames.size() < 2)
    throw ValidationError("runtime_profile: need at least two frames");
  RuntimeProfile profile;
  profile.hardware = hardware_descriptor();
  profile.threads = 1;
  evaluate_pair(frames[0], frames[1], cam, Vec3(0, 1, 0), dnet, mnet, opts,
                0);  // warm-up
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    const PairResult r = evaluate_pair(frames[k], frames[k + 1], cam,
                                       Vec3(0, 1, 0), dnet, mnet, opts, k);
    profile.samples.push_back(r.timings);
  }
  profile.median = detail::timing_quantile(profile.samples, 0.5);
  profile.p95 = detail::timing_quantile(profile.samples, 0.95);
  const double median_total = profile.median.total_ms();
  profile.pairs_per_second = median_total > 0.0 ? 1000.0 / median_total : 0.0;
  return profile;
}

// ---- report bundle ----------------------------------------------------------

struct ReportBundle {
  PrfScores headline;         // match quality at the operating selection
  PrCurve pr;
  PixelErrorCurve pixel;
  BiasSummary shadow_bias;    // shadow-scan detector pipeline
  BiasSummary baseline_bias;  // intensity-edge detector pipeline
  RuntimeProfile runtime;
};

namespace detail {

// Minimal hand-rolled line chart: auto-scaled axes, one polyline per series,
// legend in the top-right corner.
inline std::string svg_line_chart(
    const std::string& title, const std::string& x_label,
    const std::string& y_label,
    const std::vector<std::pair<std::string,
                                std::vector<std::pair<double, double>>>>&
        series) {
  const int width = 640, height = 420;
  const double ml = 60, mr = 20, mt = 40, mb = 50;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool first = true;
  for (const auto& [name, pts] : series)
    for (const auto& [x, y] : pts) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (first) {
        x_min = x_max = x;
        y_min = y_max = y;
        first = false;
      }
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_min = std::min(y_min, y);
      y_max = std::max(y_max, y);
    }
  if (x_max - x_min < 1e-12) x_max = x_min + 1.0;
  if (y_max - y_min < 1e-12) y_max = y_min + 1.0;
  const auto sx = [&](double x) {
    return ml + (x - x_min) / (x_max - x_min) * (width - ml - mr);
  };
  const auto sy = [&](double y) {
    return height - mb - (y - y_min) / (y_max - y_min) * (height - mt - mb);
  };
  const char* colors[] = {"#c0392b", "#2980b9", "#27ae60", "#8e44ad"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"16\">" << title
      << "</text>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\""
      << width - mr << "\" y2=\"" << height - mb
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  svg << std::setprecision(4);
  for (int tick = 0; tick <= 4; ++tick) {
    const double fx = x_min + (x_max - x_min) * tick / 4.0;
    const double fy = y_min + (y_max - y_min) * tick / 4.0;
    svg << "<text x=\"" << sx(fx) << "\" y=\"" << height - mb + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << fx << "</text>\n";
    svg << "<text x=\"" << ml - 8 << "\" y=\"" << sy(fy) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << fy << "</text>\n";
  }
  svg << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\">"
      << x_label << "</text>\n";
  svg << "<text x=\"16\" y=\"" << (mt + height - mb) / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\" transform=\"rotate(-90 16 "
      << (mt + height - mb) / 2 << ")\">" << y_label << "</text>\n";
  int series_index = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[series_index % 4];
    std::ostringstream poly;
    for (const auto& [x, y] : pts) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      poly << sx(x) << "," << sy(y) << " ";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"" << poly.str() << "\"/>\n";
    svg << "<text x=\"" << width - mr - 8 << "\" y=\""
        << mt + 16 * series_index + 12
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"12\" fill=\""
        << color << "\">" << name << "</text>\n";
    ++series_index;
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_text_file(const std::string& path,
                            const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("report: cannot open " + path);
  out << content;
  if (!out) throw IoError("report: write failed for " + path);
}

inline nlohmann::json bias_json(const BiasSummary& b) {
  return {{"mean_bias_rad", b.mean_bias},
          {"median_bias_rad", b.median_bias},
          {"std_bias_rad", b.std_bias},
          {"mean_rotation_error_rad", b.mean_rotation_error},
          {"pairs", b.pairs.size()},
          {"failed", b.failed},
          {"valid", b.valid}};
}

}  // namespace detail

// Writes the full report bundle into a directory: every plot as SVG with its
// raw data as CSV beside it, headline numbers in metrics.csv, and the
// machine-readable roll-up in summary.json.
inline void write_report(const std::string& dir, const ReportBundle& report) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("report: cannot create directory " + dir);

  {
    std::ostringstream csv;
    csv << "metric,value\n";
    csv << std::setprecision(17);
    csv << "precision," << report.headline.precision << "\n";
    csv << "recall," << report.headline.recall << "\n";
    csv << "f1," << report.headline.f1 << "\n";
    csv << "pr_auc," << report.pr.auc << "\n";
    csv << "best_f1," << report.pr.best_f1 << "\n";
    csv << "shadow_mean_bias_rad," << report.shadow_bias.mean_bias << "\n";
    csv << "shadow_std_bias_rad," << report.shadow_bias.std_bias << "\n";
    csv << "baseline_mean_bias_rad," << report.baseline_bias.mean_bias
        << "\n";
    csv << "baseline_std_bias_rad," << report.baseline_bias.std_bias << "\n";
    csv << "pairs_per_second," << report.runtime.pairs_per_second << "\n";
    detail::write_text_file(dir + "/metrics.csv", csv.str());
  }
  {
    std::ostringstream csv;
    csv << "threshold,precision,recall,f1,n_predicted\n";
    csv << std::setprecision(17);
    for (const PrPoint& p : report.pr.points)
      csv << p.threshold << ',' << p.precision << ',' << p.recall << ','
          << p.f1 << ',' << p.n_predicted << "\n";
    detail::write_text_file(dir + "/pr_curve.csv", csv.str());
    std::vector<std::pair<double, double>> pts;
    for (const PrPoint& p : report.pr.points)
      if (p.n_predicted > 0) pts.emplace_back(p.recall, p.precision);
    std::sort(pts.begin(), pts.end());
    detail::write_text_file(
        dir + "/pr_curve.svg",
        detail::svg_line_chart("Precision-Recall", "recall", "precision",
                               {{"sweep", pts}}));
  }
  {
    std::ostringstream csv;
    csv << "n_matches,median_error_px\n";
    csv << std::setprecision(17);
    std::vector<std::pair<double, double>> pts;
    for (std::size_t k = 0; k < report.pixel.median_error.size(); ++k) {
      csv << k + 1 << ',' << report.pixel.median_error[k] << "\n";
      pts.emplace_back(double(k + 1), report.pixel.median_error[k]);
    }
    detail::write_text_file(dir + "/pixel_error.csv", csv.str());
    detail::write_text_file(
        dir + "/pixel_error.svg",
        detail::svg_line_chart("Median pixel error vs match budget",
                               "matches kept", "median error (px)",
                               {{"median", pts}}));
  }
  {
    std::ostringstream csv;
    csv << "pipeline,pair,ok,signed_bias_rad,rotation_error_rad,matches\n";
    csv << std::setprecision(17);
    std::vector<std::pair<double, double>> shadow_pts, baseline_pts;
    const auto emit = [&](const char* name, const BiasSummary& summary,
                          std::vector<std::pair<double, double>>* pts) {
      for (std::size_t k = 0; k < summary.pairs.size(); ++k) {
        const PairResult& p = summary.pairs[k];
        csv << name << ',' << k << ',' << (p.ok ? 1 : 0) << ','
            << p.signed_bias_rad << ',' << p.rotation_error_rad << ','
            << p.matches << "\n";
        if (p.ok) pts->emplace_back(double(k), p.signed_bias_rad);
      }
    };
    emit("shadow_scan", report.shadow_bias, &shadow_pts);
    emit("intensity_edge", report.baseline_bias, &baseline_pts);
    detail::write_text_file(dir + "/bias.csv", csv.str());
    detail::write_text_file(
        dir + "/bias.svg",
        detail::svg_line_chart("Signed pose bias per pair", "pair index",
                               "bias (rad)",
                               {{"shadow_scan", shadow_pts},
                                {"intensity_edge", baseline_pts}}));
  }
  {
    std::ostringstream csv;
    csv << "stage,median_ms,p95_ms\n";
    csv << std::setprecision(17);
    csv << "detect," << report.runtime.median.detect_ms << ','
        << report.runtime.p95.detect_ms << "\n";
    csv << "describe," << report.runtime.median.describe_ms << ','
        << report.runtime.p95.describe_ms << "\n";
    csv << "match," << report.runtime.median.match_ms << ','
        << report.runtime.p95.match_ms << "\n";
    csv << "pose," << report.runtime.median.pose_ms << ','
        << report.runtime.p95.pose_ms << "\n";
    csv << "total," << report.runtime.median.total_ms() << ','
        << report.runtime.p95.total_ms() << "\n";
    detail::write_text_file(dir + "/runtime.csv", csv.str());
  }
  {
    nlohmann::json summary;
    summary["report_version"] = 1;
    summary["bias_sign_convention"] = "estimate_minus_truth";
    summary["hardware"] = report.runtime.hardware;
    summary["threads"] = report.runtime.threads;
    summary["precision"] = report.headline.precision;
    summary["recall"] = report.headline.recall;
    summary["f1"] = report.headline.f1;
    summary["pr_auc"] = report.pr.auc;
    summary["best_f1"] = report.pr.best_f1;
    summary["shadow_bias"] = detail::bias_json(report.shadow_bias);
    summary["baseline_bias"] = detail::bias_json(report.baseline_bias);
    summary["pairs_per_second"] = report.runtime.pairs_per_second;
    detail::write_text_file(dir + "/summary.json", summary.dump(2) + "\n");
  }
}

}  // namespace coffee
