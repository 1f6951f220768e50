#pragma once

// Ground-truth correspondence construction, the matching loss with its
// unmatched buckets, and the joint descriptor+matcher training loop.
//
// Truth is built geometrically: a keypoint in frame A is lifted by its depth,
// transferred through the relative pose, and compared against frame B's
// keypoints and depth map.  A pair (i, j) is a ground-truth match when the
// transfer lands within one pixel of keypoint j, the two are mutually
// nearest, and the transferred depth agrees with B's depth map (the occlusion
// check).  Keypoints whose transfer leaves the image, hits a hole in the
// depth map, or lands behind the camera are simply unmatched — never errors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "coffee/autodiff.hpp"
#include "coffee/common.hpp"
#include "coffee/detector.hpp"
#include "coffee/geom.hpp"
#include "coffee/image.hpp"
#include "coffee/models.hpp"
#include "coffee/renderer.hpp"

namespace coffee {

// ---- ground-truth correspondences ------------------------------------------

// Binary assignment between two keypoint sets plus explicit unmatched
// indicators.  Each row and each column carries at most one match; the
// indicator vectors are the complements of the row/column sums, so they stay
// meaningful after blending (see blend_truth) where they become fractional.
struct CorrespondenceTruth {
  Eigen::MatrixXi match;           // nA x nB, entries 0/1
  Eigen::VectorXd unmatched_rows;  // nA, 1 - row sum
  Eigen::VectorXd unmatched_cols;  // nB, 1 - column sum

  int rows() const { return static_cast<int>(match.rows()); }
  int cols() const { return static_cast<int>(match.cols()); }

  void validate() const {
    if (unmatched_rows.size() != match.rows() ||
        unmatched_cols.size() != match.cols())
      throw ValidationError(
          "CorrespondenceTruth: indicator sizes do not match the assignment");
    for (int i = 0; i < match.rows(); ++i) {
      int sum = 0;
      for (int j = 0; j < match.cols(); ++j) {
        const int g = match(i, j);
        if (g != 0 && g != 1)
          throw ValidationError("CorrespondenceTruth: entries must be 0/1");
        sum += g;
      }
      if (sum > 1)
        throw ValidationError(
            "CorrespondenceTruth: a row has more than one match");
      if (std::abs(unmatched_rows(i) - (1.0 - sum)) > 1e-12)
        throw ValidationError(
            "CorrespondenceTruth: row indicator out of sync");
    }
    for (int j = 0; j < match.cols(); ++j) {
      const int sum = match.col(j).sum();
      if (sum > 1)
        throw ValidationError(
            "CorrespondenceTruth: a column has more than one match");
      if (std::abs(unmatched_cols(j) - (1.0 - sum)) > 1e-12)
        throw ValidationError(
            "CorrespondenceTruth: column indicator out of sync");
    }
  }
};

namespace detail {

// Transfers keypoint p from frame A into frame B.  Returns false when the
// transfer is invalid for any benign reason: no depth under the keypoint,
// the lifted point falls behind B's camera, the reprojection leaves the
// image, B's depth map has a hole there, or B sees a different (occluding)
// surface at that pixel.
inline bool transfer_keypoint(const Vec2& p, const Image& depth_a,
                              const Image& depth_b,
                              const RigidTransform& pose_ab,
                              const CameraModel& cam, Vec2* out) {
  const double da = depth_a.sample_bilinear(p.x(), p.y());
  if (!(da > 0.0)) return false;
  const Vec3 x_b = pose_ab.apply(da * cam.normalized_ray(p));
  if (!(x_b.z() > 0.0)) return false;
  const Vec2 p_b = reproject(p, da, pose_ab, cam);
  if (!(p_b.x() >= 0.0 && p_b.x() <= cam.width && p_b.y() >= 0.0 &&
        p_b.y() <= cam.height))
    return false;
  const double db = depth_b.sample_bilinear(p_b.x(), p_b.y());
  if (!(db > 0.0)) return false;
  // Occlusion: the surface B actually images at p_b must be the same one the
  // transferred point lies on, within 2% relative depth.
  if (std::abs(x_b.z() - db) > 0.02 * x_b.z()) return false;
  *out = p_b;
  return true;
}

}  // namespace detail

// Pixel radius for a transferred keypoint to count as the same detection.
inline constexpr double kTruthMatchRadiusPx = 1.0;

namespace detail {

// For every source keypoint with a valid transfer, the index of the nearest
// target keypoint when the transfer lands strictly within the match radius;
// -1 otherwise.  Ties resolve to the lowest index.
inline std::vector<int> nearest_targets(const std::vector<Vec2>& landed,
                                        const std::vector<bool>& valid,
                                        const std::vector<Vec2>& targets) {
  std::vector<int> best(landed.size(), -1);
  for (std::size_t i = 0; i < landed.size(); ++i) {
    if (!valid[i]) continue;
    double best_d = kTruthMatchRadiusPx;
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const double d = (landed[i] - targets[j]).norm();
      if (d < best_d) {
        best_d = d;
        best[i] = static_cast<int>(j);
      }
    }
  }
  return best;
}

}  // namespace detail

// Builds the ground-truth assignment for a keypoint pair.  pose_ab maps
// camera-A coordinates to camera-B coordinates; depth maps are camera-frame
// z with 0 marking pixels with no surface.  G(i, j) = 1 exactly when both
// directions agree: i's transfer lands strictly within kTruthMatchRadiusPx
// of keypoint j and nearer to it than to any other B keypoint, and j's
// transfer under the inverse pose does the same for keypoint i.  The
// predicate is symmetric under swapping the frames, so building truth B->A
// with the inverse pose yields exactly the transpose.
inline CorrespondenceTruth build_truth(const KeypointSet& kps_a,
                                       const KeypointSet& kps_b,
                                       const Image& depth_a,
                                       const Image& depth_b,
                                       const RigidTransform& pose_ab,
                                       const CameraModel& cam) {
  const int na = static_cast<int>(kps_a.size());
  const int nb = static_cast<int>(kps_b.size());
  CorrespondenceTruth t;
  t.match = Eigen::MatrixXi::Zero(na, nb);
  t.unmatched_rows = Eigen::VectorXd::Ones(na);
  t.unmatched_cols = Eigen::VectorXd::Ones(nb);
  if (na == 0 || nb == 0) return t;

  const RigidTransform pose_ba = pose_ab.inverse();
  std::vector<Vec2> landed_in_b(na), landed_in_a(nb);
  std::vector<bool> ok_a(na, false), ok_b(nb, false);
  for (int i = 0; i < na; ++i)
    ok_a[i] = detail::transfer_keypoint(kps_a.points[i], depth_a, depth_b,
                                        pose_ab, cam, &landed_in_b[i]);
  for (int j = 0; j < nb; ++j)
    ok_b[j] = detail::transfer_keypoint(kps_b.points[j], depth_b, depth_a,
                                        pose_ba, cam, &landed_in_a[j]);

  const std::vector<int> best_b =
      detail::nearest_targets(landed_in_b, ok_a, kps_b.points);
  const std::vector<int> best_a =
      detail::nearest_targets(landed_in_a, ok_b, kps_a.points);
  for (int i = 0; i < na; ++i) {
    const int j = best_b[i];
    if (j >= 0 && best_a[j] == i) {
      t.match(i, j) = 1;
      t.unmatched_rows(i) = 0.0;
      t.unmatched_cols(j) = 0.0;
    }
  }
  return t;
}

// Counts A keypoints whose geometric transfer into B is valid — the
// denominator for coverage statistics (matched fraction of the shared
// visible surface).
inline int transferable_count(const KeypointSet& kps_a, const Image& depth_a,
                              const Image& depth_b,
                              const RigidTransform& pose_ab,
                              const CameraModel& cam) {
  int count = 0;
  Vec2 landed;
  for (const Vec2& p : kps_a.points)
    if (detail::transfer_keypoint(p, depth_a, depth_b, pose_ab, cam, &landed))
      ++count;
  return count;
}

// ---- matching loss ----------------------------------------------------------

// Label smoothing: mixes the binary assignment with a uniform matrix whose
// rows and columns both keep total mass at most one, so the blend stays a
// valid (sub-stochastic) soft assignment for any noise level in [0, 0.1].
inline Mat blend_truth(const Eigen::MatrixXi& g, double noise) {
  if (!(noise >= 0.0 && noise <= 0.1))
    throw ValidationError("blend_truth: noise level must lie in [0, 0.1]");
  const double denom =
      static_cast<double>(std::max<Eigen::Index>(1, std::max(g.rows(), g.cols())));
  return (1.0 - noise) * g.cast<double>().array() + noise / denom;
}

namespace detail {

// Validates a soft assignment: non-negative with row and column sums at most
// one (tiny floating-point overshoot tolerated).
inline void check_soft_assignment(const Mat& g) {
  if (g.size() > 0 && g.minCoeff() < -1e-12)
    throw ValidationError("matching_loss: truth entries must be non-negative");
  for (int i = 0; i < g.rows(); ++i)
    if (g.row(i).sum() > 1.0 + 1e-9)
      throw ValidationError("matching_loss: a truth row has mass above one");
  for (int j = 0; j < g.cols(); ++j)
    if (g.col(j).sum() > 1.0 + 1e-9)
      throw ValidationError("matching_loss: a truth column has mass above one");
}

}  // namespace detail

// Negative log-likelihood of a soft assignment under the score matrix.
// scores is a tape variable holding log-probabilities S (row and column mass
// of exp(S) at most one); g holds the (possibly blended) truth.  Matched mass
// pays -S(i, j); leftover row/column mass pays the log of the corresponding
// unmatched bucket log(1 - sum_j exp(S(i, j))).  The result is linear in g
// and non-negative whenever S is a valid log soft assignment.
inline int matching_loss(Tape& t, int scores, const Mat& g) {
  const Eigen::Index rows = t.value(scores).rows();
  const Eigen::Index cols = t.value(scores).cols();
  if (g.rows() != rows || g.cols() != cols)
    throw ValidationError("matching_loss: truth shape does not match scores");
  detail::check_soft_assignment(g);

  const Eigen::VectorXd row_rest =
      (1.0 - g.rowwise().sum().array()).max(0.0).matrix();
  const Eigen::VectorXd col_rest =
      (1.0 - g.colwise().sum().transpose().array()).max(0.0).matrix();

  const int matched = t.weighted_sum(scores, Mat(-g));
  const int row_bucket =
      t.weighted_sum(t.log1m_rowsumexp(scores), Mat(-row_rest));
  const int col_bucket = t.weighted_sum(
      t.log1m_rowsumexp(t.transpose(scores)), Mat(-col_rest));
  return t.add(t.add(matched, row_bucket), col_bucket);
}

// Value-only convenience overload.
inline double matching_loss(const Mat& scores, const Mat& g) {
  Tape t;
  return t.value(matching_loss(t, t.constant(scores), g))(0, 0);
}

// Fraction of selected matches that are ground-truth correct.  No selected
// matches yields zero.
inline double matching_precision(const Mat& scores,
                                 const Eigen::MatrixXi& truth,
                                 const MatchSelection& selection = {}) {
  const auto pairs = match_pairs(select_matches(scores, selection));
  if (pairs.empty()) return 0.0;
  int correct = 0;
  for (const auto& [i, j] : pairs)
    if (truth(i, j) == 1) ++correct;
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

// ---- training loop ----------------------------------------------------------

struct TrainConfig {
  double base_lr = 1e-5;
  double lr_decay = 0.95;    // multiplicative, applied once per epoch
  int epochs = 50;
  int batch_pairs = 4;       // image pairs accumulated per optimizer step
  double truth_noise = 0.05; // label-smoothing level for blend_truth
  std::uint64_t seed = 7;

  void validate() const {
    if (!(base_lr > 0.0))
      throw ValidationError("TrainConfig: base_lr must be positive");
    if (!(lr_decay > 0.0))
      throw ValidationError("TrainConfig: lr_decay must be positive");
    if (epochs <= 0)
      throw ValidationError("TrainConfig: epochs must be positive");
    if (batch_pairs <= 0)
      throw ValidationError("TrainConfig: batch_pairs must be positive");
    if (!(truth_noise >= 0.0 && truth_noise <= 0.1))
      throw ValidationError("TrainConfig: truth_noise must lie in [0, 0.1]");
  }
};

// One supervised image pair: keypoints on both sides plus their ground-truth
// assignment, with the shared image extent the keypoints live in.
struct TrainingPair {
  KeypointSet kps_a;
  KeypointSet kps_b;
  CorrespondenceTruth truth;
  int width = 0;
  int height = 0;

  void validate() const {
    if (width <= 0 || height <= 0)
      throw ValidationError("TrainingPair: image extent must be positive");
    if (kps_a.size() == 0 || kps_b.size() == 0)
      throw ValidationError("TrainingPair: both keypoint sets must be non-empty");
    if (truth.rows() != static_cast<int>(kps_a.size()) ||
        truth.cols() != static_cast<int>(kps_b.size()))
      throw ValidationError("TrainingPair: truth shape does not match keypoints");
    truth.validate();
  }
};

// One metrics row per epoch: cumulative optimizer step count, mean training
// loss over the epoch, row-argmax precision on the validation pairs, and the
// learning rate in effect during the epoch.
struct TrainMetricsRow {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
  double val_precision = 0.0;
  double lr = 0.0;
};

struct TrainingRun {
  std::vector<TrainMetricsRow> metrics;  // one row per epoch
  std::vector<double> step_losses;       // mean pair loss at every optimizer step
  double final_val_precision = 0.0;
};

namespace detail {

// Runs a forward pass for one pair on a fresh tape and returns the loss
// variable (tape stays owned by the caller via the out-parameter).
inline int pair_loss_forward(Tape& t, DescriptorNet& dnet, MatcherNet& mnet,
                             const TrainingPair& pair, double truth_noise,
                             bool train_mode) {
  const DescriptorGraph ga = descriptor_forward(t, dnet, pair.kps_a,
                                                pair.width, pair.height,
                                                train_mode);
  const DescriptorGraph gb = descriptor_forward(t, dnet, pair.kps_b,
                                                pair.width, pair.height,
                                                train_mode);
  const FeatureField meta_a =
      keypoint_geometry(pair.kps_a, pair.width, pair.height);
  const FeatureField meta_b =
      keypoint_geometry(pair.kps_b, pair.width, pair.height);
  const MatchGraph mg = matcher_forward(t, mnet, ga.keypoint_features, meta_a,
                                        gb.keypoint_features, meta_b);
  const Mat g = blend_truth(pair.truth.match, truth_noise);
  return matching_loss(t, mg.scores, g);
}

inline double validation_precision(DescriptorNet& dnet, MatcherNet& mnet,
                                   const std::vector<TrainingPair>& val) {
  if (val.empty()) return 0.0;
  double total = 0.0;
  for (const TrainingPair& pair : val) {
    const FeatureField fa = describe(pair.kps_a, pair.width, pair.height, dnet);
    const FeatureField fb = describe(pair.kps_b, pair.width, pair.height, dnet);
    const MatchResult m = match(fa, fb, mnet);
    total += matching_precision(m.scores, pair.truth.match);
  }
  return total / static_cast<double>(val.size());
}

inline std::string nan_batch_report(int epoch, int step, int pair_index,
                                    const TrainingPair& pair, double loss) {
  std::ostringstream out;
  out << "training: non-finite loss " << loss << " at epoch " << epoch
      << " step " << step << " pair " << pair_index << " (nA="
      << pair.kps_a.size() << ", nB=" << pair.kps_b.size()
      << ", true matches=" << pair.truth.match.sum() << ")";
  return out.str();
}

}  // namespace detail

// Joint training of the descriptor and matcher networks on in-memory pairs.
// Each optimizer step accumulates gradients over batch_pairs pairs (the last
// window of an epoch may be shorter); the learning rate decays once per
// epoch.  A non-finite loss aborts immediately with a diagnostic describing
// the offending batch.  When metrics_csv is non-empty the per-epoch rows are
// also streamed to that file; when checkpoint_dir is non-empty a weight
// snapshot is written every epoch alongside the architecture manifest.
inline TrainingRun train_pairs(DescriptorNet& dnet, MatcherNet& mnet,
                               const std::vector<TrainingPair>& train,
                               const std::vector<TrainingPair>& val,
                               const TrainConfig& cfg,
                               const std::string& metrics_csv = "",
                               const std::string& checkpoint_dir = "") {
  cfg.validate();
  if (train.empty())
    throw ValidationError("train_pairs: training set is empty");
  for (const TrainingPair& pair : train) pair.validate();
  for (const TrainingPair& pair : val) pair.validate();

  std::vector<Parameter*> params = trainable_parameters(dnet, mnet);
  AdamOptimizer opt(params, cfg.base_lr, 0.9, 0.999, 1e-8, cfg.lr_decay);
  Rng shuffle_rng(cfg.seed);

  std::ofstream csv;
  if (!metrics_csv.empty()) {
    csv.open(metrics_csv);
    if (!csv) throw IoError("train_pairs: cannot open metrics file " +
                            metrics_csv);
    csv << "epoch,step,loss,val_precision,lr\n";
  }
  if (!checkpoint_dir.empty())
    save_model_manifest(checkpoint_dir + "/model.json", dnet, mnet);

  TrainingRun run;
  const int n = static_cast<int>(train.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  int step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_in_effect = opt.learning_rate();
    // Fisher-Yates with the run's own generator keeps epochs reproducible.
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.uniform() * (i + 1));
      std::swap(order[i], order[std::min(j, i)]);
    }

    double epoch_loss = 0.0;
    int epoch_pairs = 0;
    for (int start = 0; start < n; start += cfg.batch_pairs) {
      const int window = std::min(cfg.batch_pairs, n - start);
      opt.zero_grad();
      double window_loss = 0.0;
      for (int k = 0; k < window; ++k) {
        const int pair_index = order[start + k];
        const TrainingPair& pair = train[pair_index];
        Tape t;
        const int loss_var = detail::pair_loss_forward(
            t, dnet, mnet, pair, cfg.truth_noise, /*train_mode=*/true);
        const double loss = t.value(loss_var)(0, 0);
        if (!std::isfinite(loss))
          throw NumericError(
              detail::nan_batch_report(epoch, step, pair_index, pair, loss));
        t.backward(t.scale(loss_var, 1.0 / window));
        window_loss += loss;
      }
      opt.step();
      ++step;
      const double mean_loss = window_loss / window;
      run.step_losses.push_back(mean_loss);
      epoch_loss += window_loss;
      epoch_pairs += window;
    }
    opt.end_epoch();

    TrainMetricsRow row;
    row.epoch = epoch;
    row.step = step;
    row.loss = epoch_loss / epoch_pairs;
    row.val_precision = detail::validation_precision(dnet, mnet, val);
    row.lr = lr_in_effect;
    run.metrics.push_back(row);
    if (csv.is_open()) {
      csv << row.epoch << ',' << row.step << ','
          << std::setprecision(17) << row.loss << ',' << row.val_precision
          << ',' << row.lr << '\n';
      csv.flush();
    }
    if (!checkpoint_dir.empty()) {
      std::ostringstream name;
      name << checkpoint_dir << "/weights_epoch" << std::setw(3)
           << std::setfill('0') << epoch << ".cfw";
      save_model_weights(name.str(), dnet, mnet);
    }
    run.final_val_precision = row.val_precision;
  }
  return run;
}

}  // namespace coffee
