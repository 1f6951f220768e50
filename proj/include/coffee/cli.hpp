#pragma once

// Command-line driver: config-file-driven dataset generation, training,
// evaluation, sequence tracking, and pair inspection.  One JSON config file
// per run with strict unknown-key rejection; every run writes the fully
// resolved config beside its outputs; exit codes 0 success, 1 validation
// error, 2 I/O error, 3 numerical failure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "coffee/dataset.hpp"
#include "coffee/evalbench.hpp"

namespace coffee {

inline constexpr int kConfigSchemaVersion = 1;

namespace cli_detail {

using nlohmann::json;
using nlohmann::ordered_json;

inline void require_keys_known(const json& obj, const std::string& where,
                               std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed) known = known || item.key() == key;
    if (!known)
      throw ValidationError("config: unknown key '" + where + item.key() +
                            "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config: bad value for '") + key +
                          "'");
  }
}

inline std::string require_string(const json& j, const char* key,
                                  const std::string& where) {
  const std::string value = get_or<std::string>(j, key, "");
  if (value.empty())
    throw ValidationError("config: '" + where + key + "' is required");
  return value;
}

inline DetectorOptions detector_options_from(const json& j) {
  DetectorOptions d;
  d.sigma = get_or(j, "sigma", d.sigma);
  d.edge_threshold = get_or(j, "edge_threshold", d.edge_threshold);
  d.nms_radius = get_or(j, "nms_radius", d.nms_radius);
  d.match_gate_px = get_or(j, "match_gate_px", d.match_gate_px);
  d.validate();
  return d;
}

inline void detector_options_json(ordered_json& j, const DetectorOptions& d) {
  j["sigma"] = d.sigma;
  j["edge_threshold"] = d.edge_threshold;
  j["nms_radius"] = d.nms_radius;
  j["match_gate_px"] = d.match_gate_px;
}

inline DetectorKind detector_kind_from(const std::string& name) {
  if (name == "shadow_scan") return DetectorKind::kShadowScan;
  if (name == "intensity_edge") return DetectorKind::kIntensityEdge;
  throw ValidationError("config: unknown detector '" + name +
                        "' (expected shadow_scan or intensity_edge)");
}

constexpr std::initializer_list<const char*> kDetectorKeys = {
    "detector", "sigma", "edge_threshold", "nms_radius", "match_gate_px"};

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out << content;
  if (!out) throw IoError("write failed for " + path);
}

// ---- section configs --------------------------------------------------------

inline GenConfig gen_config_from(const json& section, std::uint64_t seed) {
  require_keys_known(section, "gen.",
                     {"shapes", "pairs_per_shape", "image_size", "vfov_deg",
                      "rotation_deg_min", "rotation_deg_max", "val_fraction",
                      "test_fraction", "sequence_frames", "sequence_kind",
                      "sequence_step_deg", "shape"});
  GenConfig g;
  g.shapes = get_or(section, "shapes", g.shapes);
  g.pairs_per_shape = get_or(section, "pairs_per_shape", g.pairs_per_shape);
  g.image_size = get_or(section, "image_size", g.image_size);
  g.vfov_deg = get_or(section, "vfov_deg", g.vfov_deg);
  g.rotation_deg_min = get_or(section, "rotation_deg_min", g.rotation_deg_min);
  g.rotation_deg_max = get_or(section, "rotation_deg_max", g.rotation_deg_max);
  g.val_fraction = get_or(section, "val_fraction", g.val_fraction);
  g.test_fraction = get_or(section, "test_fraction", g.test_fraction);
  g.sequence_frames = get_or(section, "sequence_frames", g.sequence_frames);
  g.sequence_kind = get_or(section, "sequence_kind", g.sequence_kind);
  g.sequence_step_deg =
      get_or(section, "sequence_step_deg", g.sequence_step_deg);
  g.seed = seed;
  if (section.contains("shape")) {
    const json& shape = section.at("shape");
    if (!shape.is_object())
      throw ValidationError("config: gen.shape must be an object");
    for (const auto& item : shape.items()) {
      const json& v = item.value();
      if (!v.is_array() || v.size() != 2 || !v.at(0).is_number() ||
          !v.at(1).is_number())
        throw ValidationError("config: gen.shape." + item.key() +
                              " must be a [lo, hi] pair");
      g.shape_overrides[item.key()] = {v.at(0).get<double>(),
                                       v.at(1).get<double>()};
    }
  }
  g.validate();
  return g;
}

inline ordered_json gen_config_json(const GenConfig& g) {
  ordered_json j;
  j["shapes"] = g.shapes;
  j["pairs_per_shape"] = g.pairs_per_shape;
  j["image_size"] = g.image_size;
  j["vfov_deg"] = g.vfov_deg;
  j["rotation_deg_min"] = g.rotation_deg_min;
  j["rotation_deg_max"] = g.rotation_deg_max;
  j["val_fraction"] = g.val_fraction;
  j["test_fraction"] = g.test_fraction;
  j["sequence_frames"] = g.sequence_frames;
  j["sequence_kind"] = g.sequence_kind;
  j["sequence_step_deg"] = g.sequence_step_deg;
  ordered_json shape = ordered_json::object();
  for (const auto& [knob, range] : g.shape_overrides)
    shape[knob] = {range.first, range.second};
  j["shape"] = shape;
  return j;
}

struct TrainCli {
  std::string dataset;
  int epochs = 50;
  int batch_pairs = 4;
  double base_lr = 1e-5;
  double lr_decay = 0.95;
  double truth_noise = 0.05;
  std::string detector = "shadow_scan";
  DetectorOptions detector_options;
};

inline TrainCli train_config_from(const json& section) {
  std::vector<const char*> keys = {"dataset",  "epochs",      "batch_pairs",
                                   "base_lr",  "lr_decay",    "truth_noise"};
  keys.insert(keys.end(), kDetectorKeys.begin(), kDetectorKeys.end());
  require_keys_known(section, "train.",
                     {"dataset", "epochs", "batch_pairs", "base_lr",
                      "lr_decay", "truth_noise", "detector", "sigma",
                      "edge_threshold", "nms_radius", "match_gate_px"});
  TrainCli t;
  t.dataset = require_string(section, "dataset", "train.");
  t.epochs = get_or(section, "epochs", t.epochs);
  t.batch_pairs = get_or(section, "batch_pairs", t.batch_pairs);
  t.base_lr = get_or(section, "base_lr", t.base_lr);
  t.lr_decay = get_or(section, "lr_decay", t.lr_decay);
  t.truth_noise = get_or(section, "truth_noise", t.truth_noise);
  t.detector = get_or(section, "detector", t.detector);
  detector_kind_from(t.detector);
  t.detector_options = detector_options_from(section);
  return t;
}

inline ordered_json train_config_json(const TrainCli& t) {
  ordered_json j;
  j["dataset"] = t.dataset;
  j["epochs"] = t.epochs;
  j["batch_pairs"] = t.batch_pairs;
  j["base_lr"] = t.base_lr;
  j["lr_decay"] = t.lr_decay;
  j["truth_noise"] = t.truth_noise;
  j["detector"] = t.detector;
  detector_options_json(j, t.detector_options);
  return j;
}

struct EvalCli {
  std::string dataset;
  std::string weights;
  std::string detector = "shadow_scan";
  std::vector<int> budgets = {100, 200, 500, 2000};
  double lowe_ratio = 0.9;
  std::string bias_sequence;  // empty: auto-discover <dataset>/sequence
  Vec3 bias_axis = Vec3(0, 1, 0);
  double proximity_gate_px = 12.0;
  int runtime_pairs = 3;
  DetectorOptions detector_options;
};

inline EvalCli eval_config_from(const json& section) {
  require_keys_known(section, "eval.",
                     {"dataset", "weights", "detector", "budgets",
                      "lowe_ratio", "bias_sequence", "bias_axis",
                      "proximity_gate_px", "runtime_pairs", "sigma",
                      "edge_threshold", "nms_radius", "match_gate_px"});
  EvalCli e;
  e.dataset = require_string(section, "dataset", "eval.");
  e.weights = require_string(section, "weights", "eval.");
  e.detector = get_or(section, "detector", e.detector);
  detector_kind_from(e.detector);
  e.budgets = get_or(section, "budgets", e.budgets);
  if (e.budgets.empty())
    throw ValidationError("config: eval.budgets must not be empty");
  for (const int k : e.budgets)
    if (k < 1)
      throw ValidationError("config: eval.budgets entries must be >= 1");
  e.lowe_ratio = get_or(section, "lowe_ratio", e.lowe_ratio);
  e.bias_sequence = get_or<std::string>(section, "bias_sequence", "");
  if (section.contains("bias_axis")) {
    const json& a = section.at("bias_axis");
    if (!a.is_array() || a.size() != 3)
      throw ValidationError("config: eval.bias_axis must be [x, y, z]");
    e.bias_axis = Vec3(a.at(0).get<double>(), a.at(1).get<double>(),
                       a.at(2).get<double>());
  }
  e.proximity_gate_px =
      get_or(section, "proximity_gate_px", e.proximity_gate_px);
  e.runtime_pairs = get_or(section, "runtime_pairs", e.runtime_pairs);
  if (e.runtime_pairs < 1)
    throw ValidationError("config: eval.runtime_pairs must be >= 1");
  e.detector_options = detector_options_from(section);
  return e;
}

inline ordered_json eval_config_json(const EvalCli& e) {
  ordered_json j;
  j["dataset"] = e.dataset;
  j["weights"] = e.weights;
  j["detector"] = e.detector;
  j["budgets"] = e.budgets;
  j["lowe_ratio"] = e.lowe_ratio;
  j["bias_sequence"] = e.bias_sequence;
  j["bias_axis"] = {e.bias_axis.x(), e.bias_axis.y(), e.bias_axis.z()};
  j["proximity_gate_px"] = e.proximity_gate_px;
  j["runtime_pairs"] = e.runtime_pairs;
  detector_options_json(j, e.detector_options);
  return j;
}

struct TrackCli {
  std::string sequence;  // path to a sequence manifest
  std::string weights;
  std::string detector = "shadow_scan";
  DetectorOptions detector_options;
};

inline TrackCli track_config_from(const json& section) {
  require_keys_known(section, "track.",
                     {"sequence", "weights", "detector", "sigma",
                      "edge_threshold", "nms_radius", "match_gate_px"});
  TrackCli t;
  t.sequence = require_string(section, "sequence", "track.");
  t.weights = require_string(section, "weights", "track.");
  t.detector = get_or(section, "detector", t.detector);
  detector_kind_from(t.detector);
  t.detector_options = detector_options_from(section);
  return t;
}

inline ordered_json track_config_json(const TrackCli& t) {
  ordered_json j;
  j["sequence"] = t.sequence;
  j["weights"] = t.weights;
  j["detector"] = t.detector;
  detector_options_json(j, t.detector_options);
  return j;
}

struct InspectCli {
  std::string dataset;
  std::string weights;
  int pair = 0;
  std::string detector = "shadow_scan";
  DetectorOptions detector_options;
};

inline InspectCli inspect_config_from(const json& section) {
  require_keys_known(section, "inspect.",
                     {"dataset", "weights", "pair", "detector", "sigma",
                      "edge_threshold", "nms_radius", "match_gate_px"});
  InspectCli i;
  i.dataset = require_string(section, "dataset", "inspect.");
  i.weights = require_string(section, "weights", "inspect.");
  i.pair = get_or(section, "pair", i.pair);
  i.detector = get_or(section, "detector", i.detector);
  detector_kind_from(i.detector);
  i.detector_options = detector_options_from(section);
  return i;
}

inline ordered_json inspect_config_json(const InspectCli& i) {
  ordered_json j;
  j["dataset"] = i.dataset;
  j["weights"] = i.weights;
  j["pair"] = i.pair;
  j["detector"] = i.detector;
  detector_options_json(j, i.detector_options);
  return j;
}

// ---- shared pipeline helpers ------------------------------------------------

inline KeypointSet detect_by_kind(const SceneFrame& frame,
                                  const CameraModel& cam, DetectorKind kind,
                                  const DetectorOptions& options,
                                  int threads) {
  return kind == DetectorKind::kShadowScan
             ? detect(frame, cam, options, threads)
             : baseline_detect(frame.image, cam, options, &frame.depth,
                               frame.frame_index, threads);
}

// Loads weights into freshly initialized networks and, when a model
// manifest sits beside the weights file, verifies architectural
// compatibility against it.
inline void load_checked_model(const std::string& weights, DescriptorNet& d,
                               MatcherNet& m) {
  load_model_weights(weights, d, m);
  const std::filesystem::path manifest =
      std::filesystem::path(weights).parent_path() / "model.json";
  if (std::filesystem::exists(manifest))
    check_model_manifest(load_model_manifest(manifest.string()), d, m);
}

inline nlohmann::ordered_json quat_json(const Rotation3& r) {
  const Eigen::Quaterniond& q = r.quat();
  return {q.w(), q.x(), q.y(), q.z()};
}

// ---- subcommands ------------------------------------------------------------

inline void run_gen(const GenConfig& g, const std::string& out) {
  generate_dataset(out, g);
  ordered_json done;
  done["pairs"] = g.shapes * g.pairs_per_shape;
  done["sequence_frames"] = g.sequence_frames;
  done["out"] = out;
  std::cout << done.dump() << std::endl;
}

inline void run_train(const TrainCli& tc, const std::string& out,
                      std::uint64_t seed, int threads) {
  const DetectorKind kind = detector_kind_from(tc.detector);
  const auto records = load_pair_manifest(tc.dataset + "/manifest.jsonl");
  std::vector<TrainingPair> train, val;
  for (const PairRecord& rec : records) {
    if (rec.split == "test") continue;
    auto pair = make_training_pair(tc.dataset, rec, tc.detector_options,
                                   kind, threads);
    if (!pair) continue;
    (rec.split == "val" ? val : train).push_back(std::move(*pair));
  }
  if (train.empty())
    throw ValidationError("train: no usable training pairs in " +
                          tc.dataset);

  TrainConfig cfg;
  cfg.epochs = tc.epochs;
  cfg.batch_pairs = tc.batch_pairs;
  cfg.base_lr = tc.base_lr;
  cfg.lr_decay = tc.lr_decay;
  cfg.truth_noise = tc.truth_noise;
  cfg.seed = seed;

  Rng init(seed);
  DescriptorNet dnet(init);
  MatcherNet mnet(init);
  const TrainingRun run = train_pairs(dnet, mnet, train, val, cfg,
                                      out + "/metrics.csv", out);
  save_model_weights(out + "/weights.cfw", dnet, mnet);

  ordered_json done;
  done["train_pairs"] = train.size();
  done["val_pairs"] = val.size();
  done["epochs"] = tc.epochs;
  done["final_val_precision"] = run.final_val_precision;
  done["weights"] = out + "/weights.cfw";
  std::cout << done.dump() << std::endl;
}

inline void run_eval(const EvalCli& ec, const std::string& out,
                     std::uint64_t seed, int threads) {
  (void)seed;
  const DetectorKind kind = detector_kind_from(ec.detector);
  const auto records = load_pair_manifest(ec.dataset + "/manifest.jsonl");

  Rng init(0);
  DescriptorNet dnet(init);
  MatcherNet mnet(init);
  load_checked_model(ec.weights, dnet, mnet);

  // Match-quality records over the test split (all pairs if none is
  // marked test).
  std::vector<const PairRecord*> eval_set;
  for (const PairRecord& rec : records)
    if (rec.split == "test") eval_set.push_back(&rec);
  if (eval_set.empty())
    for (const PairRecord& rec : records) eval_set.push_back(&rec);

  std::vector<MatchEvalRecord> match_records;
  for (const PairRecord* rec : eval_set) {
    const SceneFrame frame_a = load_pair_frame(ec.dataset, *rec, false);
    const SceneFrame frame_b = load_pair_frame(ec.dataset, *rec, true);
    const KeypointSet kps_a =
        detect_by_kind(frame_a, rec->cam, kind, ec.detector_options, threads);
    const KeypointSet kps_b =
        detect_by_kind(frame_b, rec->cam, kind, ec.detector_options, threads);
    if (kps_a.size() == 0 || kps_b.size() == 0) continue;
    const FeatureField fa =
        describe(kps_a, rec->cam.width, rec->cam.height, dnet);
    const FeatureField fb =
        describe(kps_b, rec->cam.width, rec->cam.height, dnet);
    const MatchResult m = match(fa, fb, mnet);
    match_records.push_back(make_eval_record(kps_a, kps_b, frame_a.depth,
                                             frame_b.depth, rec->pose_ab(),
                                             rec->cam, m.scores));
  }
  if (match_records.empty())
    throw ValidationError("eval: no pair produced keypoints on both frames");

  ReportBundle bundle;
  const MatchEvalRecord pooled = pool_eval_records(match_records);
  bundle.headline = precision_recall_f1(pooled.truth, pooled.predicted);

  std::vector<double> all_scores;
  for (const MatchEvalRecord& rec : match_records)
    for (int i = 0; i < rec.scores.rows(); ++i)
      for (int j = 0; j < rec.scores.cols(); ++j)
        if (std::isfinite(rec.scores(i, j)))
          all_scores.push_back(rec.scores(i, j));
  std::sort(all_scores.begin(), all_scores.end());
  if (all_scores.empty())
    throw ValidationError("eval: no finite match scores to sweep");
  std::vector<double> thresholds;
  for (int q = 1; q <= 19; ++q) {
    const std::size_t index = std::min(
        all_scores.size() - 1, all_scores.size() * std::size_t(q) / 20);
    thresholds.push_back(all_scores[index]);
  }
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());
  thresholds.push_back(all_scores.back() + 1.0);  // empty-prediction end
  bundle.pr = pr_sweep(pooled.scores, pooled.truth, thresholds);
  bundle.pixel = pixel_error_curve(match_records, ec.lowe_ratio);

  // Budget table: precision/recall/F1 when each pair keeps its K best.
  std::ostringstream budgets_csv;
  budgets_csv << "budget,precision,recall,f1\n";
  budgets_csv << std::setprecision(17);
  for (const int k : ec.budgets) {
    MatchSelection sel;
    sel.criterion = MatchCriterion::kKBest;
    sel.k_best = k;
    long correct = 0, n_predicted = 0, n_truth = 0;
    for (const MatchEvalRecord& rec : match_records) {
      const Eigen::MatrixXi predicted = select_matches(rec.scores, sel);
      correct += (predicted.array() * rec.truth.array()).sum();
      n_predicted += predicted.sum();
      n_truth += rec.truth.sum();
    }
    const double p = n_predicted ? double(correct) / n_predicted : 0.0;
    const double r = n_truth ? double(correct) / n_truth : 0.0;
    budgets_csv << k << ',' << p << ',' << r << ','
                << (p + r > 0 ? 2 * p * r / (p + r) : 0.0) << "\n";
  }

  // Pose-bias experiment over the benchmark sequence, when one exists.
  std::string sequence_manifest = ec.bias_sequence;
  if (sequence_manifest.empty()) {
    const std::string candidate = ec.dataset + "/sequence/manifest.jsonl";
    if (std::filesystem::exists(candidate)) sequence_manifest = candidate;
  }
  std::vector<SceneFrame> sequence_frames;
  CameraModel sequence_cam;
  if (!sequence_manifest.empty()) {
    const std::string root =
        std::filesystem::path(sequence_manifest).parent_path().string();
    const auto seq_records = load_sequence_manifest(sequence_manifest);
    for (const SequenceFrameRecord& rec : seq_records)
      sequence_frames.push_back(load_sequence_frame(root, rec));
    if (!seq_records.empty()) sequence_cam = seq_records.front().cam;
  }
  if (sequence_frames.size() >= 2) {
    PipelineOptions shadow_opts;
    shadow_opts.detector = kind;
    shadow_opts.source = MatchSource::kTrainedModel;
    shadow_opts.detector_options = ec.detector_options;
    bundle.shadow_bias =
        bias_experiment(sequence_frames, sequence_cam, ec.bias_axis, &dnet,
                        &mnet, shadow_opts);
    PipelineOptions baseline_opts = shadow_opts;
    baseline_opts.detector = DetectorKind::kIntensityEdge;
    baseline_opts.source = MatchSource::kNearestKeypoint;
    baseline_opts.proximity_gate_px = ec.proximity_gate_px;
    bundle.baseline_bias =
        bias_experiment(sequence_frames, sequence_cam, ec.bias_axis, nullptr,
                        nullptr, baseline_opts);
  }

  // Runtime profile: prefer the sequence frames; otherwise chain the test
  // pairs' frames.
  std::vector<SceneFrame> profile_frames;
  CameraModel profile_cam = eval_set.front()->cam;
  if (sequence_frames.size() >= 2) {
    const std::size_t count = std::min(sequence_frames.size(),
                                       std::size_t(ec.runtime_pairs) + 1);
    profile_frames.assign(sequence_frames.begin(),
                          sequence_frames.begin() + count);
    profile_cam = sequence_cam;
  } else {
    for (const PairRecord* rec : eval_set) {
      if (profile_frames.size() > std::size_t(ec.runtime_pairs)) break;
      profile_frames.push_back(load_pair_frame(ec.dataset, *rec, false));
      profile_frames.push_back(load_pair_frame(ec.dataset, *rec, true));
    }
  }
  PipelineOptions profile_opts;
  profile_opts.detector = kind;
  profile_opts.source = MatchSource::kTrainedModel;
  profile_opts.detector_options = ec.detector_options;
  bundle.runtime = runtime_profile(profile_frames, profile_cam, &dnet, &mnet,
                                   profile_opts);

  write_report(out + "/report", bundle);
  write_text(out + "/report/budgets.csv", budgets_csv.str());

  ordered_json done;
  done["pairs_evaluated"] = match_records.size();
  done["precision"] = bundle.headline.precision;
  done["recall"] = bundle.headline.recall;
  done["f1"] = bundle.headline.f1;
  done["pr_auc"] = bundle.pr.auc;
  done["bias_valid"] = bundle.shadow_bias.valid;
  done["report"] = out + "/report";
  std::cout << done.dump() << std::endl;
}

inline void run_track(const TrackCli& tc, const std::string& out,
                      std::uint64_t seed, int threads) {
  const DetectorKind kind = detector_kind_from(tc.detector);
  Rng init(0);
  DescriptorNet dnet(init);
  MatcherNet mnet(init);
  load_checked_model(tc.weights, dnet, mnet);

  std::ifstream in(tc.sequence);
  if (!in) throw IoError("track: cannot open sequence manifest " + tc.sequence);
  const std::string root =
      std::filesystem::path(tc.sequence).parent_path().string();

  std::ofstream stream_out(out + "/track.jsonl");
  std::ofstream trajectory_out(out + "/trajectory.jsonl");
  if (!stream_out || !trajectory_out)
    throw IoError("track: cannot open outputs under " + out);

  // Streaming state: only the previous frame's detections stay resident.
  struct Cached {
    SequenceFrameRecord record;
    KeypointSet kps;
    FeatureField field;
  };
  std::optional<Cached> prev;
  Rotation3 cumulative_est, cumulative_truth;
  std::vector<double> rotation_errors;
  int frames = 0, pair_index = 0;

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw IoError("track: malformed JSON at " + tc.sequence + ":" +
                    std::to_string(line_no));
    SequenceFrameRecord rec;
    try {
      rec = sequence_record_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("track: bad record at " + tc.sequence + ":" +
                    std::to_string(line_no) + " (" + e.what() + ")");
    }
    const SceneFrame frame = load_sequence_frame(root, rec);
    ++frames;

    Cached current;
    current.record = rec;
    current.kps =
        detect_by_kind(frame, rec.cam, kind, tc.detector_options, threads);
    if (current.kps.size() > 0)
      current.field =
          describe(current.kps, rec.cam.width, rec.cam.height, dnet);

    if (!prev) {
      ordered_json start;
      start["frame"] = rec.frame;
      start["q_cum"] = quat_json(cumulative_est);
      start["q_cum_truth"] = quat_json(cumulative_truth);
      start["cum_error_rad"] = 0.0;
      trajectory_out << start.dump() << '\n';
      prev = std::move(current);
      continue;
    }

    const Rotation3 truth_rel =
        rec.pose.compose(prev->record.pose.inverse()).rotation;
    cumulative_truth = truth_rel * cumulative_truth;

    ordered_json row;
    row["pair"] = pair_index;
    row["frame_a"] = prev->record.frame;
    row["frame_b"] = rec.frame;
    bool ok = false, zero_parallax = false;
    std::string failure;
    PoseEstimate estimate;
    std::vector<Vec2> norm_a, norm_b;
    if (prev->kps.size() > 0 && current.kps.size() > 0) {
      const MatchResult m = match(prev->field, current.field, mnet);
      for (const auto& [i, k] : match_pairs(select_matches(m.scores, {}))) {
        norm_a.push_back(rec.cam.normalized_ray(prev->kps.points[i]).head<2>());
        norm_b.push_back(rec.cam.normalized_ray(current.kps.points[k]).head<2>());
      }
    }
    row["matches"] = norm_a.size();
    if (norm_a.size() < 5) {
      failure = "too few matches (" + std::to_string(norm_a.size()) + ")";
    } else {
      RansacOptions ransac;
      ransac.mean_focal = 0.5 * (rec.cam.fx + rec.cam.fy);
      ransac.seed = seed + std::uint64_t(pair_index);
      try {
        estimate = ransac_pose(norm_a, norm_b, ransac);
        ok = true;
      } catch (const NumericError& e) {
        failure = e.what();
        zero_parallax =
            failure.find("parallax") != std::string::npos;
      }
    }

    row["ok"] = ok;
    row["zero_parallax"] = zero_parallax;
    if (!failure.empty()) row["failure"] = failure;
    if (ok) {
      cumulative_est = estimate.pose.rotation * cumulative_est;
      const double rot_error =
          rotation_error(estimate.pose.rotation, truth_rel);
      rotation_errors.push_back(rot_error);
      row["low_confidence"] = estimate.low_confidence;
      row["inliers"] = std::count_if(estimate.inliers.begin(),
                                     estimate.inliers.end(),
                                     [](char c) { return c != 0; });
      row["inlier_ratio"] = estimate.inlier_ratio;
      row["q_rel"] = quat_json(estimate.pose.rotation);
      row["t_dir"] = {estimate.pose.translation.x(),
                      estimate.pose.translation.y(),
                      estimate.pose.translation.z()};
      row["rotation_error_rad"] = rot_error;
    }
    const std::string row_text = row.dump();
    stream_out << row_text << '\n';
    stream_out.flush();
    std::cout << row_text << std::endl;

    ordered_json traj;
    traj["frame"] = rec.frame;
    traj["q_cum"] = quat_json(cumulative_est);
    traj["q_cum_truth"] = quat_json(cumulative_truth);
    traj["cum_error_rad"] = cumulative_est.angle_to(cumulative_truth);
    trajectory_out << traj.dump() << '\n';
    trajectory_out.flush();

    ++pair_index;
    prev = std::move(current);
  }
  if (frames < 2)
    throw ValidationError("track: sequence needs at least 2 frames, got " +
                          std::to_string(frames));

  std::sort(rotation_errors.begin(), rotation_errors.end());
  ordered_json done;
  done["pairs"] = pair_index;
  done["solved"] = rotation_errors.size();
  if (!rotation_errors.empty()) {
    const std::size_t mid = rotation_errors.size() / 2;
    done["median_rotation_error_rad"] =
        rotation_errors.size() % 2
            ? rotation_errors[mid]
            : 0.5 * (rotation_errors[mid - 1] + rotation_errors[mid]);
  }
  done["track"] = out + "/track.jsonl";
  done["trajectory"] = out + "/trajectory.jsonl";
  std::cout << done.dump() << std::endl;
}

inline void run_inspect(const InspectCli& ic, const std::string& out,
                        int threads) {
  const DetectorKind kind = detector_kind_from(ic.detector);
  const auto records = load_pair_manifest(ic.dataset + "/manifest.jsonl");
  if (ic.pair < 0 || ic.pair >= int(records.size()))
    throw ValidationError("inspect: pair index " + std::to_string(ic.pair) +
                          " outside [0, " + std::to_string(records.size()) +
                          ")");
  const PairRecord& rec = records[ic.pair];

  Rng init(0);
  DescriptorNet dnet(init);
  MatcherNet mnet(init);
  load_checked_model(ic.weights, dnet, mnet);

  const SceneFrame frame_a = load_pair_frame(ic.dataset, rec, false);
  const SceneFrame frame_b = load_pair_frame(ic.dataset, rec, true);
  const KeypointSet kps_a =
      detect_by_kind(frame_a, rec.cam, kind, ic.detector_options, threads);
  const KeypointSet kps_b =
      detect_by_kind(frame_b, rec.cam, kind, ic.detector_options, threads);

  std::vector<std::pair<int, int>> pairs;
  Mat scores;
  FeatureField fa, fb;
  if (kps_a.size() > 0 && kps_b.size() > 0) {
    fa = describe(kps_a, rec.cam.width, rec.cam.height, dnet);
    fb = describe(kps_b, rec.cam.width, rec.cam.height, dnet);
    const MatchResult m = match(fa, fb, mnet);
    scores = m.scores;
    pairs = match_pairs(select_matches(m.scores, {}));
  }

  const auto keypoints_json = [](const KeypointSet& kps) {
    ordered_json list = ordered_json::array();
    for (std::size_t i = 0; i < kps.size(); ++i)
      list.push_back({{"x", kps.points[i].x()},
                      {"y", kps.points[i].y()},
                      {"shadow_px", kps.shadow_lengths[i]}});
    return list;
  };
  const auto descriptors_json = [](const FeatureField& field) {
    ordered_json rows = ordered_json::array();
    for (int i = 0; i < field.descriptors.rows(); ++i) {
      ordered_json row = ordered_json::array();
      for (int j = 0; j < field.descriptors.cols(); ++j)
        row.push_back(field.descriptors(i, j));
      rows.push_back(std::move(row));
    }
    return rows;
  };

  ordered_json dump;
  dump["pair"] = rec.pair;
  dump["split"] = rec.split;
  dump["rotation_deg"] = rec.rotation_deg;
  dump["keypoints_a"] = keypoints_json(kps_a);
  dump["keypoints_b"] = keypoints_json(kps_b);
  dump["descriptors_a"] = descriptors_json(fa);
  dump["descriptors_b"] = descriptors_json(fb);
  ordered_json matches = ordered_json::array();
  for (const auto& [i, j] : pairs)
    matches.push_back({{"a", i}, {"b", j}, {"score", scores(i, j)}});
  dump["matches"] = matches;
  write_text(out + "/inspect.json", dump.dump(2) + "\n");

  save_png(annotate_matches(frame_a.image, frame_b.image, kps_a, kps_b, pairs),
           out + "/inspect.png");

  ordered_json done;
  done["keypoints_a"] = kps_a.size();
  done["keypoints_b"] = kps_b.size();
  done["matches"] = pairs.size();
  done["json"] = out + "/inspect.json";
  done["image"] = out + "/inspect.png";
  std::cout << done.dump() << std::endl;
}

}  // namespace cli_detail

// ---- entry point ------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  using cli_detail::get_or;
  using nlohmann::json;
  using nlohmann::ordered_json;

  CLI::App app{
      "Shadow-aware keypoint detection, matching, and relative-pose "
      "estimation for rotating asteroids"};
  app.require_subcommand(1);

  std::string config_path, out_flag;
  std::uint64_t seed_flag = 0;
  int threads_flag = 1;
  const std::pair<const char*, const char*> subcommands[] = {
      {"gen", "Render a dataset of asteroid frame pairs"},
      {"train", "Train the descriptor and matcher networks"},
      {"eval", "Evaluate a trained model and write the report bundle"},
      {"track", "Stream relative poses over a rotation sequence"},
      {"inspect", "Dump keypoints, descriptors, and matches for one pair"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, description] : subcommands) {
    CLI::App* sub = app.add_subcommand(name, description);
    sub->add_option("--config", config_path, "JSON run configuration file")
        ->required();
    sub->add_option("--seed", seed_flag, "Override the config seed");
    sub->add_option("--threads", threads_flag,
                    "Worker threads for stages that support them");
    sub->add_option("--out", out_flag,
                    "Override the config output directory");
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  std::string active;
  for (const auto& [name, sub] : subs)
    if (app.got_subcommand(name)) active = name;

  try {
    json config;
    {
      std::ifstream in(config_path);
      if (!in) throw IoError("config: cannot open " + config_path);
      config = json::parse(in, nullptr, false);
      if (config.is_discarded())
        throw ValidationError("config: invalid JSON in " + config_path);
    }
    if (!config.is_object())
      throw ValidationError("config: top level must be an object");
    cli_detail::require_keys_known(config, "",
                                   {"schema_version", "seed", "threads",
                                    "out", "gen", "train", "eval", "track",
                                    "inspect"});
    if (!config.contains("schema_version"))
      throw ValidationError("config: schema_version is required");
    if (config.at("schema_version") != kConfigSchemaVersion)
      throw ValidationError(
          "config: unsupported schema_version (expected " +
          std::to_string(kConfigSchemaVersion) + ")");

    CLI::App* sub = subs.at(active);
    const std::uint64_t seed =
        sub->count("--seed") ? seed_flag
                             : get_or<std::uint64_t>(config, "seed", 7);
    const int threads =
        sub->count("--threads") ? threads_flag : get_or(config, "threads", 1);
    if (threads < 1)
      throw ValidationError("config: threads must be at least 1");
    const std::string out = sub->count("--out")
                                ? out_flag
                                : get_or<std::string>(config, "out", "");
    if (out.empty())
      throw ValidationError("config: 'out' (or --out) is required");

    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out);

    ordered_json resolved;
    resolved["schema_version"] = kConfigSchemaVersion;
    resolved["seed"] = seed;
    resolved["threads"] = threads;
    resolved["out"] = out;

    const json section =
        config.contains(active) ? config.at(active) : json::object();
    if (!section.is_object())
      throw ValidationError("config: '" + active + "' must be an object");

    if (active == "gen") {
      const GenConfig g = cli_detail::gen_config_from(section, seed);
      resolved["gen"] = cli_detail::gen_config_json(g);
      cli_detail::write_text(out + "/config.json", resolved.dump(2) + "\n");
      cli_detail::run_gen(g, out);
    } else if (active == "train") {
      const cli_detail::TrainCli t = cli_detail::train_config_from(section);
      resolved["train"] = cli_detail::train_config_json(t);
      cli_detail::write_text(out + "/config.json", resolved.dump(2) + "\n");
      cli_detail::run_train(t, out, seed, threads);
    } else if (active == "eval") {
      const cli_detail::EvalCli e = cli_detail::eval_config_from(section);
      resolved["eval"] = cli_detail::eval_config_json(e);
      cli_detail::write_text(out + "/config.json", resolved.dump(2) + "\n");
      cli_detail::run_eval(e, out, seed, threads);
    } else if (active == "track") {
      const cli_detail::TrackCli t = cli_detail::track_config_from(section);
      resolved["track"] = cli_detail::track_config_json(t);
      cli_detail::write_text(out + "/config.json", resolved.dump(2) + "\n");
      cli_detail::run_track(t, out, seed, threads);
    } else {
      const cli_detail::InspectCli i =
          cli_detail::inspect_config_from(section);
      resolved["inspect"] = cli_detail::inspect_config_json(i);
      cli_detail::write_text(out + "/config.json", resolved.dump(2) + "\n");
      cli_detail::run_inspect(i, out, threads);
    }
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "validation error: config: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

// Convenience wrapper for in-process invocation (tests): args exclude the
// program name.
inline int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("coffee");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace coffee
