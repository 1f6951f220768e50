#pragma once

// Network definitions for the matching pipeline.
//
// DescriptorNet lifts the single shadow-length channel of each keypoint cell
// into a 256-dimensional descriptor with a sparse submanifold ResNet: a stem
// convolution, four bottleneck blocks with two stride-2 downsampling stages
// between them, and two transpose convolutions back to full stride — 17
// sparse convolutional layers in total, each followed by batch
// normalization, plus a per-point linear head.  Because every layer is
// either submanifold, a recorded downsampling, or its exact transpose, the
// output coordinate set equals the input keypoint cell set.
//
// MatcherNet scores correspondences between two descriptor fields with
// alternating self- and cross-attention: self-attention exchanges
// information along same-image edges, cross-attention along cross-image
// edges.  The assignment head combines a dual softmax over rows and columns
// of the similarity matrix with learned per-point matchability, so each row
// and column of exp(S) carries at most unit probability mass; the deficit is
// the implicit unmatched bucket.
//
// Both networks are pure tape programs (see autodiff.hpp), so the training
// loss differentiates end to end through describe → match.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "coffee/autodiff.hpp"
#include "coffee/common.hpp"
#include "coffee/detector.hpp"
#include "coffee/sparse.hpp"

namespace coffee {

constexpr int kDescriptorDim = 256;
constexpr int kMatcherPosencHidden = 64;

// ---- descriptor layer schedule ---------------------------------------------

enum class SparseLayerKind { kSubmanifold, kStrided, kTranspose };

struct SparseLayerSpec {
  SparseLayerKind kind;
  int kernel;  // submanifold kernel size; strided/transpose layers are 2×2
  int cin;
  int cout;
};

// The complete convolution schedule, in execution order.  This table is the
// single authority on the layer stack: the network constructor, the layer
// count, and the model manifest all derive from it.  Bottleneck blocks
// compress channels by 4 (reduce 1×1 → spatial 3×3 → expand 1×1) around an
// additive skip.
inline const std::vector<SparseLayerSpec>& descriptor_layer_schedule() {
  using K = SparseLayerKind;
  static const std::vector<SparseLayerSpec> schedule = {
      {K::kSubmanifold, 3, 1, 32},    // stem
      {K::kSubmanifold, 1, 32, 8},    // block 1 reduce
      {K::kSubmanifold, 3, 8, 8},     // block 1 spatial
      {K::kSubmanifold, 1, 8, 32},    // block 1 expand
      {K::kStrided, 2, 32, 64},       // downsample to stride 2
      {K::kSubmanifold, 1, 64, 16},   // block 2 reduce
      {K::kSubmanifold, 3, 16, 16},   // block 2 spatial
      {K::kSubmanifold, 1, 16, 64},   // block 2 expand
      {K::kStrided, 2, 64, 128},      // downsample to stride 4
      {K::kSubmanifold, 1, 128, 32},  // block 3 reduce
      {K::kSubmanifold, 3, 32, 32},   // block 3 spatial
      {K::kSubmanifold, 1, 32, 128},  // block 3 expand
      {K::kSubmanifold, 1, 128, 32},  // block 4 reduce
      {K::kSubmanifold, 3, 32, 32},   // block 4 spatial
      {K::kSubmanifold, 1, 32, 128},  // block 4 expand
      {K::kTranspose, 2, 128, 128},   // back to stride 2
      {K::kTranspose, 2, 128, 128},   // back to stride 1
  };
  return schedule;
}

inline int descriptor_sparse_layer_count() {
  return static_cast<int>(descriptor_layer_schedule().size());
}

// ---- descriptor network ----------------------------------------------------

// Residual bottleneck: 1×1 reduce, 3×3 spatial, 1×1 expand, each with batch
// normalization; ReLU after the first two and after the skip addition.
struct BottleneckBlock {
  SubmanifoldConv reduce, spatial, expand;
  BatchNorm reduce_bn, spatial_bn, expand_bn;

  BottleneckBlock() = default;
  BottleneckBlock(const std::vector<SparseLayerSpec>& s, int first, Rng& rng)
      : reduce(s[first].kernel, s[first].cin, s[first].cout, rng),
        spatial(s[first + 1].kernel, s[first + 1].cin, s[first + 1].cout, rng),
        expand(s[first + 2].kernel, s[first + 2].cin, s[first + 2].cout, rng),
        reduce_bn(s[first].cout),
        spatial_bn(s[first + 1].cout),
        expand_bn(s[first + 2].cout) {}
};

struct DescriptorNet {
  SubmanifoldConv stem;
  BatchNorm stem_bn;
  BottleneckBlock block1;
  StridedConv down1;
  BatchNorm down1_bn;
  BottleneckBlock block2;
  StridedConv down2;
  BatchNorm down2_bn;
  BottleneckBlock block3;
  BottleneckBlock block4;
  TransposeConv up1;
  BatchNorm up1_bn;
  TransposeConv up2;
  BatchNorm up2_bn;
  Linear head;  // per-point projection to the descriptor dimension

  DescriptorNet() = default;
  explicit DescriptorNet(Rng& rng) {
    const std::vector<SparseLayerSpec>& s = descriptor_layer_schedule();
    stem = SubmanifoldConv(s[0].kernel, s[0].cin, s[0].cout, rng);
    stem_bn = BatchNorm(s[0].cout);
    block1 = BottleneckBlock(s, 1, rng);
    down1 = StridedConv(s[4].cin, s[4].cout, rng);
    down1_bn = BatchNorm(s[4].cout);
    block2 = BottleneckBlock(s, 5, rng);
    down2 = StridedConv(s[8].cin, s[8].cout, rng);
    down2_bn = BatchNorm(s[8].cout);
    block3 = BottleneckBlock(s, 9, rng);
    block4 = BottleneckBlock(s, 12, rng);
    up1 = TransposeConv(s[15].cin, s[15].cout, rng);
    up1_bn = BatchNorm(s[15].cout);
    up2 = TransposeConv(s[16].cin, s[16].cout, rng);
    up2_bn = BatchNorm(s[16].cout);
    head = Linear(s[16].cout, kDescriptorDim, rng);
  }
};

// Shadow lengths span orders of magnitude at grazing illumination, so the
// input channel is log-compressed relative to the image width.
inline double normalize_shadow_length(double shadow_len, int width) {
  return std::log1p(shadow_len / static_cast<double>(width));
}

// Per-keypoint descriptors plus the geometry the matcher consumes.
// Coordinates are normalized to [−1, 1]; with the image size stored
// alongside, the normalization is invertible.
struct FeatureField {
  Mat descriptors;              // n × kDescriptorDim
  Mat coords_norm;              // n × 2, (u, v) mapped to [−1, 1]
  Eigen::VectorXd shadow_norm;  // n, normalize_shadow_length per keypoint
  int width = 0;
  int height = 0;
  int frame_index = 0;

  int size() const { return static_cast<int>(descriptors.rows()); }

  void validate() const {
    if (coords_norm.rows() != descriptors.rows() ||
        shadow_norm.size() != descriptors.rows())
      throw ValidationError("feature field: parallel arrays differ in length");
    if (descriptors.rows() > 0 && descriptors.cols() != kDescriptorDim)
      throw ValidationError("feature field: descriptor dimension mismatch");
    if (coords_norm.rows() > 0 && coords_norm.cols() != 2)
      throw ValidationError("feature field: coordinates must be 2D");
    if (!descriptors.allFinite() || !coords_norm.allFinite() ||
        !shadow_norm.allFinite())
      throw ValidationError("feature field: non-finite entries");
    if (coords_norm.rows() > 0 &&
        (coords_norm.minCoeff() < -1.0 || coords_norm.maxCoeff() > 1.0))
      throw ValidationError("feature field: coordinates outside [-1, 1]");
  }
};

namespace detail {

inline int bottleneck_forward(Tape& t, const SparseGrid& g, int x,
                              BottleneckBlock& block, bool train) {
  int y = t.relu(t.batchnorm(submanifold_conv(t, g, x, block.reduce),
                             block.reduce_bn, train));
  y = t.relu(t.batchnorm(submanifold_conv(t, g, y, block.spatial),
                         block.spatial_bn, train));
  y = t.batchnorm(submanifold_conv(t, g, y, block.expand), block.expand_bn,
                  train);
  return t.relu(t.add(x, y));
}

}  // namespace detail

// Tape-level descriptor pass.  Keypoints landing in the same pixel cell
// average their input feature and share one descriptor row; `cell_of` maps
// each keypoint to its grid row and `keypoint_features` re-expands the
// per-cell output to one row per keypoint.
struct DescriptorGraph {
  SparseGrid grid;           // stride-1 keypoint cell set
  std::vector<int> cell_of;  // keypoint index → grid row
  int cell_features = -1;    // tape id, cells × kDescriptorDim
  int keypoint_features = -1;  // tape id, keypoints × kDescriptorDim
};

inline DescriptorGraph descriptor_forward(Tape& t, DescriptorNet& net,
                                          const KeypointSet& kps, int width,
                                          int height, bool train) {
  if (width <= 0 || height <= 0)
    throw ValidationError("descriptor: image extent must be positive");
  if (kps.size() == 0)
    throw ValidationError("descriptor: keypoint set must be non-empty");

  const int n = static_cast<int>(kps.size());
  DescriptorGraph out;
  out.cell_of.resize(n);
  std::unordered_map<int64_t, int> cell_index;
  cell_index.reserve(static_cast<size_t>(n));
  std::vector<std::array<int, 2>> cells;
  std::vector<double> cell_sum;
  std::vector<int> cell_count;
  for (int i = 0; i < n; ++i) {
    const int cu = std::clamp(static_cast<int>(std::floor(kps.points[i].x())),
                              0, width - 1);
    const int cv = std::clamp(static_cast<int>(std::floor(kps.points[i].y())),
                              0, height - 1);
    auto [it, inserted] = cell_index.emplace(
        SparseGrid::cell_key(cu, cv), static_cast<int>(cells.size()));
    if (inserted) {
      cells.push_back({cu, cv});
      cell_sum.push_back(0.0);
      cell_count.push_back(0);
    }
    out.cell_of[i] = it->second;
    cell_sum[it->second] += normalize_shadow_length(kps.shadow_lengths[i], width);
    cell_count[it->second] += 1;
  }

  Mat input(static_cast<int>(cells.size()), 1);
  for (int c = 0; c < input.rows(); ++c)
    input(c, 0) = cell_sum[c] / cell_count[c];

  out.grid.coords = cells;
  out.grid.values = input;
  out.grid.width = width;
  out.grid.height = height;
  out.grid.stride = 1;
  out.grid.validate();

  int x = t.constant(input);
  x = t.relu(t.batchnorm(submanifold_conv(t, out.grid, x, net.stem),
                         net.stem_bn, train));
  x = detail::bottleneck_forward(t, out.grid, x, net.block1, train);
  auto [g1, d1] = strided_sparse_conv(t, out.grid, x, net.down1);
  int y = t.relu(t.batchnorm(d1, net.down1_bn, train));
  y = detail::bottleneck_forward(t, g1, y, net.block2, train);
  auto [g2, d2] = strided_sparse_conv(t, g1, y, net.down2);
  int z = t.relu(t.batchnorm(d2, net.down2_bn, train));
  z = detail::bottleneck_forward(t, g2, z, net.block3, train);
  z = detail::bottleneck_forward(t, g2, z, net.block4, train);
  auto [g3, u1] = transpose_sparse_conv(t, g2, z, net.up1);
  int w = t.relu(t.batchnorm(u1, net.up1_bn, train));
  auto [g4, u2] = transpose_sparse_conv(t, g3, w, net.up2);
  w = t.relu(t.batchnorm(u2, net.up2_bn, train));

  // The transpose pair must land exactly back on the keypoint cell set.
  if (g4.coords != out.grid.coords || g4.stride != 1)
    throw ValidationError("descriptor: decoder did not restore the keypoint cells");

  out.cell_features = linear(t, w, net.head);

  Eigen::MatrixXi pick(n, 1);
  for (int i = 0; i < n; ++i) pick(i, 0) = out.cell_of[i];
  out.keypoint_features = t.gather_rows(out.cell_features, pick);
  return out;
}

// Geometry-only field: normalized coordinates and shadow lengths with an
// empty descriptor block.  This is the positional metadata consumed by the
// matcher; callers that run the descriptor network on a tape pair it with the
// live descriptor variables instead of the frozen copies from describe().
inline FeatureField keypoint_geometry(const KeypointSet& kps, int width,
                                      int height) {
  if (width <= 0 || height <= 0)
    throw ValidationError("keypoint_geometry: image extent must be positive");
  FeatureField f;
  f.width = width;
  f.height = height;
  f.frame_index = kps.frame_index;
  const int n = static_cast<int>(kps.size());
  f.descriptors = Mat::Zero(n, kDescriptorDim);
  f.coords_norm.resize(n, 2);
  f.shadow_norm.resize(n);
  for (int i = 0; i < n; ++i) {
    f.coords_norm(i, 0) = 2.0 * kps.points[i].x() / width - 1.0;
    f.coords_norm(i, 1) = 2.0 * kps.points[i].y() / height - 1.0;
    f.shadow_norm(i) = normalize_shadow_length(kps.shadow_lengths[i], width);
  }
  return f;
}

// Inference-mode description: runs the network with frozen batch statistics
// and returns plain values.  An empty keypoint set yields an empty field.
inline FeatureField describe(const KeypointSet& kps, int width, int height,
                             DescriptorNet& net) {
  FeatureField f = keypoint_geometry(kps, width, height);
  if (kps.size() == 0) return f;

  Tape t;
  const DescriptorGraph g = descriptor_forward(t, net, kps, width, height,
                                               /*train=*/false);
  f.descriptors = t.value(g.keypoint_features);
  f.validate();
  return f;
}

// ---- matcher network -------------------------------------------------------

// One round of message passing.  The self-attention unit is shared by both
// images and the cross-attention unit by both directions; together with
// messages computed from the pre-update states, this makes the whole
// matcher symmetric: swapping the input fields transposes the score matrix.
struct MatcherLayer {
  MultiHeadAttention self_attn;
  MultiHeadAttention cross_attn;
  Linear mlp_hidden;  // 3·dim → dim, on [state | self message | cross message]
  Linear mlp_out;     // dim → dim

  MatcherLayer() = default;
  MatcherLayer(int dim, int heads, Rng& rng)
      : self_attn(dim, heads, rng),
        cross_attn(dim, heads, rng),
        mlp_hidden(3 * dim, dim, rng),
        mlp_out(dim, dim, rng) {}
};

struct MatcherNet {
  int dim = kDescriptorDim;
  int heads = 4;
  Linear posenc_hidden;  // (centered u, centered v, shadow) → hidden
  Linear posenc_out;     // hidden → dim
  std::vector<MatcherLayer> layers;
  Linear head_proj;     // dim → dim similarity projection
  Linear matchability;  // dim → 1 per-point matchability logit

  MatcherNet() = default;
  explicit MatcherNet(Rng& rng, int dim = kDescriptorDim, int heads = 4,
                      int depth = 4)
      : dim(dim),
        heads(heads),
        posenc_hidden(3, kMatcherPosencHidden, rng),
        posenc_out(kMatcherPosencHidden, dim, rng),
        head_proj(dim, dim, rng),
        matchability(dim, 1, rng) {
    layers.reserve(static_cast<size_t>(depth));
    for (int i = 0; i < depth; ++i) layers.emplace_back(dim, heads, rng);
  }

  int depth() const { return static_cast<int>(layers.size()); }
};

// Log-score matrix and per-point log-matchabilities as tape variables.
struct MatchGraph {
  int scores = -1;          // nA × nB
  int matchability_a = -1;  // nA × 1, log σ
  int matchability_b = -1;  // nB × 1, log σ
};

namespace detail {

// Keypoint geometry enters through a small learned encoder.  Coordinates
// are centered on the set's centroid first, so translating every keypoint
// by the same offset leaves the encoding unchanged.
inline int positional_encoding(Tape& t, MatcherNet& net,
                               const FeatureField& f) {
  Mat enc(f.size(), 3);
  const Eigen::RowVector2d centroid = f.coords_norm.colwise().mean();
  enc.col(0) = f.coords_norm.col(0).array() - centroid(0);
  enc.col(1) = f.coords_norm.col(1).array() - centroid(1);
  enc.col(2) = f.shadow_norm;
  return linear(t, t.relu(linear(t, t.constant(enc), net.posenc_hidden)),
                net.posenc_out);
}

}  // namespace detail

// Tape-level matcher pass.  `desc_a`/`desc_b` are tape variables holding the
// two descriptor matrices (constants at inference, live descriptor-network
// outputs during training); the fields supply coordinates and shadow
// lengths.
inline MatchGraph matcher_forward(Tape& t, MatcherNet& net, int desc_a,
                                  const FeatureField& meta_a, int desc_b,
                                  const FeatureField& meta_b) {
  if (meta_a.size() == 0 || meta_b.size() == 0)
    throw ValidationError("match: both keypoint sets must be non-empty");
  if (t.value(desc_a).cols() != net.dim || t.value(desc_b).cols() != net.dim)
    throw ValidationError("match: descriptor dimension must equal model dimension");
  if (t.value(desc_a).rows() != meta_a.size() ||
      t.value(desc_b).rows() != meta_b.size())
    throw ValidationError("match: descriptor count must equal keypoint count");

  int xa = t.add(desc_a, detail::positional_encoding(t, net, meta_a));
  int xb = t.add(desc_b, detail::positional_encoding(t, net, meta_b));
  for (MatcherLayer& layer : net.layers) {
    // All four messages read the pre-update states; updating either side
    // first would break the swap symmetry of the result.
    const int sa = multi_head_attention(t, xa, xa, xa, layer.self_attn);
    const int sb = multi_head_attention(t, xb, xb, xb, layer.self_attn);
    const int ca = multi_head_attention(t, xa, xb, xb, layer.cross_attn);
    const int cb = multi_head_attention(t, xb, xa, xa, layer.cross_attn);
    const int ua = linear(
        t, t.relu(linear(t, t.hstack(t.hstack(xa, sa), ca), layer.mlp_hidden)),
        layer.mlp_out);
    const int ub = linear(
        t, t.relu(linear(t, t.hstack(t.hstack(xb, sb), cb), layer.mlp_hidden)),
        layer.mlp_out);
    xa = t.add(xa, ua);
    xb = t.add(xb, ub);
  }

  const int pa = linear(t, xa, net.head_proj);
  const int pb = linear(t, xb, net.head_proj);
  const int sim =
      t.scale(t.matmul_nt(pa, pb), 1.0 / std::sqrt(static_cast<double>(net.dim)));

  MatchGraph g;
  g.matchability_a = t.log_sigmoid(linear(t, xa, net.matchability));
  g.matchability_b = t.log_sigmoid(linear(t, xb, net.matchability));
  // exp(S)ᵢⱼ = σᵃᵢ · σᵇⱼ · softmax_rows(sim)ᵢⱼ · softmax_cols(sim)ᵢⱼ, so
  // every row and column sums to at most one.
  g.scores = t.add_colvec(
      t.add_rowvec(t.add(t.log_softmax_rows(sim), t.log_softmax_cols(sim)),
                   t.transpose(g.matchability_b)),
      g.matchability_a);
  return g;
}

struct MatchResult {
  Mat scores;                      // nA × nB log-scores
  Eigen::VectorXd matchability_a;  // per-point match probability, (0, 1)
  Eigen::VectorXd matchability_b;
};

inline MatchResult match(const FeatureField& a, const FeatureField& b,
                         MatcherNet& net) {
  Tape t;
  const MatchGraph g = matcher_forward(t, net, t.constant(a.descriptors), a,
                                       t.constant(b.descriptors), b);
  MatchResult r;
  r.scores = t.value(g.scores);
  r.matchability_a = t.value(g.matchability_a).col(0).array().exp();
  r.matchability_b = t.value(g.matchability_b).col(0).array().exp();
  return r;
}

// ---- match selection -------------------------------------------------------

enum class MatchCriterion { kThreshold, kRowMax, kKBest };

struct MatchSelection {
  MatchCriterion criterion = MatchCriterion::kRowMax;
  double score_threshold = 0.2;  // probability floor (kThreshold only)
  int k_best = 100;              // budget (kKBest only)
  // Discard a candidate whose runner-up in the row is at least this fraction
  // of the best probability; 1.0 keeps everything except exact ties.
  double lowe_ratio = 0.9;
};

// Selects hard 0/1 matches from a log-score matrix.  Candidates are the
// mutually-best pairs (row argmax that is also the column argmax) surviving
// the ratio test, which bounds the result to one match per row and column;
// the criterion then keeps all of them (row-max), those above a probability
// threshold, or the K strongest.
inline Eigen::MatrixXi select_matches(const Mat& scores,
                                      const MatchSelection& sel) {
  if (!(sel.score_threshold > 0.0 && sel.score_threshold <= 1.0))
    throw ValidationError("match selection: threshold must be in (0, 1]");
  if (!(sel.lowe_ratio > 0.0 && sel.lowe_ratio <= 1.0))
    throw ValidationError("match selection: ratio must be in (0, 1]");
  if (sel.k_best < 0)
    throw ValidationError("match selection: budget must be non-negative");

  const int na = static_cast<int>(scores.rows());
  const int nb = static_cast<int>(scores.cols());
  Eigen::MatrixXi m = Eigen::MatrixXi::Zero(na, nb);
  if (na == 0 || nb == 0) return m;

  std::vector<int> row_best(na), col_best(nb);
  for (int i = 0; i < na; ++i) {
    int best = 0;
    for (int j = 1; j < nb; ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    row_best[i] = best;
  }
  for (int j = 0; j < nb; ++j) {
    int best = 0;
    for (int i = 1; i < na; ++i)
      if (scores(i, j) > scores(best, j)) best = i;
    col_best[j] = best;
  }

  struct Candidate {
    double score;
    int i, j;
  };
  std::vector<Candidate> candidates;
  for (int i = 0; i < na; ++i) {
    const int j = row_best[i];
    if (col_best[j] != i) continue;
    if (nb >= 2) {
      double second = -std::numeric_limits<double>::infinity();
      for (int jj = 0; jj < nb; ++jj)
        if (jj != j) second = std::max(second, scores(i, jj));
      if (second - scores(i, j) >= std::log(sel.lowe_ratio)) continue;
    }
    candidates.push_back({scores(i, j), i, j});
  }

  switch (sel.criterion) {
    case MatchCriterion::kRowMax:
      for (const Candidate& c : candidates) m(c.i, c.j) = 1;
      break;
    case MatchCriterion::kThreshold: {
      const double floor_log = std::log(sel.score_threshold);
      for (const Candidate& c : candidates)
        if (c.score >= floor_log) m(c.i, c.j) = 1;
      break;
    }
    case MatchCriterion::kKBest: {
      std::sort(candidates.begin(), candidates.end(),
                [](const Candidate& a, const Candidate& b) {
                  if (a.score != b.score) return a.score > b.score;
                  if (a.i != b.i) return a.i < b.i;
                  return a.j < b.j;
                });
      const int keep =
          std::min(sel.k_best, static_cast<int>(candidates.size()));
      for (int c = 0; c < keep; ++c) m(candidates[c].i, candidates[c].j) = 1;
      break;
    }
  }
  return m;
}

inline std::vector<std::pair<int, int>> match_pairs(const Eigen::MatrixXi& m) {
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      if (m(i, j) != 0) pairs.emplace_back(i, j);
  return pairs;
}

// ---- named tensors and serialization ---------------------------------------

namespace detail {

using NamedTensors = std::vector<std::pair<std::string, Parameter*>>;

template <class Layer>
inline void add_weights_bias(NamedTensors& out, const std::string& prefix,
                             Layer& layer) {
  out.emplace_back(prefix + ".weights", &layer.weights);
  out.emplace_back(prefix + ".bias", &layer.bias);
}

inline void add_batchnorm(NamedTensors& out, const std::string& prefix,
                          BatchNorm& bn) {
  out.emplace_back(prefix + ".gamma", &bn.gamma);
  out.emplace_back(prefix + ".beta", &bn.beta);
  out.emplace_back(prefix + ".running_mean", &bn.running_mean);
  out.emplace_back(prefix + ".running_var", &bn.running_var);
}

inline void add_bottleneck(NamedTensors& out, const std::string& prefix,
                           BottleneckBlock& b) {
  add_weights_bias(out, prefix + ".reduce", b.reduce);
  add_batchnorm(out, prefix + ".reduce_bn", b.reduce_bn);
  add_weights_bias(out, prefix + ".spatial", b.spatial);
  add_batchnorm(out, prefix + ".spatial_bn", b.spatial_bn);
  add_weights_bias(out, prefix + ".expand", b.expand);
  add_batchnorm(out, prefix + ".expand_bn", b.expand_bn);
}

inline void add_attention(NamedTensors& out, const std::string& prefix,
                          MultiHeadAttention& att) {
  out.emplace_back(prefix + ".wq", &att.wq);
  out.emplace_back(prefix + ".wk", &att.wk);
  out.emplace_back(prefix + ".wv", &att.wv);
  out.emplace_back(prefix + ".wo", &att.wo);
  out.emplace_back(prefix + ".bq", &att.bq);
  out.emplace_back(prefix + ".bk", &att.bk);
  out.emplace_back(prefix + ".bv", &att.bv);
  out.emplace_back(prefix + ".bo", &att.bo);
}

}  // namespace detail

inline detail::NamedTensors named_tensors(DescriptorNet& net) {
  detail::NamedTensors out;
  detail::add_weights_bias(out, "descriptor.stem", net.stem);
  detail::add_batchnorm(out, "descriptor.stem_bn", net.stem_bn);
  detail::add_bottleneck(out, "descriptor.block1", net.block1);
  detail::add_weights_bias(out, "descriptor.down1", net.down1);
  detail::add_batchnorm(out, "descriptor.down1_bn", net.down1_bn);
  detail::add_bottleneck(out, "descriptor.block2", net.block2);
  detail::add_weights_bias(out, "descriptor.down2", net.down2);
  detail::add_batchnorm(out, "descriptor.down2_bn", net.down2_bn);
  detail::add_bottleneck(out, "descriptor.block3", net.block3);
  detail::add_bottleneck(out, "descriptor.block4", net.block4);
  detail::add_weights_bias(out, "descriptor.up1", net.up1);
  detail::add_batchnorm(out, "descriptor.up1_bn", net.up1_bn);
  detail::add_weights_bias(out, "descriptor.up2", net.up2);
  detail::add_batchnorm(out, "descriptor.up2_bn", net.up2_bn);
  detail::add_weights_bias(out, "descriptor.head", net.head);
  return out;
}

inline detail::NamedTensors named_tensors(MatcherNet& net) {
  detail::NamedTensors out;
  detail::add_weights_bias(out, "matcher.posenc_hidden", net.posenc_hidden);
  detail::add_weights_bias(out, "matcher.posenc_out", net.posenc_out);
  for (size_t i = 0; i < net.layers.size(); ++i) {
    const std::string prefix = "matcher.layer" + std::to_string(i);
    detail::add_attention(out, prefix + ".self_attn", net.layers[i].self_attn);
    detail::add_attention(out, prefix + ".cross_attn",
                          net.layers[i].cross_attn);
    detail::add_weights_bias(out, prefix + ".mlp_hidden",
                             net.layers[i].mlp_hidden);
    detail::add_weights_bias(out, prefix + ".mlp_out", net.layers[i].mlp_out);
  }
  detail::add_weights_bias(out, "matcher.head_proj", net.head_proj);
  detail::add_weights_bias(out, "matcher.matchability", net.matchability);
  return out;
}

inline detail::NamedTensors named_tensors(DescriptorNet& d, MatcherNet& m) {
  detail::NamedTensors out = named_tensors(d);
  detail::NamedTensors mm = named_tensors(m);
  out.insert(out.end(), mm.begin(), mm.end());
  return out;
}

inline std::vector<Parameter*> trainable_parameters(DescriptorNet& d,
                                                    MatcherNet& m) {
  std::vector<Parameter*> out;
  for (auto& [name, p] : named_tensors(d, m))
    if (p->trainable) out.push_back(p);
  return out;
}

inline void save_model_weights(const std::string& path, DescriptorNet& d,
                               MatcherNet& m) {
  const detail::NamedTensors named = named_tensors(d, m);
  save_weights(path, std::vector<std::pair<std::string, const Parameter*>>(
                         named.begin(), named.end()));
}

inline void load_model_weights(const std::string& path, DescriptorNet& d,
                               MatcherNet& m) {
  load_weights(path, named_tensors(d, m));
}

// ---- model manifest --------------------------------------------------------

// The manifest records the layer schedule and hyperparameters next to the
// weights, so a weight file is never interpreted against the wrong
// architecture.

constexpr int kModelManifestSchemaVersion = 1;

inline nlohmann::json model_manifest(const DescriptorNet& d,
                                     const MatcherNet& m) {
  nlohmann::json schedule = nlohmann::json::array();
  for (const SparseLayerSpec& s : descriptor_layer_schedule()) {
    const char* kind = s.kind == SparseLayerKind::kSubmanifold ? "submanifold"
                       : s.kind == SparseLayerKind::kStrided   ? "strided"
                                                               : "transpose";
    schedule.push_back({{"kind", kind},
                        {"kernel", s.kernel},
                        {"in", s.cin},
                        {"out", s.cout}});
  }
  return nlohmann::json{
      {"schema_version", kModelManifestSchemaVersion},
      {"descriptor",
       {{"sparse_layers", descriptor_sparse_layer_count()},
        {"descriptor_dim", static_cast<int>(d.head.weights.value.cols())},
        {"layer_schedule", schedule}}},
      {"matcher",
       {{"dim", m.dim}, {"heads", m.heads}, {"layers", m.depth()}}}};
}

inline void save_model_manifest(const std::string& path,
                                const DescriptorNet& d, const MatcherNet& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open model manifest for writing: " + path);
  out << model_manifest(d, m).dump(2) << "\n";
  if (!out) throw IoError("failed writing model manifest: " + path);
}

inline nlohmann::json load_model_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model manifest: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("model manifest is not valid JSON: " + path + ": " +
                  e.what());
  }
}

// Verifies that a loaded manifest describes exactly these networks.
inline void check_model_manifest(const nlohmann::json& manifest,
                                 const DescriptorNet& d, const MatcherNet& m) {
  if (!manifest.contains("schema_version") ||
      manifest["schema_version"] != kModelManifestSchemaVersion)
    throw ValidationError("model manifest: unsupported schema version");
  const nlohmann::json expected = model_manifest(d, m);
  if (manifest != expected) {
    for (const auto& [key, value] : expected.items()) {
      if (!manifest.contains(key) || manifest[key] != value)
        throw ValidationError("model manifest: mismatch in \"" + key + "\"");
    }
    throw ValidationError("model manifest: unexpected extra fields");
  }
}

}  // namespace coffee
