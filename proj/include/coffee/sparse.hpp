#pragma once

// Sparse 2D feature grids over keypoint cells, and the convolutions that
// operate on them without densifying: submanifold convolution (output
// support = input support), stride-2 downsampling convolution (children
// merge into parent cells, union semantics), and its transpose (restores
// the exact coordinate set recorded by the matching downsampling layer).
//
// Every convolution reduces to one row-gather with a precomputed integer
// tap table followed by a dense matmul + bias, so the autodiff tape differs
// through all of them with the same two backward rules. Tap tables are
// built from a hash map once per coordinate set and cached on the grid, so
// a stack of layers at one stride shares a single lookup pass.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "coffee/autodiff.hpp"

namespace coffee {

struct SparseGrid {
  // Occupied cells (u, v), unique, expressed at this grid's stride: cell
  // (u, v) covers pixels [u·stride, (u+1)·stride) × [v·stride, ...).
  std::vector<std::array<int, 2>> coords;
  Mat values;  // coords.size() × channels
  int width = 0;   // full-resolution extent in pixels
  int height = 0;
  int stride = 1;  // power of two

  // Recorded by strided_sparse_conv so a later transpose convolution can
  // restore the pre-downsampling coordinate set exactly.
  struct DownRecord {
    std::vector<std::array<int, 2>> fine_coords;
    int fine_stride = 1;
    Eigen::MatrixXi up_table;  // fine_coords.size() × 4, see child_tap()
    std::shared_ptr<const DownRecord> fine_down_record;
  };
  std::shared_ptr<const DownRecord> down_record;

  int cells_x() const { return (width + stride - 1) / stride; }
  int cells_y() const { return (height + stride - 1) / stride; }
  int size() const { return static_cast<int>(coords.size()); }
  int channels() const { return static_cast<int>(values.cols()); }

  void validate() const {
    if (width <= 0 || height <= 0) {
      throw ValidationError("sparse grid: extent must be positive");
    }
    if (stride < 1 || (stride & (stride - 1)) != 0) {
      throw ValidationError("sparse grid: stride must be a power of two");
    }
    if (values.rows() != static_cast<int>(coords.size())) {
      throw ValidationError("sparse grid: value rows must equal coordinate count");
    }
    std::unordered_map<int64_t, int> seen;
    seen.reserve(coords.size());
    for (const auto& c : coords) {
      if (c[0] < 0 || c[0] >= cells_x() || c[1] < 0 || c[1] >= cells_y()) {
        throw ValidationError("sparse grid: coordinate outside extent");
      }
      if (!seen.emplace(cell_key(c[0], c[1]), 1).second) {
        throw ValidationError("sparse grid: duplicate coordinate");
      }
    }
  }

  // k×k neighbor tap table for submanifold convolution: row i, tap
  // t = (dv+r)·k + (du+r) holds the row index of coordinate
  // (uᵢ+du, vᵢ+dv), or −1 when that cell is unoccupied. The center tap is
  // t = (k²−1)/2. Built once per k and cached.
  const Eigen::MatrixXi& neighbor_table(int k) const {
    if (k < 1 || k % 2 == 0) {
      throw ValidationError("sparse grid: kernel size must be odd and positive");
    }
    auto it = neighbor_cache.find(k);
    if (it != neighbor_cache.end()) return *it->second;
    const auto& index = coord_index();
    const int r = k / 2;
    auto table = std::make_shared<Eigen::MatrixXi>(size(), k * k);
    table->setConstant(-1);
    for (int i = 0; i < size(); ++i) {
      for (int dv = -r; dv <= r; ++dv) {
        for (int du = -r; du <= r; ++du) {
          const auto hit = index.find(cell_key(coords[i][0] + du, coords[i][1] + dv));
          if (hit != index.end()) {
            (*table)(i, (dv + r) * k + (du + r)) = hit->second;
          }
        }
      }
    }
    neighbor_cache.emplace(k, table);
    return *table;
  }

  static int64_t cell_key(int u, int v) {
    return (static_cast<int64_t>(u) << 32) ^
           static_cast<int64_t>(static_cast<uint32_t>(v));
  }
  // Position of a fine cell within its 2×2 parent block.
  static int child_tap(int u, int v) { return (v & 1) * 2 + (u & 1); }

  const std::unordered_map<int64_t, int>& coord_index() const {
    if (!index_cache) {
      auto map = std::make_shared<std::unordered_map<int64_t, int>>();
      map->reserve(coords.size());
      for (int i = 0; i < size(); ++i) {
        map->emplace(cell_key(coords[i][0], coords[i][1]), i);
      }
      index_cache = std::move(map);
    }
    return *index_cache;
  }

  // Lazily built lookup structures; rebuilt from scratch on copies.
  mutable std::map<int, std::shared_ptr<const Eigen::MatrixXi>> neighbor_cache;
  mutable std::shared_ptr<const std::unordered_map<int64_t, int>> index_cache;
};

// ---- layer parameter blocks -----------------------------------------------

// k×k submanifold convolution weights. Row block t·cin..(t+1)·cin of
// `weights` multiplies the neighbor at tap t (layout per neighbor_table).
struct SubmanifoldConv {
  int k = 3;
  int cin = 0, cout = 0;
  Parameter weights;  // (k·k·cin) × cout
  Parameter bias;     // 1 × cout

  SubmanifoldConv() = default;
  SubmanifoldConv(int k, int cin, int cout, Rng& rng)
      : k(k),
        cin(cin),
        cout(cout),
        weights(k * k * cin, cout, std::sqrt(2.0 / (k * k * cin)), rng),
        bias(Mat::Zero(1, cout)) {
    if (k < 1 || k % 2 == 0) {
      throw ValidationError("submanifold conv: kernel size must be odd");
    }
  }
  std::vector<Parameter*> parameters() { return {&weights, &bias}; }
};

// 2×2 stride-2 downsampling convolution: each parent cell gathers its (up
// to four) occupied children; weight row block t·cin covers child tap t.
struct StridedConv {
  int cin = 0, cout = 0;
  Parameter weights;  // (4·cin) × cout
  Parameter bias;     // 1 × cout

  StridedConv() = default;
  StridedConv(int cin, int cout, Rng& rng)
      : cin(cin),
        cout(cout),
        weights(4 * cin, cout, std::sqrt(2.0 / (4 * cin)), rng),
        bias(Mat::Zero(1, cout)) {}
  std::vector<Parameter*> parameters() { return {&weights, &bias}; }
};

// Transpose of the stride-2 convolution: each restored fine cell reads its
// parent coarse cell through the weight block of its child tap.
struct TransposeConv {
  int cin = 0, cout = 0;
  Parameter weights;  // (4·cin) × cout
  Parameter bias;     // 1 × cout

  TransposeConv() = default;
  TransposeConv(int cin, int cout, Rng& rng)
      : cin(cin),
        cout(cout),
        weights(4 * cin, cout, std::sqrt(2.0 / cin), rng),
        bias(Mat::Zero(1, cout)) {}
  std::vector<Parameter*> parameters() { return {&weights, &bias}; }
};

// ---- tape operations -------------------------------------------------------

namespace detail {
inline void check_channels(const Tape& t, int values_var, int cin, const char* op) {
  if (t.value(values_var).cols() != cin) {
    throw ValidationError(std::string(op) + ": input channel count mismatch");
  }
}
}  // namespace detail

// Output geometry is the input geometry (submanifold property); returns the
// tape id of the output values.
inline int submanifold_conv(Tape& t, const SparseGrid& g, int values_var,
                            SubmanifoldConv& layer) {
  detail::check_channels(t, values_var, layer.cin, "submanifold conv");
  if (t.value(values_var).rows() != g.size()) {
    throw ValidationError("submanifold conv: value rows must equal coordinate count");
  }
  const int gathered = t.gather_rows(values_var, g.neighbor_table(layer.k));
  return t.add_rowvec(t.matmul(gathered, t.leaf(layer.weights)),
                      t.leaf(layer.bias));
}

// Downsamples to stride·2. Output coordinates are the distinct parent cells
// of the input coordinates, in first-child order; the output grid records
// the input coordinate set for a later transpose convolution.
inline std::pair<SparseGrid, int> strided_sparse_conv(Tape& t,
                                                      const SparseGrid& g,
                                                      int values_var,
                                                      StridedConv& layer) {
  detail::check_channels(t, values_var, layer.cin, "strided conv");
  if (t.value(values_var).rows() != g.size()) {
    throw ValidationError("strided conv: value rows must equal coordinate count");
  }
  std::unordered_map<int64_t, int> parent_index;
  parent_index.reserve(g.coords.size());
  std::vector<std::array<int, 2>> parents;
  Eigen::MatrixXi down_table;  // filled after the parent count is known
  std::vector<std::array<int, 4>> taps;
  auto record = std::make_shared<SparseGrid::DownRecord>();
  record->fine_coords = g.coords;
  record->fine_stride = g.stride;
  record->fine_down_record = g.down_record;
  record->up_table = Eigen::MatrixXi::Constant(g.size(), 4, -1);
  for (int i = 0; i < g.size(); ++i) {
    const int pu = g.coords[i][0] / 2, pv = g.coords[i][1] / 2;
    auto [it, inserted] =
        parent_index.emplace(SparseGrid::cell_key(pu, pv),
                             static_cast<int>(parents.size()));
    if (inserted) {
      parents.push_back({pu, pv});
      taps.push_back({-1, -1, -1, -1});
    }
    const int p = it->second;
    const int tap = SparseGrid::child_tap(g.coords[i][0], g.coords[i][1]);
    taps[p][tap] = i;
    record->up_table(i, tap) = p;
  }
  down_table.resize(static_cast<int>(parents.size()), 4);
  for (int p = 0; p < static_cast<int>(parents.size()); ++p) {
    for (int tap = 0; tap < 4; ++tap) down_table(p, tap) = taps[p][tap];
  }

  const int gathered = t.gather_rows(values_var, down_table);
  const int out = t.add_rowvec(t.matmul(gathered, t.leaf(layer.weights)),
                               t.leaf(layer.bias));
  SparseGrid result;
  result.coords = std::move(parents);
  result.values = t.value(out);
  result.width = g.width;
  result.height = g.height;
  result.stride = g.stride * 2;
  result.down_record = std::move(record);
  return {std::move(result), out};
}

// Upsamples back to the coordinate set recorded by the matching
// downsampling layer. Requires that record; a grid that was not produced by
// strided_sparse_conv cannot be transposed.
inline std::pair<SparseGrid, int> transpose_sparse_conv(Tape& t,
                                                        const SparseGrid& g,
                                                        int values_var,
                                                        TransposeConv& layer) {
  detail::check_channels(t, values_var, layer.cin, "transpose conv");
  if (t.value(values_var).rows() != g.size()) {
    throw ValidationError("transpose conv: value rows must equal coordinate count");
  }
  if (!g.down_record) {
    throw ValidationError(
        "transpose conv: grid has no recorded downsampling coordinate set");
  }
  const SparseGrid::DownRecord& record = *g.down_record;
  const int gathered = t.gather_rows(values_var, record.up_table);
  const int out = t.add_rowvec(t.matmul(gathered, t.leaf(layer.weights)),
                               t.leaf(layer.bias));
  SparseGrid result;
  result.coords = record.fine_coords;
  result.values = t.value(out);
  result.width = g.width;
  result.height = g.height;
  result.stride = record.fine_stride;
  result.down_record = record.fine_down_record;
  return {std::move(result), out};
}

// ---- forward-only conveniences --------------------------------------------

inline SparseGrid submanifold_conv(const SparseGrid& g, SubmanifoldConv& layer) {
  Tape t;
  const int out = submanifold_conv(t, g, t.constant(g.values), layer);
  SparseGrid result = g;
  result.values = t.value(out);
  return result;
}

inline SparseGrid strided_sparse_conv(const SparseGrid& g, StridedConv& layer) {
  Tape t;
  auto [result, out] = strided_sparse_conv(t, g, t.constant(g.values), layer);
  (void)out;
  return result;
}

inline SparseGrid transpose_sparse_conv(const SparseGrid& g, TransposeConv& layer) {
  Tape t;
  auto [result, out] = transpose_sparse_conv(t, g, t.constant(g.values), layer);
  (void)out;
  return result;
}

}  // namespace coffee
