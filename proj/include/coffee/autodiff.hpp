#pragma once

// Reverse-mode automatic differentiation over dense real matrices: a flat
// tape of values with an explicit backward rule per operation, plus the
// parameter container, batch normalization, multi-head attention, Adam
// optimizer, and weight serialization the descriptor and matcher networks
// are built from.
//
// Concurrency: a tape belongs to one thread. Independent samples may run
// forward/backward concurrently on separate tapes only if they do not share
// trainable parameters (backward accumulates into Parameter::grad without
// locking); optimizer steps are single-threaded.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "coffee/common.hpp"

namespace coffee {

using Mat = Eigen::MatrixXd;

// A trainable (or frozen) tensor with a gradient of identical shape.
struct Parameter {
  Mat value;
  Mat grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Mat v)
      : value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}
  Parameter(int rows, int cols, double stddev, Rng& rng)
      : value(rows, cols), grad(Mat::Zero(rows, cols)) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) value(r, c) = stddev * rng.gaussian();
  }

  int rows() const { return static_cast<int>(value.rows()); }
  int cols() const { return static_cast<int>(value.cols()); }
  void zero_grad() { grad.setZero(); }
};

// Batch normalization state over rows (each row one sample, each column one
// channel). Train mode normalizes with batch statistics and updates the
// running estimates as a side effect; eval mode is a fixed affine map.
struct BatchNorm {
  Parameter gamma;  // 1 × C
  Parameter beta;   // 1 × C
  // Running statistics are non-trainable parameters so they serialize with
  // the weights (eval mode depends on them).
  Parameter running_mean;  // 1 × C
  Parameter running_var;   // 1 × C
  double momentum = 0.1;
  // Small enough that a unit-variance batch stays normalized within 1e-6.
  double eps = 1e-8;

  BatchNorm() = default;
  explicit BatchNorm(int channels)
      : gamma(Mat::Ones(1, channels)),
        beta(Mat::Zero(1, channels)),
        running_mean(Mat::Zero(1, channels)),
        running_var(Mat::Ones(1, channels)) {
    running_mean.trainable = false;
    running_var.trainable = false;
  }
  std::vector<Parameter*> parameters() { return {&gamma, &beta}; }
  std::vector<Parameter*> all_tensors() {
    return {&gamma, &beta, &running_mean, &running_var};
  }
};

// Flat computation tape. Node ids are indices into construction order, so a
// single reverse sweep visits every node after all of its consumers.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  int size() const { return static_cast<int>(nodes_.size()); }
  const Mat& value(int id) const { return nodes_.at(id).value; }
  const Mat& grad(int id) const { return nodes_.at(id).grad; }
  bool needs_grad(int id) const { return nodes_.at(id).needs_grad; }

  // Adds `g` to the cotangent accumulated at `id` (no-op for nodes outside
  // the differentiated subgraph).
  void accumulate(int id, const Mat& g) {
    Node& n = nodes_.at(id);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      if (n.grad.rows() != g.rows() || n.grad.cols() != g.cols()) {
        throw ValidationError("tape: cotangent shape mismatch");
      }
      n.grad += g;
    }
  }

  void backward(int loss) {
    if (value(loss).rows() != 1 || value(loss).cols() != 1) {
      throw ValidationError("tape: backward target must be a 1x1 scalar");
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    nodes_.at(loss).grad = Mat::Ones(1, 1);
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // ---- graph inputs -------------------------------------------------------

  int constant(Mat v) { return push(std::move(v), false); }

  // Copies the current parameter value onto the tape; backward accumulates
  // into p.grad. The parameter must outlive the tape.
  int leaf(Parameter& p) {
    const int id = push(p.value, p.trainable);
    if (p.trainable) {
      nodes_[id].backward = [&p](Tape& t, int self) {
        p.grad += t.grad(self);
      };
    }
    return id;
  }

  // ---- linear algebra -----------------------------------------------------

  int matmul(int a, int b) {
    check_cols_rows(a, b, "matmul");
    Mat out = value(a) * value(b);
    return binary(std::move(out), a, b, [](Tape& t, int a, int b, int self) {
      const Mat& g = t.grad(self);
      t.accumulate(a, g * t.value(b).transpose());
      t.accumulate(b, t.value(a).transpose() * g);
    });
  }

  // a · bᵀ
  int matmul_nt(int a, int b) {
    if (value(a).cols() != value(b).cols()) {
      throw ValidationError("matmul_nt: inner dimensions differ");
    }
    Mat out = value(a) * value(b).transpose();
    return binary(std::move(out), a, b, [](Tape& t, int a, int b, int self) {
      const Mat& g = t.grad(self);
      t.accumulate(a, g * t.value(b));
      t.accumulate(b, g.transpose() * t.value(a));
    });
  }

  // aᵀ · b
  int matmul_tn(int a, int b) {
    if (value(a).rows() != value(b).rows()) {
      throw ValidationError("matmul_tn: inner dimensions differ");
    }
    Mat out = value(a).transpose() * value(b);
    return binary(std::move(out), a, b, [](Tape& t, int a, int b, int self) {
      const Mat& g = t.grad(self);
      t.accumulate(a, t.value(b) * g.transpose());
      t.accumulate(b, t.value(a) * g);
    });
  }

  int add(int a, int b) {
    check_same_shape(a, b, "add");
    Mat out = value(a) + value(b);
    return binary(std::move(out), a, b, [](Tape& t, int a, int b, int self) {
      t.accumulate(a, t.grad(self));
      t.accumulate(b, t.grad(self));
    });
  }

  // Adds a 1×C row vector to every row of a.
  int add_rowvec(int a, int rowvec) {
    if (value(rowvec).rows() != 1 || value(rowvec).cols() != value(a).cols()) {
      throw ValidationError("add_rowvec: expected a 1xC vector matching a's columns");
    }
    Mat out = value(a);
    for (int c = 0; c < out.cols(); ++c) out.col(c).array() += value(rowvec)(0, c);
    return binary(std::move(out), a, rowvec,
                  [](Tape& t, int a, int rowvec, int self) {
                    const Mat& g = t.grad(self);
                    t.accumulate(a, g);
                    t.accumulate(rowvec, g.colwise().sum());
                  });
  }

  // Adds an N×1 column vector to every column of a.
  int add_colvec(int a, int colvec) {
    if (value(colvec).cols() != 1 || value(colvec).rows() != value(a).rows()) {
      throw ValidationError("add_colvec: expected an Nx1 vector matching a's rows");
    }
    Mat out = value(a);
    for (int r = 0; r < out.rows(); ++r) out.row(r).array() += value(colvec)(r, 0);
    return binary(std::move(out), a, colvec,
                  [](Tape& t, int a, int colvec, int self) {
                    const Mat& g = t.grad(self);
                    t.accumulate(a, g);
                    t.accumulate(colvec, g.rowwise().sum());
                  });
  }

  int scale(int a, double s) {
    Mat out = s * value(a);
    return unary(std::move(out), a, [s](Tape& t, int a, int self) {
      t.accumulate(a, s * t.grad(self));
    });
  }

  int mul_elem(int a, int b) {
    check_same_shape(a, b, "mul_elem");
    Mat out = value(a).cwiseProduct(value(b));
    return binary(std::move(out), a, b, [](Tape& t, int a, int b, int self) {
      const Mat& g = t.grad(self);
      t.accumulate(a, g.cwiseProduct(t.value(b)));
      t.accumulate(b, g.cwiseProduct(t.value(a)));
    });
  }

  int transpose(int a) {
    Mat out = value(a).transpose();
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      t.accumulate(a, t.grad(self).transpose());
    });
  }

  int hstack(int a, int b) {
    if (value(a).rows() != value(b).rows()) {
      throw ValidationError("hstack: row counts differ");
    }
    Mat out(value(a).rows(), value(a).cols() + value(b).cols());
    out << value(a), value(b);
    return binary(std::move(out), a, b, [](Tape& t, int a, int b, int self) {
      const Mat& g = t.grad(self);
      const int ca = static_cast<int>(t.value(a).cols());
      const int cb = static_cast<int>(t.value(b).cols());
      t.accumulate(a, g.leftCols(ca));
      t.accumulate(b, g.rightCols(cb));
    });
  }

  int slice_cols(int a, int begin, int count) {
    if (begin < 0 || count < 0 || begin + count > value(a).cols()) {
      throw ValidationError("slice_cols: range out of bounds");
    }
    Mat out = value(a).middleCols(begin, count);
    return unary(std::move(out), a, [begin, count](Tape& t, int a, int self) {
      Mat g = Mat::Zero(t.value(a).rows(), t.value(a).cols());
      g.middleCols(begin, count) = t.grad(self);
      t.accumulate(a, g);
    });
  }

  // Row gather with a tap table: out.block(i, t·C, 1, C) = in.row(table(i,t)),
  // or zero where table(i,t) < 0. The shared building block of every sparse
  // convolution (neighbor windows, stride-2 children, transpose parents).
  int gather_rows(int a, const Eigen::MatrixXi& table) {
    const Mat& x = value(a);
    const int ch = static_cast<int>(x.cols());
    const int rows = static_cast<int>(table.rows());
    const int taps = static_cast<int>(table.cols());
    Mat out = Mat::Zero(rows, taps * ch);
    for (int i = 0; i < rows; ++i) {
      for (int tap = 0; tap < taps; ++tap) {
        const int j = table(i, tap);
        if (j < 0) continue;
        if (j >= x.rows()) throw ValidationError("gather_rows: index out of range");
        out.block(i, tap * ch, 1, ch) = x.row(j);
      }
    }
    auto tbl = std::make_shared<const Eigen::MatrixXi>(table);
    return unary(std::move(out), a, [tbl, ch](Tape& t, int a, int self) {
      const Mat& g = t.grad(self);
      Mat gx = Mat::Zero(t.value(a).rows(), t.value(a).cols());
      for (int i = 0; i < tbl->rows(); ++i) {
        for (int tap = 0; tap < tbl->cols(); ++tap) {
          const int j = (*tbl)(i, tap);
          if (j >= 0) gx.row(j) += g.block(i, tap * ch, 1, ch);
        }
      }
      t.accumulate(a, gx);
    });
  }

  // ---- nonlinearities -----------------------------------------------------

  int relu(int a) {
    Mat out = value(a).cwiseMax(0.0);
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      Mat mask = (t.value(a).array() > 0.0).cast<double>();
      t.accumulate(a, t.grad(self).cwiseProduct(mask));
    });
  }

  int log_sigmoid(int a) {
    Mat out = value(a);
    for (int i = 0; i < out.size(); ++i) {
      const double x = out(i);
      out(i) = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
    }
    // d/dx log σ(x) = 1 − σ(x) = 1 − exp(log σ(x))
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      Mat d = (1.0 - t.value(self).array().exp()).matrix();
      t.accumulate(a, t.grad(self).cwiseProduct(d));
    });
  }

  int softmax_rows(int a) {
    Mat out = value(a);
    for (int r = 0; r < out.rows(); ++r) {
      const double m = out.row(r).maxCoeff();
      out.row(r) = (out.row(r).array() - m).exp();
      out.row(r) /= out.row(r).sum();
    }
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      const Mat& s = t.value(self);
      const Mat& g = t.grad(self);
      Mat gx(s.rows(), s.cols());
      for (int r = 0; r < s.rows(); ++r) {
        const double dot = g.row(r).cwiseProduct(s.row(r)).sum();
        gx.row(r) = (s.row(r).array() * (g.row(r).array() - dot)).matrix();
      }
      t.accumulate(a, gx);
    });
  }

  int log_softmax_rows(int a) {
    Mat out = value(a);
    for (int r = 0; r < out.rows(); ++r) {
      const double m = out.row(r).maxCoeff();
      const double lse = m + std::log((out.row(r).array() - m).exp().sum());
      out.row(r).array() -= lse;
    }
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      const Mat& y = t.value(self);
      const Mat& g = t.grad(self);
      Mat gx(y.rows(), y.cols());
      for (int r = 0; r < y.rows(); ++r) {
        const double gsum = g.row(r).sum();
        gx.row(r) = g.row(r) - gsum * y.row(r).array().exp().matrix();
      }
      t.accumulate(a, gx);
    });
  }

  int log_softmax_cols(int a) {
    Mat out = value(a);
    for (int c = 0; c < out.cols(); ++c) {
      const double m = out.col(c).maxCoeff();
      const double lse = m + std::log((out.col(c).array() - m).exp().sum());
      out.col(c).array() -= lse;
    }
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      const Mat& y = t.value(self);
      const Mat& g = t.grad(self);
      Mat gx(y.rows(), y.cols());
      for (int c = 0; c < y.cols(); ++c) {
        const double gsum = g.col(c).sum();
        gx.col(c) = g.col(c) - gsum * y.col(c).array().exp().matrix();
      }
      t.accumulate(a, gx);
    });
  }

  // Per row i: log(1 − Σ_j exp(a_ij)), the log-mass of the implicit
  // unmatched bucket when row i holds log-probabilities summing below 1.
  int log1m_rowsumexp(int a) {
    const Mat& x = value(a);
    Mat out(x.rows(), 1);
    for (int r = 0; r < x.rows(); ++r) {
      out(r, 0) = std::log(std::max(1.0 - x.row(r).array().exp().sum(), kTinyMass));
    }
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      const Mat& x = t.value(a);
      const Mat& g = t.grad(self);
      Mat gx(x.rows(), x.cols());
      for (int r = 0; r < x.rows(); ++r) {
        const double rem = std::max(1.0 - x.row(r).array().exp().sum(), kTinyMass);
        gx.row(r) = (-g(r, 0) / rem) * x.row(r).array().exp().matrix();
      }
      t.accumulate(a, gx);
    });
  }

  // ---- reductions ---------------------------------------------------------

  int sum(int a) {
    Mat out(1, 1);
    out(0, 0) = value(a).sum();
    return unary(std::move(out), a, [](Tape& t, int a, int self) {
      t.accumulate(a, Mat::Constant(t.value(a).rows(), t.value(a).cols(),
                                    t.grad(self)(0, 0)));
    });
  }

  // Σ a ∘ w for a constant weighting w (the generic scalar-loss head).
  int weighted_sum(int a, const Mat& w) {
    check_shape(a, w, "weighted_sum");
    Mat out(1, 1);
    out(0, 0) = value(a).cwiseProduct(w).sum();
    auto wp = std::make_shared<const Mat>(w);
    return unary(std::move(out), a, [wp](Tape& t, int a, int self) {
      t.accumulate(a, t.grad(self)(0, 0) * (*wp));
    });
  }

  // ---- batch normalization ------------------------------------------------

  int batchnorm(int x, BatchNorm& bn, bool train) {
    const Mat& in = value(x);
    const int ch = static_cast<int>(in.cols());
    if (ch != bn.gamma.cols()) {
      throw ValidationError("batchnorm: channel count mismatch");
    }
    const int n = static_cast<int>(in.rows());
    if (n == 0) throw ValidationError("batchnorm: empty batch");

    Eigen::VectorXd mean(ch), inv_std(ch);
    if (train) {
      for (int c = 0; c < ch; ++c) {
        mean(c) = in.col(c).mean();
        const double var = (in.col(c).array() - mean(c)).square().sum() / n;
        inv_std(c) = 1.0 / std::sqrt(var + bn.eps);
        bn.running_mean.value(0, c) =
            (1.0 - bn.momentum) * bn.running_mean.value(0, c) +
            bn.momentum * mean(c);
        bn.running_var.value(0, c) =
            (1.0 - bn.momentum) * bn.running_var.value(0, c) + bn.momentum * var;
      }
    } else {
      for (int c = 0; c < ch; ++c) {
        mean(c) = bn.running_mean.value(0, c);
        inv_std(c) = 1.0 / std::sqrt(bn.running_var.value(0, c) + bn.eps);
      }
    }

    // Note: compute the output before creating any new node — pushing nodes
    // may reallocate the tape and invalidate `in`.
    Mat out(n, ch);
    for (int c = 0; c < ch; ++c) {
      out.col(c) = ((in.col(c).array() - mean(c)) * inv_std(c)) *
                       bn.gamma.value(0, c) +
                   bn.beta.value(0, c);
    }
    const int gamma_id = leaf(bn.gamma);
    const int beta_id = leaf(bn.beta);
    const int id = push(std::move(out),
                        needs_grad(x) || needs_grad(gamma_id) || needs_grad(beta_id));
    if (!nodes_[id].needs_grad) return id;
    struct Closure {
      Eigen::VectorXd mean, inv_std;
      bool train;
    };
    auto cl = std::make_shared<const Closure>(Closure{mean, inv_std, train});
    nodes_[id].backward = [x, gamma_id, beta_id, cl](Tape& t, int self) {
      const Mat& in = t.value(x);
      const Mat& gy = t.grad(self);
      const int n = static_cast<int>(in.rows());
      const int ch = static_cast<int>(in.cols());
      Mat gx(n, ch), dgamma(1, ch), dbeta(1, ch);
      for (int c = 0; c < ch; ++c) {
        const Eigen::ArrayXd xhat =
            (in.col(c).array() - cl->mean(c)) * cl->inv_std(c);
        const Eigen::ArrayXd g = gy.col(c).array();
        dgamma(0, c) = (g * xhat).sum();
        dbeta(0, c) = g.sum();
        const double gamma_c = t.value(gamma_id)(0, c);
        const Eigen::ArrayXd gxhat = g * gamma_c;
        if (cl->train) {
          // Batch statistics depend on x: subtract the mean- and
          // variance-path couplings.
          gx.col(c) = (cl->inv_std(c) / n) *
                      (n * gxhat - gxhat.sum() - xhat * (gxhat * xhat).sum());
        } else {
          gx.col(c) = gxhat * cl->inv_std(c);
        }
      }
      t.accumulate(x, gx);
      t.accumulate(gamma_id, dgamma);
      t.accumulate(beta_id, dbeta);
    };
    return id;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  static constexpr double kTinyMass = 1e-15;

  std::vector<Node> nodes_;

  int push(Mat v, bool needs_grad) {
    nodes_.push_back(Node{std::move(v), Mat(), nullptr, needs_grad});
    return size() - 1;
  }

  template <typename Fn>
  int unary(Mat out, int a, Fn&& rule) {
    const int id = push(std::move(out), needs_grad(a));
    if (nodes_[id].needs_grad) {
      nodes_[id].backward = [a, rule](Tape& t, int self) { rule(t, a, self); };
    }
    return id;
  }

  template <typename Fn>
  int binary(Mat out, int a, int b, Fn&& rule) {
    const int id = push(std::move(out), needs_grad(a) || needs_grad(b));
    if (nodes_[id].needs_grad) {
      nodes_[id].backward = [a, b, rule](Tape& t, int self) {
        rule(t, a, b, self);
      };
    }
    return id;
  }

  void check_cols_rows(int a, int b, const char* op) const {
    if (value(a).cols() != value(b).rows()) {
      throw ValidationError(std::string(op) + ": inner dimensions differ");
    }
  }
  void check_same_shape(int a, int b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ValidationError(std::string(op) + ": shapes differ");
    }
  }
  void check_shape(int a, const Mat& w, const char* op) const {
    if (value(a).rows() != w.rows() || value(a).cols() != w.cols()) {
      throw ValidationError(std::string(op) + ": shapes differ");
    }
  }
};

// ---- dense layers ---------------------------------------------------------

struct Linear {
  Parameter weights;  // in × out
  Parameter bias;     // 1 × out

  Linear() = default;
  Linear(int in, int out, Rng& rng)
      : weights(in, out, std::sqrt(2.0 / in), rng), bias(Mat::Zero(1, out)) {}
  std::vector<Parameter*> parameters() { return {&weights, &bias}; }
};

inline int linear(Tape& t, int x, Linear& layer) {
  return t.add_rowvec(t.matmul(x, t.leaf(layer.weights)), t.leaf(layer.bias));
}

// ---- multi-head attention -------------------------------------------------

struct MultiHeadAttention {
  int dim = 0;
  int heads = 1;
  Parameter wq, wk, wv, wo;  // dim × dim
  Parameter bq, bk, bv, bo;  // 1 × dim

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, Rng& rng)
      : dim(dim),
        heads(heads),
        wq(dim, dim, std::sqrt(1.0 / dim), rng),
        wk(dim, dim, std::sqrt(1.0 / dim), rng),
        wv(dim, dim, std::sqrt(1.0 / dim), rng),
        wo(dim, dim, std::sqrt(1.0 / dim), rng),
        bq(Mat::Zero(1, dim)),
        bk(Mat::Zero(1, dim)),
        bv(Mat::Zero(1, dim)),
        bo(Mat::Zero(1, dim)) {
    if (dim <= 0 || heads <= 0 || dim % heads != 0) {
      throw ValidationError("attention: model dimension must be divisible by heads");
    }
  }
  std::vector<Parameter*> parameters() {
    return {&wq, &wk, &wv, &wo, &bq, &bk, &bv, &bo};
  }
};

// Scaled dot-product attention. Self mode: pass the same id for queries,
// keys, and values; cross mode: queries from one set, keys/values from the
// other. Rows are set elements, columns are channels.
inline int multi_head_attention(Tape& t, int queries, int keys, int values,
                                MultiHeadAttention& att) {
  if (t.value(queries).cols() != att.dim || t.value(keys).cols() != att.dim ||
      t.value(values).cols() != att.dim) {
    throw ValidationError("attention: input channel count must equal model dimension");
  }
  if (t.value(keys).rows() != t.value(values).rows()) {
    throw ValidationError("attention: keys and values must have equal element counts");
  }
  const int dh = att.dim / att.heads;
  const int q = t.add_rowvec(t.matmul(queries, t.leaf(att.wq)), t.leaf(att.bq));
  const int k = t.add_rowvec(t.matmul(keys, t.leaf(att.wk)), t.leaf(att.bk));
  const int v = t.add_rowvec(t.matmul(values, t.leaf(att.wv)), t.leaf(att.bv));
  int concat = -1;
  for (int h = 0; h < att.heads; ++h) {
    const int qs = t.slice_cols(q, h * dh, dh);
    const int ks = t.slice_cols(k, h * dh, dh);
    const int vs = t.slice_cols(v, h * dh, dh);
    const int logits = t.scale(t.matmul_nt(qs, ks), 1.0 / std::sqrt(double(dh)));
    const int weights = t.softmax_rows(logits);
    const int head_out = t.matmul(weights, vs);
    concat = (h == 0) ? head_out : t.hstack(concat, head_out);
  }
  return t.add_rowvec(t.matmul(concat, t.leaf(att.wo)), t.leaf(att.bo));
}

// ---- optimizer ------------------------------------------------------------

// Adam with bias correction and a per-epoch exponential learning-rate decay:
// lr(n epochs) = base_lr · decayⁿ.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Parameter*> params, double base_lr = 1e-5,
                         double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8, double epoch_decay = 0.95)
      : params_(std::move(params)),
        base_lr_(base_lr),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        decay_(epoch_decay) {
    if (base_lr_ <= 0 || decay_ <= 0) {
      throw ValidationError("adam: learning rate and decay must be positive");
    }
    for (const Parameter* p : params_) {
      m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }

  double learning_rate() const { return base_lr_ * std::pow(decay_, epochs_); }
  int steps() const { return steps_; }
  int epochs() const { return epochs_; }
  int parameter_count() const { return static_cast<int>(params_.size()); }
  const Mat& first_moment(int i) const { return m_.at(i); }
  const Mat& second_moment(int i) const { return v_.at(i); }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step() {
    ++steps_;
    const double lr = learning_rate();
    const double bc1 = 1.0 - std::pow(beta1_, steps_);
    const double bc2 = 1.0 - std::pow(beta2_, steps_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      if (!p.trainable) continue;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
      const Mat mhat = m_[i] / bc1;
      const Mat vhat = v_[i] / bc2;
      p.value.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps_);
    }
  }

  void end_epoch() { ++epochs_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Mat> m_, v_;
  double base_lr_, beta1_, beta2_, eps_, decay_;
  int steps_ = 0;
  int epochs_ = 0;
};

// ---- weight serialization -------------------------------------------------
// Binary container: magic "CFWT", u32 version, u32 tensor count; then per
// tensor: u32 name length, name bytes, u8 dtype (0 = float64), u8 rank (2),
// u32 rows, u32 cols, row-major little-endian payload.

namespace detail {
inline void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("weight file: truncated");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}
}  // namespace detail

inline void save_weights(
    const std::string& path,
    const std::vector<std::pair<std::string, const Parameter*>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open weight file for writing: " + path);
  out.write("CFWT", 4);
  detail::write_u32(out, 1);
  detail::write_u32(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, param] : tensors) {
    detail::write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const unsigned char dtype = 0, rank = 2;
    out.write(reinterpret_cast<const char*>(&dtype), 1);
    out.write(reinterpret_cast<const char*>(&rank), 1);
    detail::write_u32(out, static_cast<uint32_t>(param->value.rows()));
    detail::write_u32(out, static_cast<uint32_t>(param->value.cols()));
    for (int r = 0; r < param->value.rows(); ++r) {
      for (int c = 0; c < param->value.cols(); ++c) {
        const double v = param->value(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
    }
  }
  if (!out) throw IoError("failed writing weight file: " + path);
}

inline void load_weights(
    const std::string& path,
    const std::vector<std::pair<std::string, Parameter*>>& tensors) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "CFWT") {
    throw IoError("weight file: bad magic: " + path);
  }
  const uint32_t version = detail::read_u32(in);
  if (version != 1) throw IoError("weight file: unsupported version");
  const uint32_t count = detail::read_u32(in);
  if (count != tensors.size()) {
    throw ValidationError("weight file: tensor count mismatch");
  }
  std::vector<bool> seen(tensors.size(), false);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = detail::read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    unsigned char dtype = 0, rank = 0;
    in.read(reinterpret_cast<char*>(&dtype), 1);
    in.read(reinterpret_cast<char*>(&rank), 1);
    if (!in || dtype != 0 || rank != 2) {
      throw IoError("weight file: unsupported tensor encoding");
    }
    const uint32_t rows = detail::read_u32(in);
    const uint32_t cols = detail::read_u32(in);
    Parameter* target = nullptr;
    for (size_t j = 0; j < tensors.size(); ++j) {
      if (tensors[j].first == name) {
        if (seen[j]) throw ValidationError("weight file: duplicate tensor " + name);
        seen[j] = true;
        target = tensors[j].second;
        break;
      }
    }
    if (target == nullptr) {
      throw ValidationError("weight file: unexpected tensor " + name);
    }
    if (static_cast<int>(rows) != target->rows() ||
        static_cast<int>(cols) != target->cols()) {
      throw ValidationError("weight file: shape mismatch for tensor " + name);
    }
    for (uint32_t r = 0; r < rows; ++r) {
      for (uint32_t c = 0; c < cols; ++c) {
        double v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(double));
        if (!in) throw IoError("weight file: truncated payload");
        target->value(r, c) = v;
      }
    }
  }
}

}  // namespace coffee
