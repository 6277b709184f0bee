// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices and a small reverse-mode gradient tape.
//
// The tape records a fixed set of primitives (matmul, add, row-softmax, log,
// elementwise maps, gathers and reductions) plus an escape hatch for losses
// whose local gradient is computed analytically elsewhere (CTC, MMD).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmatch/error.hpp"

namespace cmatch {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorKind::kInvalidShape, "data length " + std::to_string(data_.size()) +
                                                " does not match " + std::to_string(rows_) + "x" +
                                                std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw Error(ErrorKind::kInvalidShape, "ragged initializer");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorKind::kInvalidShape,
                "matmul " + shape_string(a) + " by " + shape_string(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorKind::kInvalidShape,
                "matmul_nt " + shape_string(a) + " by transpose of " + shape_string(b));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto b_row = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a_row[k] * b_row[k];
      out(i, j) = s;
    }
  }
  return out;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorKind::kInvalidShape,
                "matmul_tn transpose of " + shape_string(a) + " by " + shape_string(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto a_row = a.row(k);
    const auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

inline void add_in_place(Matrix& into, const Matrix& other) {
  if (!into.same_shape(other)) {
    throw Error(ErrorKind::kInvalidShape, "add " + shape_string(into) + " and " + shape_string(other));
  }
  auto d = into.data();
  const auto o = other.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += o[i];
}

inline void log_softmax_row(std::span<const double> in, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.end());
  double sum = 0.0;
  for (double v : in) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lse;
}

inline Matrix log_softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) log_softmax_row(m.row(r), out.row(r));
  return out;
}

inline Matrix softmax_rows(const Matrix& m) {
  Matrix out = log_softmax_rows(m);
  for (double& v : out.data()) v = std::exp(v);
  return out;
}

// Numerically safe log(exp(a) + exp(b)) that tolerates -inf operands.
inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Uniform in [-s, s] with s = 1/sqrt(fan_in).
inline Matrix uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                           std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-s, s);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t index = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value) { return push(std::move(value), {}, {}); }

  // Records a node whose backward step is `backward(output_grad)`, which must
  // accumulate into the parents through accumulate().
  Var record(Matrix value, std::vector<std::size_t> parents,
             std::function<void(Tape&, const Matrix&)> backward) {
    return push(std::move(value), std::move(parents), std::move(backward));
  }

  const Matrix& value(Var v) const { return nodes_[v.index].value; }

  // Gradient of the last backward() root w.r.t. `v`; exactly zero when `v`
  // did not contribute.
  Matrix grad(Var v) const {
    const Node& n = nodes_[v.index];
    if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(std::size_t index, const Matrix& g) {
    Node& n = nodes_[index];
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      add_in_place(n.grad, g);
    }
  }

  void backward(Var root) {
    const Matrix& rv = nodes_[root.index].value;
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw Error(ErrorKind::kInvalidShape, "backward root must be 1x1, got " + shape_string(rv));
    }
    for (auto& n : nodes_) n.grad = Matrix();
    nodes_[root.index].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = root.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> parents;
    std::function<void(Tape&, const Matrix&)> backward;
  };

  Var push(Matrix value, std::vector<std::size_t> parents,
           std::function<void(Tape&, const Matrix&)> backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(parents), std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Matrix& value(Var v) { return v.tape->value(v); }

inline double scalar(Var v) {
  const Matrix& m = value(v);
  if (m.size() != 1) throw Error(ErrorKind::kInvalidShape, "expected scalar, got " + shape_string(m));
  return m(0, 0);
}

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = matmul(value(a), value(b));
  return t.record(std::move(out), {a.index, b.index}, [a, b](Tape& tape, const Matrix& g) {
    tape.accumulate(a.index, matmul_nt(g, tape.value(b)));
    tape.accumulate(b.index, matmul_tn(tape.value(a), g));
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = matmul_nt(value(a), value(b));
  return t.record(std::move(out), {a.index, b.index}, [a, b](Tape& tape, const Matrix& g) {
    tape.accumulate(a.index, matmul(g, tape.value(b)));
    tape.accumulate(b.index, matmul_tn(g, tape.value(a)));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = value(a);
  add_in_place(out, value(b));
  return t.record(std::move(out), {a.index, b.index}, [a, b](Tape& tape, const Matrix& g) {
    tape.accumulate(a.index, g);
    tape.accumulate(b.index, g);
  });
}

// Adds a 1 x cols bias row to every row of `a`.
inline Var add_row(Var a, Var bias) {
  Tape& t = *a.tape;
  const Matrix& av = value(a);
  const Matrix& bv = value(bias);
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw Error(ErrorKind::kInvalidShape, "add_row " + shape_string(av) + " with bias " + shape_string(bv));
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) row[c] += bv(0, c);
  }
  return t.record(std::move(out), {a.index, bias.index}, [a, bias](Tape& tape, const Matrix& g) {
    tape.accumulate(a.index, g);
    Matrix gb(1, g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
    }
    tape.accumulate(bias.index, gb);
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Matrix out = value(a);
  for (double& v : out.data()) v *= s;
  return t.record(std::move(out), {a.index}, [a, s](Tape& tape, const Matrix& g) {
    Matrix ga = g;
    for (double& v : ga.data()) v *= s;
    tape.accumulate(a.index, ga);
  });
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  Matrix out = value(a);
  for (double& v : out.data()) v = std::tanh(v);
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.index}, [a, self](Tape& tape, const Matrix& g) {
    const Matrix& y = tape.value(Var{&tape, self});
    Matrix ga = g;
    auto gd = ga.data();
    const auto yd = y.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= 1.0 - yd[i] * yd[i];
    tape.accumulate(a.index, ga);
  });
}

// Elementwise natural log; inputs must be positive.
inline Var log(Var a) {
  Tape& t = *a.tape;
  Matrix out = value(a);
  for (double& v : out.data()) v = std::log(v);
  return t.record(std::move(out), {a.index}, [a](Tape& tape, const Matrix& g) {
    const Matrix& x = tape.value(a);
    Matrix ga = g;
    auto gd = ga.data();
    const auto xd = x.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] /= xd[i];
    tape.accumulate(a.index, ga);
  });
}

inline Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  Matrix out = softmax_rows(value(a));
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.index}, [a, self](Tape& tape, const Matrix& g) {
    const Matrix& y = tape.value(Var{&tape, self});
    Matrix ga(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) = y(r, c) * (g(r, c) - dot);
    }
    tape.accumulate(a.index, ga);
  });
}

inline Var log_softmax_rows(Var a) {
  Tape& t = *a.tape;
  Matrix out = log_softmax_rows(value(a));
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.index}, [a, self](Tape& tape, const Matrix& g) {
    const Matrix& y = tape.value(Var{&tape, self});
    Matrix ga(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) gsum += g(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) = g(r, c) - std::exp(y(r, c)) * gsum;
    }
    tape.accumulate(a.index, ga);
  });
}

// Stacks rows table[indices[i]].
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
  Tape& t = *table.tape;
  const Matrix& tv = value(table);
  Matrix out(indices.size(), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw Error(ErrorKind::kInvalidShape, "gather index " + std::to_string(indices[i]) +
                                                " out of range for " + shape_string(tv));
    }
    std::copy_n(tv.row(indices[i]).begin(), tv.cols(), out.row(i).begin());
  }
  return t.record(std::move(out), {table.index},
                  [table, idx = std::move(indices)](Tape& tape, const Matrix& g) {
                    const Matrix& tv2 = tape.value(table);
                    Matrix gt(tv2.rows(), tv2.cols());
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      auto dst = gt.row(idx[i]);
                      const auto src = g.row(i);
                      for (std::size_t c = 0; c < gt.cols(); ++c) dst[c] += src[c];
                    }
                    tape.accumulate(table.index, gt);
                  });
}

// Column-wise mean over rows: N x D -> 1 x D.
inline Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Matrix& av = value(a);
  if (av.rows() == 0) throw Error(ErrorKind::kInvalidShape, "mean_rows of empty matrix");
  Matrix out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < av.cols(); ++c) out(0, c) += av(r, c);
  }
  const double inv = 1.0 / static_cast<double>(av.rows());
  for (double& v : out.data()) v *= inv;
  return t.record(std::move(out), {a.index}, [a, inv](Tape& tape, const Matrix& g) {
    const Matrix& x = tape.value(a);
    Matrix ga(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) ga(r, c) = g(0, c) * inv;
    }
    tape.accumulate(a.index, ga);
  });
}

// -mean_i a(i, targets[i]); the usual cross entropy on log-probabilities.
inline Var mean_nll(Var logp, std::vector<std::size_t> targets) {
  Tape& t = *logp.tape;
  const Matrix& lv = value(logp);
  if (targets.size() != lv.rows() || targets.empty()) {
    throw Error(ErrorKind::kInvalidShape, "mean_nll expects one target per row");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= lv.cols()) throw Error(ErrorKind::kInvalidShape, "mean_nll target out of range");
    s -= lv(i, targets[i]);
  }
  const double inv = 1.0 / static_cast<double>(targets.size());
  return t.record(Matrix(1, 1, s * inv), {logp.index},
                  [logp, inv, tg = std::move(targets)](Tape& tape, const Matrix& g) {
                    const Matrix& x = tape.value(logp);
                    Matrix ga(x.rows(), x.cols());
                    for (std::size_t i = 0; i < tg.size(); ++i) ga(i, tg[i]) = -g(0, 0) * inv;
                    tape.accumulate(logp.index, ga);
                  });
}

// Scalar sum_i weights[i] * terms[i]; terms must be 1x1.
inline Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw Error(ErrorKind::kInvalidShape, "weighted_sum needs matching non-empty terms and weights");
  }
  Tape& t = *terms.front().tape;
  double s = 0.0;
  std::vector<std::size_t> parents;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    // A zero weight drops the term entirely so that infinities never leak in.
    if (weights[i] != 0.0) s += weights[i] * scalar(terms[i]);
    parents.push_back(terms[i].index);
  }
  return t.record(Matrix(1, 1, s), parents,
                  [ps = std::vector<Var>(terms.begin(), terms.end()),
                   ws = std::vector<double>(weights.begin(), weights.end())](Tape& tape,
                                                                            const Matrix& g) {
                    for (std::size_t i = 0; i < ps.size(); ++i) {
                      tape.accumulate(ps[i].index, Matrix(1, 1, ws[i] * g(0, 0)));
                    }
                  });
}

// Scalar whose local gradients w.r.t. `inputs` were computed analytically by
// the caller. Used for losses with closed-form derivatives (CTC, MMD).
inline Var custom_scalar(std::span<const Var> inputs, double loss, std::vector<Matrix> local_grads) {
  if (inputs.empty() || inputs.size() != local_grads.size()) {
    throw Error(ErrorKind::kInvalidShape, "custom_scalar needs one local gradient per input");
  }
  Tape& t = *inputs.front().tape;
  std::vector<std::size_t> parents;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!local_grads[i].same_shape(value(inputs[i]))) {
      throw Error(ErrorKind::kInvalidShape, "custom_scalar gradient shape mismatch");
    }
    parents.push_back(inputs[i].index);
  }
  return t.record(Matrix(1, 1, loss), parents,
                  [ins = std::vector<Var>(inputs.begin(), inputs.end()),
                   lg = std::move(local_grads)](Tape& tape, const Matrix& g) {
                    for (std::size_t i = 0; i < ins.size(); ++i) {
                      Matrix gi = lg[i];
                      for (double& v : gi.data()) v *= g(0, 0);
                      tape.accumulate(ins[i].index, gi);
                    }
                  });
}

inline Var custom_scalar(Var input, double loss, Matrix local_grad) {
  std::vector<Matrix> grads;
  grads.push_back(std::move(local_grad));
  return custom_scalar(std::span<const Var>(&input, 1), loss, std::move(grads));
}

// Compares tape gradients of `f` against central differences.
//
// `f` is called as f(tape, leaves) with one leaf per entry of `params` and
// must return a 1x1 Var. Returns the max over all coordinates of
// |analytic - numeric| / max(1, |numeric|).
template <class F>
double grad_check(F&& f, const std::vector<Matrix>& params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    throw Error(ErrorKind::kInvalidArgument, "grad_check eps must lie in (0, 1e-2]");
  }
  auto evaluate = [&](const std::vector<Matrix>& ps, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(ps.size());
    for (const auto& p : ps) leaves.push_back(tape.leaf(p));
    Var out = f(tape, std::span<const Var>(leaves));
    const double v = scalar(out);
    if (!std::isfinite(v)) throw Error(ErrorKind::kNumerical, "non-finite loss in grad_check");
    if (grads != nullptr) {
      tape.backward(out);
      grads->clear();
      for (const auto& l : leaves) grads->push_back(tape.grad(l));
    }
    return v;
  };

  std::vector<Matrix> analytic;
  evaluate(params, &analytic);

  double worst = 0.0;
  std::vector<Matrix> probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const double orig = probe[p].data()[i];
      probe[p].data()[i] = orig + eps;
      const double up = evaluate(probe, nullptr);
      probe[p].data()[i] = orig - eps;
      const double down = evaluate(probe, nullptr);
      probe[p].data()[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err =
          std::abs(analytic[p].data()[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace cmatch
