// SPDX-License-Identifier: Apache-2.0
//
// Biased empirical squared maximum mean discrepancy and its
// character-conditional average, both with gradients w.r.t. the samples.
// Samples are matrix rows.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <span>
#include <string>
#include <vector>

#include "cmatch/ctc.hpp"
#include "cmatch/error.hpp"
#include "cmatch/numkit.hpp"

namespace cmatch {

enum class KernelKind { kLinear, kRbf };

struct KernelSpec {
  KernelKind kind = KernelKind::kLinear;
  double bandwidth = 1.0;  // rbf only

  static KernelSpec linear() { return {}; }
  static KernelSpec rbf(double bandwidth) {
    if (!(std::isfinite(bandwidth) && bandwidth > 0.0)) {
      throw Error(ErrorKind::kInvalidArgument, "rbf bandwidth must be finite and positive");
    }
    return {KernelKind::kRbf, bandwidth};
  }
};

// "linear" or "rbf:<bandwidth>".
inline KernelSpec parse_kernel(const std::string& text) {
  if (text == "linear") return KernelSpec::linear();
  if (text.rfind("rbf:", 0) == 0) {
    const std::string num = text.substr(4);
    char* end = nullptr;
    const double bw = std::strtod(num.c_str(), &end);
    if (num.empty() || end != num.c_str() + num.size()) {
      throw Error(ErrorKind::kUsage, "bad rbf bandwidth in kernel '" + text + "'");
    }
    return KernelSpec::rbf(bw);
  }
  throw Error(ErrorKind::kUsage, "unknown kernel '" + text + "' (expected linear or rbf:<bandwidth>)");
}

inline std::string to_string(const KernelSpec& spec) {
  if (spec.kind == KernelKind::kLinear) return "linear";
  char buf[64];
  std::snprintf(buf, sizeof buf, "rbf:%.17g", spec.bandwidth);
  return buf;
}

inline double kernel_eval(const KernelSpec& spec, std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw Error(ErrorKind::kInvalidShape, "kernel arguments have dimensions " +
                                              std::to_string(x.size()) + " and " +
                                              std::to_string(y.size()));
  }
  if (spec.kind == KernelKind::kLinear) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
  }
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
  return std::exp(-d2 / (2.0 * spec.bandwidth * spec.bandwidth));
}

struct MmdResult {
  double value = 0.0;
  Matrix grad_source;  // same shape as the source samples
  Matrix grad_target;
};

namespace detail {

// mean_{i,j} k(a_i, b_j) and its gradient w.r.t. every a_i (rbf only).
inline double rbf_mean(const KernelSpec& spec, const Matrix& a, const Matrix& b, Matrix* grad_a,
                       double weight) {
  const double inv_bw2 = 1.0 / (spec.bandwidth * spec.bandwidth);
  const double norm = 1.0 / static_cast<double>(a.rows() * b.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double k = kernel_eval(spec, a.row(i), b.row(j));
      total += k;
      if (grad_a != nullptr) {
        // d k(a_i, b_j) / d a_i = -k (a_i - b_j) / bw^2
        const double coef = -weight * norm * k * inv_bw2;
        for (std::size_t d = 0; d < a.cols(); ++d) (*grad_a)(i, d) += coef * (a(i, d) - b(j, d));
      }
    }
  }
  return total * norm;
}

}  // namespace detail

// mean k(xs, xs) + mean k(xt, xt) - 2 mean k(xs, xt), clamped below at zero.
inline MmdResult mmd_sq_biased(const Matrix& xs, const Matrix& xt, const KernelSpec& spec) {
  if (xs.rows() == 0 || xt.rows() == 0) {
    throw Error(ErrorKind::kEmptyDomain, "mmd needs samples from both domains");
  }
  if (xs.cols() != xt.cols()) {
    throw Error(ErrorKind::kInvalidShape, "mmd sample dimensions differ: " + shape_string(xs) +
                                              " vs " + shape_string(xt));
  }
  MmdResult out{0.0, Matrix(xs.rows(), xs.cols()), Matrix(xt.rows(), xt.cols())};
  const std::size_t dim = xs.cols();

  if (spec.kind == KernelKind::kLinear) {
    // Reduces to the squared distance between sample means.
    std::vector<double> diff(dim, 0.0);
    for (std::size_t i = 0; i < xs.rows(); ++i) {
      for (std::size_t d = 0; d < dim; ++d) diff[d] += xs(i, d) / static_cast<double>(xs.rows());
    }
    for (std::size_t j = 0; j < xt.rows(); ++j) {
      for (std::size_t d = 0; d < dim; ++d) diff[d] -= xt(j, d) / static_cast<double>(xt.rows());
    }
    for (double v : diff) out.value += v * v;
    for (std::size_t i = 0; i < xs.rows(); ++i) {
      for (std::size_t d = 0; d < dim; ++d) out.grad_source(i, d) = 2.0 * diff[d] / static_cast<double>(xs.rows());
    }
    for (std::size_t j = 0; j < xt.rows(); ++j) {
      for (std::size_t d = 0; d < dim; ++d) out.grad_target(j, d) = -2.0 * diff[d] / static_cast<double>(xt.rows());
    }
    return out;
  }

  // Within-domain terms contribute twice (the pair sum is symmetric).
  const double ss = detail::rbf_mean(spec, xs, xs, &out.grad_source, 2.0);
  const double tt = detail::rbf_mean(spec, xt, xt, &out.grad_target, 2.0);
  const double st = detail::rbf_mean(spec, xs, xt, &out.grad_source, -2.0);
  detail::rbf_mean(spec, xt, xs, &out.grad_target, -2.0);
  out.value = ss + tt - 2.0 * st;
  if (out.value < 0.0) {
    out.value = 0.0;
    out.grad_source = Matrix(xs.rows(), xs.cols());
    out.grad_target = Matrix(xt.rows(), xt.cols());
  }
  return out;
}

// Encoder features with one character label per row.
struct LabeledFeatureBag {
  Matrix features;
  LabelSeq labels;

  std::size_t size() const noexcept { return labels.size(); }
};

struct CMatchResult {
  double value = 0.0;
  Matrix grad_source;
  Matrix grad_target;
  LabelSeq matched;  // characters present in both bags
};

namespace detail {

inline void check_bag(const LabeledFeatureBag& bag, const CharSet& cs, const char* which) {
  if (bag.features.rows() != bag.labels.size()) {
    throw Error(ErrorKind::kInvalidShape, std::string(which) + " bag has " +
                                              std::to_string(bag.features.rows()) + " vectors but " +
                                              std::to_string(bag.labels.size()) + " labels");
  }
  for (Label l : bag.labels) {
    if (!cs.contains(l) || l == cs.blank()) {
      throw Error(ErrorKind::kInvalidTranscript, std::string(which) + " bag holds a non-character label");
    }
  }
}

inline std::vector<std::size_t> rows_with(const LabelSeq& labels, Label c) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == c) rows.push_back(i);
  }
  return rows;
}

inline Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(m.row(rows[i]).begin(), m.cols(), out.row(i).begin());
  }
  return out;
}

}  // namespace detail

// Average of per-character squared MMD over the characters present in both
// bags, visited in character-set order.
inline CMatchResult cmatch_loss(const LabeledFeatureBag& src, const LabeledFeatureBag& tgt,
                                const CharSet& cs, const KernelSpec& spec) {
  detail::check_bag(src, cs, "source");
  detail::check_bag(tgt, cs, "target");
  if (src.size() > 0 && tgt.size() > 0 && src.features.cols() != tgt.features.cols()) {
    throw Error(ErrorKind::kInvalidShape, "source and target feature dimensions differ");
  }
  CMatchResult out{0.0, Matrix(src.features.rows(), src.features.cols()),
                   Matrix(tgt.features.rows(), tgt.features.cols()), {}};

  struct Term {
    std::vector<std::size_t> src_rows, tgt_rows;
    MmdResult mmd;
  };
  std::vector<Term> terms;
  for (Label c : cs.characters()) {
    auto sr = detail::rows_with(src.labels, c);
    auto tr = detail::rows_with(tgt.labels, c);
    if (sr.empty() || tr.empty()) continue;
    MmdResult m = mmd_sq_biased(detail::select_rows(src.features, sr),
                                detail::select_rows(tgt.features, tr), spec);
    terms.push_back({std::move(sr), std::move(tr), std::move(m)});
    out.matched.push_back(c);
  }
  if (terms.empty()) {
    throw Error(ErrorKind::kNoOverlap, "no character occurs in both source and target bags");
  }

  const double inv = 1.0 / static_cast<double>(terms.size());
  for (const Term& term : terms) {
    out.value += term.mmd.value;
    for (std::size_t i = 0; i < term.src_rows.size(); ++i) {
      auto dst = out.grad_source.row(term.src_rows[i]);
      const auto g = term.mmd.grad_source.row(i);
      for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += inv * g[d];
    }
    for (std::size_t j = 0; j < term.tgt_rows.size(); ++j) {
      auto dst = out.grad_target.row(term.tgt_rows[j]);
      const auto g = term.mmd.grad_target.row(j);
      for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += inv * g[d];
    }
  }
  out.value *= inv;
  return out;
}

}  // namespace cmatch
