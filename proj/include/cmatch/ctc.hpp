// SPDX-License-Identifier: Apache-2.0
//
// Connectionist temporal classification over a per-frame log-probability
// lattice: loss with gradient (forward-backward), Viterbi forced alignment,
// thresholded greedy frame labels and prefix scoring for joint decoding.
// Every trellis quantity lives in log space.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cmatch/error.hpp"
#include "cmatch/numkit.hpp"

namespace cmatch {

using Label = int;
using LabelSeq = std::vector<Label>;

// Ordered symbol inventory. Index `blank_index` is the CTC blank; every other
// index is a character that may appear in transcripts.
class CharSet {
 public:
  CharSet() = default;
  CharSet(std::string symbols, std::size_t blank_index)
      : symbols_(std::move(symbols)), blank_(blank_index) {
    if (blank_ >= symbols_.size()) {
      throw Error(ErrorKind::kInvalidArgument, "blank index out of range");
    }
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (symbols_.find(symbols_[i], i + 1) != std::string::npos) {
        throw Error(ErrorKind::kInvalidArgument,
                    std::string("duplicate symbol '") + symbols_[i] + "' in character set");
      }
    }
  }

  // Blank '-' at index 0 followed by `characters`.
  static CharSet with_blank(std::string_view characters) {
    return CharSet("-" + std::string(characters), 0);
  }

  std::size_t size() const noexcept { return symbols_.size(); }
  Label blank() const noexcept { return static_cast<Label>(blank_); }
  char symbol(Label l) const { return symbols_.at(static_cast<std::size_t>(l)); }
  const std::string& symbols() const noexcept { return symbols_; }

  // Number of non-blank characters.
  std::size_t num_chars() const noexcept { return symbols_.size() - 1; }

  bool contains(Label l) const noexcept {
    return l >= 0 && static_cast<std::size_t>(l) < symbols_.size();
  }

  // Non-blank characters in index order.
  LabelSeq characters() const {
    LabelSeq out;
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (i != blank_) out.push_back(static_cast<Label>(i));
    }
    return out;
  }

  // Decoder token ids: characters packed in index order, then end-of-sequence.
  std::size_t decoder_vocab() const noexcept { return num_chars() + 1; }
  std::size_t eos_token() const noexcept { return num_chars(); }
  std::size_t to_token(Label l) const {
    if (l == blank() || !contains(l)) throw Error(ErrorKind::kInvalidTranscript, "blank has no token");
    return static_cast<std::size_t>(l) - (static_cast<std::size_t>(l) > blank_ ? 1 : 0);
  }
  Label from_token(std::size_t tok) const {
    if (tok >= num_chars()) throw Error(ErrorKind::kInvalidArgument, "token has no character");
    return static_cast<Label>(tok >= blank_ ? tok + 1 : tok);
  }

  LabelSeq encode(std::string_view text) const {
    LabelSeq out;
    out.reserve(text.size());
    for (char ch : text) {
      const auto pos = symbols_.find(ch);
      if (pos == std::string::npos || pos == blank_) {
        throw Error(ErrorKind::kInvalidTranscript,
                    std::string("symbol '") + ch + "' is not a transcript character");
      }
      out.push_back(static_cast<Label>(pos));
    }
    return out;
  }

  std::string decode(const LabelSeq& labels) const {
    std::string out;
    out.reserve(labels.size());
    for (Label l : labels) out.push_back(symbol(l));
    return out;
  }

  friend bool operator==(const CharSet&, const CharSet&) = default;

 private:
  std::string symbols_;
  std::size_t blank_ = 0;
};

// N x |V| per-frame log-probabilities.
class LogProbLattice {
 public:
  explicit LogProbLattice(Matrix values, double tol = 1e-9) : values_(std::move(values)) {
    if (values_.rows() == 0 || values_.cols() == 0) {
      throw Error(ErrorKind::kInvalidShape, "lattice needs at least one frame and one symbol");
    }
    for (std::size_t t = 0; t < values_.rows(); ++t) {
      double s = 0.0;
      for (double v : values_.row(t)) s += std::exp(v);
      if (!(std::abs(s - 1.0) <= tol)) {
        throw Error(ErrorKind::kInvalidArgument,
                    "lattice row " + std::to_string(t) + " is not a distribution");
      }
    }
  }

  // Normalizes arbitrary scores row-wise.
  static LogProbLattice from_logits(const Matrix& logits) {
    return LogProbLattice(log_softmax_rows(logits));
  }

  std::size_t frames() const noexcept { return values_.rows(); }
  std::size_t vocab() const noexcept { return values_.cols(); }
  double operator()(std::size_t t, Label k) const { return values_(t, static_cast<std::size_t>(k)); }
  const Matrix& values() const noexcept { return values_; }

 private:
  Matrix values_;
};

struct FrameLabelAssignment {
  LabelSeq labels;
  std::vector<bool> keep_mask;

  std::size_t kept() const {
    return static_cast<std::size_t>(std::count(keep_mask.begin(), keep_mask.end(), true));
  }
  friend bool operator==(const FrameLabelAssignment&, const FrameLabelAssignment&) = default;
};

inline void check_transcript(const LabelSeq& labels, const CharSet& cs) {
  for (Label l : labels) {
    if (!cs.contains(l)) throw Error(ErrorKind::kInvalidTranscript, "label outside character set");
    if (l == cs.blank()) throw Error(ErrorKind::kInvalidTranscript, "blank inside transcript");
  }
}

inline LabelSeq extend_with_blanks(const LabelSeq& labels, const CharSet& cs) {
  check_transcript(labels, cs);
  LabelSeq ext(2 * labels.size() + 1, cs.blank());
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  return ext;
}

// Frames needed by the shortest path: one per label plus a blank between repeats.
inline std::size_t min_frames_for(const LabelSeq& labels) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < labels.size(); ++i) repeats += labels[i] == labels[i - 1] ? 1 : 0;
  return labels.size() + repeats;
}

inline bool alignment_feasible(std::size_t frames, const LabelSeq& labels) {
  return frames >= min_frames_for(labels);
}

// Removes repeats, then blanks.
inline LabelSeq collapse(const LabelSeq& path, Label blank) {
  LabelSeq out;
  Label prev = -1;
  for (Label l : path) {
    if (l != prev && l != blank) out.push_back(l);
    prev = l;
  }
  return out;
}

namespace detail {

inline void check_lattice(const LogProbLattice& lat, const CharSet& cs) {
  if (lat.vocab() != cs.size()) {
    throw Error(ErrorKind::kInvalidShape, "lattice vocab " + std::to_string(lat.vocab()) +
                                              " does not match character set size " +
                                              std::to_string(cs.size()));
  }
}

inline void require_feasible(const LogProbLattice& lat, const LabelSeq& labels) {
  if (!alignment_feasible(lat.frames(), labels)) {
    throw Error(ErrorKind::kInfeasibleAlignment,
                std::to_string(labels.size()) + " labels need " +
                    std::to_string(min_frames_for(labels)) + " frames, lattice has " +
                    std::to_string(lat.frames()));
  }
}

// Whether state s may be entered from s - 2.
inline bool can_skip(const LabelSeq& ext, std::size_t s, Label blank) {
  return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
}

}  // namespace detail

struct CtcLoss {
  double loss = 0.0;  // -log p(labels | lattice)
  Matrix grad;        // d loss / d lattice value, N x |V|
};

inline CtcLoss ctc_loss(const LogProbLattice& lat, const LabelSeq& labels, const CharSet& cs) {
  detail::check_lattice(lat, cs);
  const LabelSeq ext = extend_with_blanks(labels, cs);
  detail::require_feasible(lat, labels);

  const std::size_t n = lat.frames();
  const std::size_t s_count = ext.size();
  const Label blank = cs.blank();

  Matrix alpha(n, s_count, kNegInf);
  alpha(0, 0) = lat(0, ext[0]);
  if (s_count > 1) alpha(0, 1) = lat(0, ext[1]);
  for (std::size_t t = 1; t < n; ++t) {
    for (std::size_t s = 0; s < s_count; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (detail::can_skip(ext, s, blank)) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kNegInf ? kNegInf : a + lat(t, ext[s]);
    }
  }

  // beta(t, s): log-prob of finishing from state s at frame t, excluding t's emission.
  Matrix beta(n, s_count, kNegInf);
  beta(n - 1, s_count - 1) = 0.0;
  if (s_count > 1) beta(n - 1, s_count - 2) = 0.0;
  for (std::size_t t = n - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_count; ++s) {
      double b = beta(t + 1, s) + lat(t + 1, ext[s]);
      if (s + 1 < s_count) b = log_add(b, beta(t + 1, s + 1) + lat(t + 1, ext[s + 1]));
      if (s + 2 < s_count && detail::can_skip(ext, s + 2, blank)) {
        b = log_add(b, beta(t + 1, s + 2) + lat(t + 1, ext[s + 2]));
      }
      beta(t, s) = b;
    }
  }

  double log_p = alpha(n - 1, s_count - 1);
  if (s_count > 1) log_p = log_add(log_p, alpha(n - 1, s_count - 2));

  CtcLoss out{-log_p, Matrix(n, lat.vocab())};
  Matrix occupancy(n, lat.vocab(), kNegInf);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t s = 0; s < s_count; ++s) {
      const auto k = static_cast<std::size_t>(ext[s]);
      occupancy(t, k) = log_add(occupancy(t, k), alpha(t, s) + beta(t, s));
    }
    for (std::size_t k = 0; k < lat.vocab(); ++k) {
      out.grad(t, k) = occupancy(t, k) == kNegInf ? 0.0 : -std::exp(occupancy(t, k) - log_p);
    }
  }
  return out;
}

struct ForcedAlignment {
  FrameLabelAssignment frames;
  double log_score = 0.0;  // log-prob of the single best path
};

// Viterbi over the blank-extended trellis. Ties go to the lower state index.
inline ForcedAlignment ctc_forced_align_scored(const LogProbLattice& lat, const LabelSeq& labels,
                                               const CharSet& cs) {
  detail::check_lattice(lat, cs);
  const LabelSeq ext = extend_with_blanks(labels, cs);
  detail::require_feasible(lat, labels);

  const std::size_t n = lat.frames();
  const std::size_t s_count = ext.size();
  const Label blank = cs.blank();

  Matrix delta(n, s_count, kNegInf);
  std::vector<std::size_t> back(n * s_count, 0);
  delta(0, 0) = lat(0, ext[0]);
  if (s_count > 1) delta(0, 1) = lat(0, ext[1]);
  for (std::size_t t = 1; t < n; ++t) {
    for (std::size_t s = 0; s < s_count; ++s) {
      double best = kNegInf;
      std::size_t arg = s;
      auto consider = [&](std::size_t p) {
        if (delta(t - 1, p) > best) {
          best = delta(t - 1, p);
          arg = p;
        }
      };
      // Ascending state order with strict comparison keeps the lowest index on ties.
      if (detail::can_skip(ext, s, blank)) consider(s - 2);
      if (s >= 1) consider(s - 1);
      consider(s);
      back[t * s_count + s] = arg;
      delta(t, s) = best == kNegInf ? kNegInf : best + lat(t, ext[s]);
    }
  }

  std::size_t state = s_count - 1;
  if (s_count > 1 && delta(n - 1, s_count - 2) >= delta(n - 1, s_count - 1)) state = s_count - 2;

  ForcedAlignment out;
  out.log_score = delta(n - 1, state);
  out.frames.labels.assign(n, blank);
  out.frames.keep_mask.assign(n, false);
  for (std::size_t t = n; t-- > 0;) {
    out.frames.labels[t] = ext[state];
    out.frames.keep_mask[t] = ext[state] != blank;
    if (t > 0) state = back[t * s_count + state];
  }
  return out;
}

inline FrameLabelAssignment ctc_forced_align(const LogProbLattice& lat, const LabelSeq& labels,
                                             const CharSet& cs) {
  return ctc_forced_align_scored(lat, labels, cs).frames;
}

// Per-frame argmax; a frame is kept when its softmax score strictly exceeds
// `threshold` and the argmax is not blank.
inline FrameLabelAssignment ctc_greedy_predict(const LogProbLattice& lat, double threshold,
                                               const CharSet& cs) {
  detail::check_lattice(lat, cs);
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "confidence threshold must lie in [0, 1]");
  }
  FrameLabelAssignment out;
  out.labels.resize(lat.frames());
  out.keep_mask.resize(lat.frames());
  for (std::size_t t = 0; t < lat.frames(); ++t) {
    Label best = 0;
    for (std::size_t k = 1; k < lat.vocab(); ++k) {
      if (lat(t, static_cast<Label>(k)) > lat(t, best)) best = static_cast<Label>(k);
    }
    out.labels[t] = best;
    out.keep_mask[t] = best != cs.blank() && std::exp(lat(t, best)) > threshold;
  }
  return out;
}

// Collapsed best-path transcript.
inline LabelSeq ctc_greedy_transcript(const LogProbLattice& lat, const CharSet& cs) {
  return collapse(ctc_greedy_predict(lat, 0.0, cs).labels, cs.blank());
}

// Incremental CTC prefix probabilities for joint attention/CTC decoding.
//
// A state carries, for every frame t, the log-probability of having emitted
// exactly the prefix by frame t ending in a non-blank (`ends_label`) or a
// blank (`ends_blank`), plus the prefix probability itself (probability mass
// of every label sequence that starts with the prefix).
class CtcPrefixScorer {
 public:
  struct State {
    std::vector<double> ends_label;
    std::vector<double> ends_blank;
    double prefix_logp = 0.0;
    Label last = -1;
  };

  CtcPrefixScorer(const LogProbLattice& lat, const CharSet& cs) : lat_(lat), cs_(cs) {
    detail::check_lattice(lat_, cs_);
  }

  State initial() const {
    const std::size_t n = lat_.frames();
    State st;
    st.ends_label.assign(n, kNegInf);
    st.ends_blank.assign(n, kNegInf);
    double acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      acc += lat_(t, cs_.blank());
      st.ends_blank[t] = acc;
    }
    st.prefix_logp = 0.0;
    return st;
  }

  State extend(const State& prev, Label c) const {
    if (c == cs_.blank() || !cs_.contains(c)) {
      throw Error(ErrorKind::kInvalidTranscript, "prefix extension must be a character");
    }
    const std::size_t n = lat_.frames();
    State st;
    st.last = c;
    st.ends_label.assign(n, kNegInf);
    st.ends_blank.assign(n, kNegInf);
    st.ends_label[0] = prev.last < 0 ? lat_(0, c) : kNegInf;
    double psi = st.ends_label[0];
    for (std::size_t t = 1; t < n; ++t) {
      const double phi =
          prev.last == c ? prev.ends_blank[t - 1] : log_add(prev.ends_blank[t - 1], prev.ends_label[t - 1]);
      st.ends_label[t] = add_finite(log_add(st.ends_label[t - 1], phi), lat_(t, c));
      st.ends_blank[t] =
          add_finite(log_add(st.ends_blank[t - 1], st.ends_label[t - 1]), lat_(t, cs_.blank()));
      psi = log_add(psi, add_finite(phi, lat_(t, c)));
    }
    st.prefix_logp = psi;
    return st;
  }

  // log p(prefix is the whole transcript).
  double final_logp(const State& st) const {
    const std::size_t n = lat_.frames();
    return log_add(st.ends_label[n - 1], st.ends_blank[n - 1]);
  }

 private:
  static double add_finite(double a, double b) { return a == kNegInf ? kNegInf : a + b; }

  const LogProbLattice& lat_;
  const CharSet& cs_;
};

}  // namespace cmatch
