// SPDX-License-Identifier: Apache-2.0
//
// Toy joint CTC-attention recognizer.
//
//   encoder:  frames -> tanh(affine) -> tanh(affine) -> features (N x D_f)
//   ctc head: features -> affine -> log-softmax over blank + characters
//   decoder:  previous token embedding queries the features with one
//             single-head cross-attention block; (context + embedding) goes
//             through an output affine over characters + end-of-sequence.
//
// Training losses are built on a Tape; decoding uses plain matrix code.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmatch/ctc.hpp"
#include "cmatch/error.hpp"
#include "cmatch/numkit.hpp"
#include "cmatch/utterance.hpp"

namespace cmatch {

enum ParamId : std::size_t {
  kEncW1,
  kEncB1,
  kEncW2,
  kEncB2,
  kCtcW,
  kCtcB,
  kDecEmbed,
  kAttQuery,
  kAttKey,
  kAttValue,
  kOutW,
  kOutB,
  kNumParams,
};

inline constexpr std::array<std::string_view, kNumParams> kParamNames = {
    "encoder.w1", "encoder.b1", "encoder.w2",      "encoder.b2",    "ctc.w",      "ctc.b",
    "decoder.embed", "decoder.query", "decoder.key", "decoder.value", "decoder.out_w", "decoder.out_b",
};

struct ModelDims {
  std::size_t input_dim = 8;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 16;
  std::size_t attention_dim = 16;
  std::size_t subsample = 1;  // frames stacked per encoder step

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct JointLossConfig {
  double lambda = 0.3;  // weight of the CTC branch

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw Error(ErrorKind::kInvalidArgument, "ctc weight lambda must lie in [0, 1]");
    }
  }
};

using Weights = std::array<Matrix, kNumParams>;

struct ModelParams {
  ModelDims dims;
  CharSet charset;
  double ctc_weight = 0.3;  // lambda the model was trained with
  Weights weights;

  const Matrix& operator[](ParamId id) const { return weights[id]; }
  Matrix& operator[](ParamId id) { return weights[id]; }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Expected (rows, cols) of every parameter.
inline std::array<std::pair<std::size_t, std::size_t>, kNumParams> param_shapes(const ModelDims& d,
                                                                             const CharSet& cs) {
  const std::size_t in = d.input_dim * d.subsample;
  const std::size_t v = cs.size();
  const std::size_t vd = cs.decoder_vocab();
  return {{{in, d.hidden_dim},
           {1, d.hidden_dim},
           {d.hidden_dim, d.feature_dim},
           {1, d.feature_dim},
           {d.feature_dim, v},
           {1, v},
           {vd, d.feature_dim},
           {d.feature_dim, d.attention_dim},
           {d.feature_dim, d.attention_dim},
           {d.feature_dim, d.feature_dim},
           {d.feature_dim, vd},
           {1, vd}}};
}

inline void validate(const ModelParams& p) {
  if (p.dims.subsample == 0 || p.dims.input_dim == 0 || p.dims.hidden_dim == 0 ||
      p.dims.feature_dim == 0 || p.dims.attention_dim == 0) {
    throw Error(ErrorKind::kInvalidShape, "model dimensions must be positive");
  }
  const auto shapes = param_shapes(p.dims, p.charset);
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const Matrix& m = p.weights[i];
    if (m.rows() != shapes[i].first || m.cols() != shapes[i].second) {
      throw Error(ErrorKind::kInvalidShape, std::string(kParamNames[i]) + " is " + shape_string(m) +
                                                ", expected " + std::to_string(shapes[i].first) +
                                                "x" + std::to_string(shapes[i].second));
    }
    if (!m.all_finite()) {
      throw Error(ErrorKind::kNumerical, std::string(kParamNames[i]) + " holds non-finite values");
    }
  }
}

// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
inline ModelParams init_model(const ModelDims& dims, const CharSet& cs, double ctc_weight,
                              std::uint64_t seed) {
  ModelParams p{dims, cs, ctc_weight, {}};
  std::mt19937_64 rng(seed);
  const auto shapes = param_shapes(dims, cs);
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const auto [rows, cols] = shapes[i];
    const bool bias = rows == 1 && (i == kEncB1 || i == kEncB2 || i == kCtcB || i == kOutB);
    // Embedding rows are looked up, not multiplied, so their fan-in is one row's width.
    const std::size_t fan_in = i == kDecEmbed ? cols : rows;
    p.weights[i] = bias ? Matrix(rows, cols) : uniform_init(rows, cols, fan_in, rng);
  }
  return p;
}

// Concatenates `k` consecutive frames per row; the tail is padded by
// repeating the last frame.
inline Matrix stack_frames(const Matrix& frames, std::size_t k) {
  if (k <= 1) return frames;
  const std::size_t n = frames.rows();
  const std::size_t out_rows = (n + k - 1) / k;
  Matrix out(out_rows, frames.cols() * k);
  for (std::size_t r = 0; r < out_rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src = std::min(r * k + j, n - 1);
      std::copy_n(frames.row(src).begin(), frames.cols(), out.row(r).begin() + j * frames.cols());
    }
  }
  return out;
}

inline void check_frames(const ModelParams& p, const Matrix& frames) {
  if (frames.rows() == 0) throw Error(ErrorKind::kInvalidShape, "utterance has no frames");
  if (frames.cols() != p.dims.input_dim) {
    throw Error(ErrorKind::kInvalidShape, "frames have dimension " + std::to_string(frames.cols()) +
                                              ", model expects " + std::to_string(p.dims.input_dim));
  }
}

// ---------------------------------------------------------------------------
// Tape graph

struct ParamVars {
  std::array<Var, kNumParams> vars;
  Var operator[](ParamId id) const { return vars[id]; }
};

inline ParamVars bind(Tape& tape, const ModelParams& p) {
  ParamVars out;
  for (std::size_t i = 0; i < kNumParams; ++i) out.vars[i] = tape.leaf(p.weights[i]);
  return out;
}

inline Weights gradients(const Tape& tape, const ParamVars& pv) {
  Weights g;
  for (std::size_t i = 0; i < kNumParams; ++i) g[i] = tape.grad(pv.vars[i]);
  return g;
}

inline Var encode(const ParamVars& pv, const ModelParams& p, const Matrix& frames) {
  check_frames(p, frames);
  Tape& tape = *pv[kEncW1].tape;
  Var x = tape.leaf(stack_frames(frames, p.dims.subsample));
  Var h = tanh(add_row(matmul(x, pv[kEncW1]), pv[kEncB1]));
  return tanh(add_row(matmul(h, pv[kEncW2]), pv[kEncB2]));
}

inline Var ctc_log_probs(const ParamVars& pv, Var features) {
  return log_softmax_rows(add_row(matmul(features, pv[kCtcW]), pv[kCtcB]));
}

// -log p(labels) from a log-prob Var, with the analytic forward-backward gradient.
inline Var ctc_loss(Var log_probs, const LabelSeq& labels, const CharSet& cs) {
  // Rows come from log_softmax_rows, so they are normalized up to rounding.
  LogProbLattice lat(value(log_probs), 1e-6);
  CtcLoss res = ctc_loss(lat, labels, cs);
  return custom_scalar(log_probs, res.loss, std::move(res.grad));
}

// Teacher-forced decoder log-probs for inputs [eos, y_1 .. y_M]; one row per
// predicted token (y_1 .. y_M, eos).
inline Var decoder_log_probs(const ParamVars& pv, const ModelParams& p, Var features,
                             const LabelSeq& transcript) {
  const CharSet& cs = p.charset;
  std::vector<std::size_t> inputs{cs.eos_token()};
  for (Label l : transcript) inputs.push_back(cs.to_token(l));

  Var embedded = gather_rows(pv[kDecEmbed], inputs);
  Var query = matmul(embedded, pv[kAttQuery]);
  Var keys = matmul(features, pv[kAttKey]);
  Var vals = matmul(features, pv[kAttValue]);
  Var scores = scale(matmul_nt(query, keys), 1.0 / std::sqrt(static_cast<double>(p.dims.attention_dim)));
  Var context = matmul(softmax_rows(scores), vals);
  Var logits = add_row(matmul(add(context, embedded), pv[kOutW]), pv[kOutB]);
  return log_softmax_rows(logits);
}

inline Var attention_loss(const ParamVars& pv, const ModelParams& p, Var features,
                          const LabelSeq& transcript) {
  const CharSet& cs = p.charset;
  std::vector<std::size_t> targets;
  for (Label l : transcript) targets.push_back(cs.to_token(l));
  targets.push_back(cs.eos_token());
  return mean_nll(decoder_log_probs(pv, p, features, transcript), std::move(targets));
}

struct JointTerms {
  Var total;
  Var attention;
  Var ctc;
  Var features;
  Var log_probs;  // ctc head output
};

// (1 - lambda) * attention cross entropy + lambda * ctc loss.
inline JointTerms joint_loss(const ParamVars& pv, const ModelParams& p, const Matrix& frames,
                             const LabelSeq& transcript, const JointLossConfig& cfg) {
  cfg.validate();
  check_transcript(transcript, p.charset);
  if (transcript.empty()) throw Error(ErrorKind::kInvalidTranscript, "joint loss needs a non-empty transcript");
  JointTerms out;
  out.features = encode(pv, p, frames);
  if (!alignment_feasible(value(out.features).rows(), transcript)) {
    throw Error(ErrorKind::kInfeasibleAlignment,
                "transcript of " + std::to_string(transcript.size()) + " characters does not fit " +
                    std::to_string(value(out.features).rows()) + " encoder frames; skip utterance");
  }
  out.log_probs = ctc_log_probs(pv, out.features);
  out.ctc = ctc_loss(out.log_probs, transcript, p.charset);
  out.attention = attention_loss(pv, p, out.features, transcript);
  const std::array<Var, 2> terms{out.attention, out.ctc};
  const std::array<double, 2> weights{1.0 - cfg.lambda, cfg.lambda};
  out.total = weighted_sum(terms, weights);
  return out;
}

// ---------------------------------------------------------------------------
// Plain evaluation

inline Matrix encode(const ModelParams& p, const Matrix& frames) {
  Tape tape;
  ParamVars pv = bind(tape, p);
  return value(encode(pv, p, frames));
}

inline LogProbLattice ctc_lattice_from_features(const ModelParams& p, const Matrix& features) {
  Matrix logits = matmul(features, p[kCtcW]);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    for (std::size_t c = 0; c < logits.cols(); ++c) logits(r, c) += p[kCtcB](0, c);
  }
  return LogProbLattice(log_softmax_rows(logits), 1e-6);
}

inline LogProbLattice ctc_lattice(const ModelParams& p, const Matrix& frames) {
  return ctc_lattice_from_features(p, encode(p, frames));
}

struct JointLossValue {
  double total = 0.0;
  double attention = 0.0;
  double ctc = 0.0;
  Weights grads;
};

inline JointLossValue joint_loss(const ModelParams& p, const Utterance& utt, const LabelSeq& transcript,
                                 const JointLossConfig& cfg) {
  Tape tape;
  ParamVars pv = bind(tape, p);
  JointTerms terms = joint_loss(pv, p, utt.frames, transcript, cfg);
  tape.backward(terms.total);
  return {scalar(terms.total), scalar(terms.attention), scalar(terms.ctc), gradients(tape, pv)};
}

// Cached keys/values for step-wise decoding of one utterance.
class DecoderState {
 public:
  DecoderState(const ModelParams& p, const Matrix& features)
      : p_(p), keys_(matmul(features, p[kAttKey])), values_(matmul(features, p[kAttValue])) {}

  // Log-probabilities of the next token given the previous one.
  std::vector<double> next_log_probs(std::size_t prev_token) const {
    const Matrix& embed = p_[kDecEmbed];
    const auto e = embed.row(prev_token);
    Matrix query = matmul(Matrix::row_vector(e), p_[kAttQuery]);
    Matrix scores = matmul_nt(query, keys_);
    const double s = 1.0 / std::sqrt(static_cast<double>(p_.dims.attention_dim));
    for (double& v : scores.data()) v *= s;
    Matrix context = matmul(softmax_rows(scores), values_);
    for (std::size_t c = 0; c < context.cols(); ++c) context(0, c) += e[c];
    Matrix logits = matmul(context, p_[kOutW]);
    for (std::size_t c = 0; c < logits.cols(); ++c) logits(0, c) += p_[kOutB](0, c);
    std::vector<double> out(logits.cols());
    log_softmax_row(logits.row(0), out);
    return out;
  }

 private:
  const ModelParams& p_;
  Matrix keys_;
  Matrix values_;
};

struct Hypothesis {
  LabelSeq tokens;  // characters, without end-of-sequence
  double joint_score = 0.0;
  double att_score = 0.0;
  double ctc_score = 0.0;
};

struct BeamResult {
  std::vector<Hypothesis> hypotheses;  // best first
  double confidence = 0.0;             // best joint score per emitted token (end-of-sequence included)

  const Hypothesis& best() const { return hypotheses.front(); }
};

inline double mix_scores(double att, double ctc, double lambda) {
  if (lambda == 0.0) return att;
  if (lambda == 1.0) return ctc;
  return (1.0 - lambda) * att + lambda * ctc;
}

namespace detail {

inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.joint_score != b.joint_score) return a.joint_score > b.joint_score;
  return a.tokens < b.tokens;
}

}  // namespace detail

// Length-synchronous beam search scored by (1 - lambda) log P_att + lambda log
// P_ctc, where the CTC term is the exact prefix probability of each partial
// hypothesis and the full-sequence probability once end-of-sequence is
// emitted. Partial scores never increase along a hypothesis, so the search
// stops once the best finished hypothesis beats every live one.
inline BeamResult beam_search(const ModelParams& p, const Matrix& frames, const JointLossConfig& cfg,
                              std::size_t beam_width, std::size_t max_len) {
  cfg.validate();
  if (beam_width == 0) throw Error(ErrorKind::kInvalidArgument, "beam width must be at least 1");
  const CharSet& cs = p.charset;
  const Matrix features = encode(p, frames);
  const LogProbLattice lattice = ctc_lattice_from_features(p, features);
  const CtcPrefixScorer scorer(lattice, cs);
  const DecoderState decoder(p, features);
  const LabelSeq chars = cs.characters();

  struct Live {
    Hypothesis hyp;
    CtcPrefixScorer::State ctc;
  };
  std::vector<Live> live{{Hypothesis{}, scorer.initial()}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 0;; ++step) {
    std::vector<Live> expanded;
    for (const Live& node : live) {
      const std::size_t prev = node.hyp.tokens.empty() ? cs.eos_token() : cs.to_token(node.hyp.tokens.back());
      const std::vector<double> att = decoder.next_log_probs(prev);

      Hypothesis done = node.hyp;
      done.att_score += att[cs.eos_token()];
      done.ctc_score = scorer.final_logp(node.ctc);
      done.joint_score = mix_scores(done.att_score, done.ctc_score, cfg.lambda);
      finished.push_back(std::move(done));

      if (step == max_len) continue;
      for (Label c : chars) {
        Live next{node.hyp, scorer.extend(node.ctc, c)};
        next.hyp.tokens.push_back(c);
        next.hyp.att_score += att[cs.to_token(c)];
        next.hyp.ctc_score = next.ctc.prefix_logp;
        next.hyp.joint_score = mix_scores(next.hyp.att_score, next.hyp.ctc_score, cfg.lambda);
        expanded.push_back(std::move(next));
      }
    }
    std::sort(expanded.begin(), expanded.end(),
              [](const Live& a, const Live& b) { return detail::better(a.hyp, b.hyp); });
    if (expanded.size() > beam_width) expanded.resize(beam_width);
    live = std::move(expanded);

    const auto best_done = std::min_element(finished.begin(), finished.end(), detail::better);
    if (live.empty() || best_done->joint_score >= live.front().hyp.joint_score) break;
  }

  std::sort(finished.begin(), finished.end(), detail::better);
  if (finished.size() > beam_width) finished.resize(beam_width);
  BeamResult out;
  out.hypotheses = std::move(finished);
  out.confidence = out.best().joint_score / static_cast<double>(out.best().tokens.size() + 1);
  return out;
}

// Default decode length: CTC cannot emit more labels than encoder frames.
inline std::size_t default_max_len(const ModelParams& p, const Matrix& frames) {
  return (frames.rows() + p.dims.subsample - 1) / p.dims.subsample;
}

}  // namespace cmatch
