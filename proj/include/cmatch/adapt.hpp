// SPDX-License-Identifier: Apache-2.0
//
// Source pretraining, pseudo-labelling, and joint adaptation with optional
// character-level or domain-level feature matching. Also the per-character
// centroid diagnostic.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmatch/assign.hpp"
#include "cmatch/corpus.hpp"
#include "cmatch/ctc.hpp"
#include "cmatch/error.hpp"
#include "cmatch/metrics.hpp"
#include "cmatch/mmd.hpp"
#include "cmatch/model.hpp"
#include "cmatch/numkit.hpp"
#include "cmatch/text_io.hpp"
#include "cmatch/utterance.hpp"

namespace cmatch {

struct AdaptConfig {
  double lambda = 0.3;
  double gamma = 10.0;
  double keep_ratio = 0.7;
  std::size_t beam_width = 10;
  AssignmentStrategy strategy{};
  KernelSpec kernel{};
  // Build source bags from reference transcripts instead of CTC output.
  bool assign_source_ground_truth = false;

  ModelDims dims{};
  std::size_t pretrain_epochs = 40;
  std::size_t adapt_epochs = 20;
  std::size_t batch_size = 8;
  double step_size = 0.05;
  double clip_norm = 5.0;
  std::size_t patience = 5;
  double dev_fraction = 0.1;
  std::uint64_t seed = 0;

  JointLossConfig joint() const { return {lambda}; }

  void validate() const {
    joint().validate();
    if (!(gamma >= 0.0 && std::isfinite(gamma))) {
      throw Error(ErrorKind::kInvalidArgument, "gamma must be finite and non-negative");
    }
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
      throw Error(ErrorKind::kInvalidArgument, "keep_ratio must lie in (0, 1]");
    }
    if (!(strategy.confidence_threshold >= 0.0 && strategy.confidence_threshold <= 1.0)) {
      throw Error(ErrorKind::kInvalidArgument, "confidence_threshold must lie in [0, 1]");
    }
    if (beam_width == 0) throw Error(ErrorKind::kInvalidArgument, "beam_width must be at least 1");
    if (batch_size == 0) throw Error(ErrorKind::kInvalidArgument, "batch_size must be at least 1");
    if (!(step_size > 0.0 && std::isfinite(step_size))) {
      throw Error(ErrorKind::kInvalidArgument, "step_size must be finite and positive");
    }
    if (!(clip_norm > 0.0)) throw Error(ErrorKind::kInvalidArgument, "clip_norm must be positive");
    if (!(dev_fraction > 0.0 && dev_fraction < 1.0)) {
      throw Error(ErrorKind::kInvalidArgument, "dev_fraction must lie in (0, 1)");
    }
  }
};

// ---------------------------------------------------------------------------
// Training step

// An utterance paired with the transcript it is trained on.
struct TrainItem {
  const Utterance* utterance = nullptr;
  LabelSeq transcript;
};

enum class MatchKind { kNone, kCharacter, kDomain };

struct StepReport {
  double source = 0.0;  // batch-mean joint loss, source domain
  double target = 0.0;  // batch-mean joint loss, target domain
  double match = 0.0;
  double total = 0.0;
  bool match_applied = false;
  std::size_t skipped_utterances = 0;
  bool updated = false;
};

namespace detail {

struct Forward {
  const TrainItem* item;
  JointTerms terms;
};

inline std::vector<Forward> forward_batch(const ParamVars& pv, const ModelParams& p,
                                          std::span<const TrainItem> items, const JointLossConfig& jc,
                                          std::size_t& skipped) {
  std::vector<Forward> out;
  for (const TrainItem& item : items) {
    try {
      out.push_back({&item, joint_loss(pv, p, item.utterance->frames, item.transcript, jc)});
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInfeasibleAlignment && e.kind() != ErrorKind::kInvalidTranscript) throw;
      ++skipped;
    }
  }
  return out;
}

inline Var batch_mean(const std::vector<Forward>& fwd) {
  std::vector<Var> terms;
  for (const Forward& f : fwd) terms.push_back(f.terms.total);
  const std::vector<double> weights(terms.size(), 1.0 / static_cast<double>(terms.size()));
  return weighted_sum(terms, weights);
}

// Frame labels for matching; nullopt when the strategy cannot label this utterance.
inline std::optional<FrameLabelAssignment> matching_labels(const Forward& f, bool is_source,
                                                           const AdaptConfig& cfg, const CharSet& cs) {
  const LogProbLattice lattice(value(f.terms.log_probs), 1e-6);
  std::optional<LabelSeq> transcript;
  if (cfg.strategy.needs_transcript()) {
    if (is_source && !cfg.assign_source_ground_truth) {
      transcript = ctc_greedy_transcript(lattice, cs);
    } else {
      transcript = f.item->transcript;
    }
    if (transcript->empty()) return std::nullopt;
  }
  try {
    return assign_labels(cfg.strategy, lattice, transcript, cs);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kInfeasibleAlignment) throw;
    return std::nullopt;
  }
}

struct BagBuild {
  LabeledFeatureBag bag;
  std::vector<std::pair<std::size_t, std::size_t>> origin;  // (forward index, frame)
};

inline BagBuild build_bag(const std::vector<Forward>& fwd, bool is_source, const AdaptConfig& cfg,
                          const CharSet& cs, std::size_t dim) {
  BagBuild out;
  std::vector<double> rows;
  for (std::size_t i = 0; i < fwd.size(); ++i) {
    const auto labels = matching_labels(fwd[i], is_source, cfg, cs);
    if (!labels) continue;
    const Matrix& feats = value(fwd[i].terms.features);
    for (std::size_t t = 0; t < labels->labels.size(); ++t) {
      if (!labels->keep_mask[t]) continue;
      rows.insert(rows.end(), feats.row(t).begin(), feats.row(t).end());
      out.bag.labels.push_back(labels->labels[t]);
      out.origin.emplace_back(i, t);
    }
  }
  out.bag.features = Matrix(out.bag.labels.size(), dim, std::move(rows));
  return out;
}

// Scatters per-row gradients back onto the feature Vars they came from.
inline void scatter(const Matrix& grad, const BagBuild& build, std::vector<Matrix>& local) {
  for (std::size_t r = 0; r < build.origin.size(); ++r) {
    const auto [i, t] = build.origin[r];
    std::copy_n(grad.row(r).begin(), grad.cols(), local[i].row(t).begin());
  }
}

inline std::optional<std::pair<Var, double>> character_match(const std::vector<Forward>& src,
                                                             const std::vector<Forward>& tgt,
                                                             const AdaptConfig& cfg, const CharSet& cs,
                                                             std::size_t dim) {
  const BagBuild sb = build_bag(src, true, cfg, cs, dim);
  const BagBuild tb = build_bag(tgt, false, cfg, cs, dim);
  CMatchResult res;
  try {
    res = cmatch_loss(sb.bag, tb.bag, cs, cfg.kernel);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNoOverlap) throw;
    return std::nullopt;
  }
  std::vector<Var> inputs;
  std::vector<Matrix> local_s, local_t;
  for (const Forward& f : src) local_s.emplace_back(value(f.terms.features).rows(), dim);
  for (const Forward& f : tgt) local_t.emplace_back(value(f.terms.features).rows(), dim);
  scatter(res.grad_source, sb, local_s);
  scatter(res.grad_target, tb, local_t);
  std::vector<Matrix> grads;
  for (std::size_t i = 0; i < src.size(); ++i) {
    inputs.push_back(src[i].terms.features);
    grads.push_back(std::move(local_s[i]));
  }
  for (std::size_t i = 0; i < tgt.size(); ++i) {
    inputs.push_back(tgt[i].terms.features);
    grads.push_back(std::move(local_t[i]));
  }
  return std::pair{custom_scalar(inputs, res.value, std::move(grads)), res.value};
}

// Squared MMD between per-utterance time-averaged features of each domain.
inline std::pair<Var, double> domain_match(const std::vector<Forward>& src, const std::vector<Forward>& tgt,
                                           const AdaptConfig& cfg, std::size_t dim) {
  auto pool = [&](const std::vector<Forward>& fwd, std::vector<Var>& means) {
    Matrix m(fwd.size(), dim);
    for (std::size_t i = 0; i < fwd.size(); ++i) {
      means.push_back(mean_rows(fwd[i].terms.features));
      std::copy_n(value(means.back()).row(0).begin(), dim, m.row(i).begin());
    }
    return m;
  };
  std::vector<Var> inputs;
  const Matrix ms = pool(src, inputs);
  const Matrix mt = pool(tgt, inputs);
  MmdResult res = mmd_sq_biased(ms, mt, cfg.kernel);
  std::vector<Matrix> grads;
  for (std::size_t i = 0; i < src.size(); ++i) grads.push_back(Matrix::row_vector(res.grad_source.row(i)));
  for (std::size_t i = 0; i < tgt.size(); ++i) grads.push_back(Matrix::row_vector(res.grad_target.row(i)));
  return {custom_scalar(inputs, res.value, std::move(grads)), res.value};
}

inline double global_norm(const Weights& g) {
  double s = 0.0;
  for (const Matrix& m : g) {
    for (double v : m.data()) s += v * v;
  }
  return std::sqrt(s);
}

}  // namespace detail

// Objective: mean_src when the target batch is empty, otherwise
// 0.5 (mean_src + mean_tgt) + gamma * match. One clipped SGD update.
inline StepReport train_step(ModelParams& p, std::span<const TrainItem> src, std::span<const TrainItem> tgt,
                             MatchKind match, const AdaptConfig& cfg) {
  StepReport rep;
  Tape tape;
  const ParamVars pv = bind(tape, p);
  const auto fs = detail::forward_batch(pv, p, src, cfg.joint(), rep.skipped_utterances);
  const auto ft = detail::forward_batch(pv, p, tgt, cfg.joint(), rep.skipped_utterances);
  if (fs.empty() && ft.empty()) return rep;

  std::vector<Var> terms;
  std::vector<double> weights;
  const double domain_weight = (fs.empty() || ft.empty()) ? 1.0 : 0.5;
  if (!fs.empty()) {
    terms.push_back(detail::batch_mean(fs));
    weights.push_back(domain_weight);
    rep.source = scalar(terms.back());
  }
  if (!ft.empty()) {
    terms.push_back(detail::batch_mean(ft));
    weights.push_back(domain_weight);
    rep.target = scalar(terms.back());
  }
  if (match != MatchKind::kNone && cfg.gamma > 0.0 && !fs.empty() && !ft.empty()) {
    std::optional<std::pair<Var, double>> m;
    if (match == MatchKind::kCharacter) {
      m = detail::character_match(fs, ft, cfg, p.charset, p.dims.feature_dim);
    } else {
      m = detail::domain_match(fs, ft, cfg, p.dims.feature_dim);
    }
    if (m) {
      terms.push_back(m->first);
      weights.push_back(cfg.gamma);
      rep.match = m->second;
      rep.match_applied = true;
    }
  }
  const Var total = weighted_sum(terms, weights);
  rep.total = scalar(total);
  if (!std::isfinite(rep.total)) throw Error(ErrorKind::kNumerical, "training loss is not finite");

  tape.backward(total);
  Weights g = gradients(tape, pv);
  const double norm = detail::global_norm(g);
  const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const auto w = p.weights[i].data();
    const auto gi = g[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg.step_size * clip * gi[k];
  }
  rep.updated = true;
  return rep;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

// Mean joint loss over items that admit one; 0 when none do.
inline double mean_joint_loss(const ModelParams& p, std::span<const TrainItem> items, const JointLossConfig& jc) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const TrainItem& item : items) {
    Tape tape;
    const ParamVars pv = bind(tape, p);
    try {
      sum += scalar(joint_loss(pv, p, item.utterance->frames, item.transcript, jc).total);
      ++n;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInfeasibleAlignment && e.kind() != ErrorKind::kInvalidTranscript) throw;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

struct Decoded {
  std::string id;
  std::string text;
  double confidence = 0.0;
};

inline Decoded decode_utterance(const ModelParams& p, const Utterance& u, const AdaptConfig& cfg) {
  const BeamResult r = beam_search(p, u.frames, cfg.joint(), cfg.beam_width, default_max_len(p, u.frames));
  return {u.id, p.charset.decode(r.best().tokens), r.confidence};
}

inline std::vector<Decoded> decode_corpus(const ModelParams& p, const DomainCorpus& corpus, const AdaptConfig& cfg) {
  std::vector<Decoded> out;
  out.reserve(corpus.utterances.size());
  for (const Utterance& u : corpus.utterances) out.push_back(decode_utterance(p, u, cfg));
  return out;
}

// Character error tally of beam decoding against the reference transcripts.
inline ErrorTally corpus_cer(const ModelParams& p, const DomainCorpus& corpus, const AdaptConfig& cfg) {
  ErrorTally tally;
  for (const Utterance& u : corpus.utterances) {
    if (!u.transcript) {
      throw Error(ErrorKind::kMissingTranscript, "utterance " + u.id + " has no reference transcript");
    }
    tally.add(char_edits(*u.transcript, decode_utterance(p, u, cfg).text), u.transcript->size());
  }
  return tally;
}

inline std::vector<TrainItem> reference_items(const DomainCorpus& corpus, const CharSet& cs) {
  std::vector<TrainItem> out;
  for (const Utterance& u : corpus.utterances) {
    if (!u.transcript) {
      throw Error(ErrorKind::kMissingTranscript, "utterance " + u.id + " has no transcript");
    }
    out.push_back({&u, cs.encode(*u.transcript)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loops

struct EpochMetrics {
  std::size_t epoch = 0;
  double source = 0.0;  // mean over steps
  double target = 0.0;
  double match = 0.0;
  double total = 0.0;
  double dev_cer = 0.0;
  double dev_loss = 0.0;
};

inline constexpr std::string_view kEpochCsvHeader = "epoch,L_src,L_tgt,L_cmatch,total,dev_cer";

inline void write_epoch_csv(std::ostream& out, const std::vector<EpochMetrics>& rows) {
  out << kEpochCsvHeader << '\n';
  for (const EpochMetrics& m : rows) {
    out << m.epoch << ',' << format_real(m.source) << ',' << format_real(m.target) << ','
        << format_real(m.match) << ',' << format_real(m.total) << ',' << format_real(m.dev_cer) << '\n';
  }
}

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;  // 0: initial parameters kept
  std::size_t steps = 0;
  std::size_t match_skipped_steps = 0;
  std::size_t skipped_utterances = 0;
};

namespace detail {

// Independent deterministic stream per purpose.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

// Cycles through a list in reshuffled passes.
class BatchCycler {
 public:
  BatchCycler(std::vector<TrainItem> items, std::mt19937_64 rng) : items_(std::move(items)), rng_(std::move(rng)) {
    reshuffle();
  }

  std::vector<TrainItem> next(std::size_t n) {
    std::vector<TrainItem> out;
    if (items_.empty()) return out;
    while (out.size() < n) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(items_[order_[pos_++]]);
    }
    return out;
  }

  // Consecutive batches covering one shuffled pass.
  std::vector<std::vector<TrainItem>> epoch(std::size_t n) {
    reshuffle();
    std::vector<std::vector<TrainItem>> out;
    for (std::size_t start = 0; start < order_.size(); start += n) {
      std::vector<TrainItem> batch;
      for (std::size_t k = start; k < std::min(order_.size(), start + n); ++k) batch.push_back(items_[order_[k]]);
      out.push_back(std::move(batch));
    }
    pos_ = order_.size();
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(items_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<TrainItem> items_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct LoopSpec {
  std::vector<TrainItem> source_train;
  std::vector<TrainItem> source_dev;
  std::vector<TrainItem> target_train;
  std::vector<TrainItem> target_dev;
  const DomainCorpus* cer_dev = nullptr;  // decoded each epoch for dev CER
  MatchKind match = MatchKind::kNone;
  std::size_t epochs = 0;
  std::uint64_t purpose = 0;
};

// Dev objective: source dev loss, averaged with target dev loss when present.
inline double dev_objective(const ModelParams& p, const LoopSpec& spec, const JointLossConfig& jc) {
  const double s = mean_joint_loss(p, spec.source_dev, jc);
  if (spec.target_dev.empty()) return s;
  return 0.5 * (s + mean_joint_loss(p, spec.target_dev, jc));
}

// Epoch loop with early stopping. Candidates are the trained epochs only: the
// dev targets of adaptation come from the starting model, which would
// otherwise be favoured. Returns the starting parameters when no epoch runs.
inline TrainResult train_loop(ModelParams params, const LoopSpec& spec, const AdaptConfig& cfg) {
  TrainResult out{params, {}, 0, 0, 0, 0};
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  BatchCycler src(spec.source_train, stream(cfg.seed, spec.purpose));
  BatchCycler tgt(spec.target_train, stream(cfg.seed, spec.purpose + 1));

  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    std::size_t steps = 0;
    for (const auto& sb : src.epoch(cfg.batch_size)) {
      const auto tb = tgt.next(sb.size());
      const StepReport r = train_step(params, sb, tb, spec.match, cfg);
      out.skipped_utterances += r.skipped_utterances;
      if (!r.updated) continue;
      ++steps;
      ++out.steps;
      if (spec.match != MatchKind::kNone && !tb.empty() && !r.match_applied) ++out.match_skipped_steps;
      m.source += r.source;
      m.target += r.target;
      m.match += r.match;
      m.total += r.total;
    }
    if (steps > 0) {
      const double inv = 1.0 / static_cast<double>(steps);
      m.source *= inv;
      m.target *= inv;
      m.match *= inv;
      m.total *= inv;
    }
    // Without held-out data the epoch's training objective stands in.
    const bool no_dev = spec.source_dev.empty() && spec.target_dev.empty();
    m.dev_loss = no_dev ? m.total : dev_objective(params, spec, cfg.joint());
    if (spec.cer_dev != nullptr) m.dev_cer = corpus_cer(params, *spec.cer_dev, cfg).rate();
    out.epochs.push_back(m);

    if (m.dev_loss < best) {
      best = m.dev_loss;
      out.params = params;
      out.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return out;
}

}  // namespace detail

// Trains a fresh model on the source corpus. The last dev_fraction of the
// corpus is held out for early stopping.
inline TrainResult pretrain_run(const DomainCorpus& source, const CharSet& cs, const AdaptConfig& cfg) {
  cfg.validate();
  if (source.utterances.empty()) throw Error(ErrorKind::kEmptyDomain, "source corpus is empty");
  const auto [train, dev] = split_tail(source, cfg.dev_fraction);
  detail::LoopSpec spec;
  spec.source_train = reference_items(train, cs);
  spec.source_dev = reference_items(dev, cs);
  spec.cer_dev = &dev;
  spec.epochs = cfg.pretrain_epochs;
  spec.purpose = 100;
  return detail::train_loop(init_model(cfg.dims, cs, cfg.lambda, cfg.seed), spec, cfg);
}

inline ModelParams pretrain(const DomainCorpus& source, const CharSet& cs, const AdaptConfig& cfg) {
  return pretrain_run(source, cs, cfg).params;
}

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabel {
  std::string id;
  std::string transcript;
  double confidence = 0.0;
};

// Sorted by confidence, highest first; ties keep corpus order.
using PseudoLabelSet = std::vector<PseudoLabel>;

inline PseudoLabelSet pseudo_label(const ModelParams& p, const DomainCorpus& target, const AdaptConfig& cfg) {
  PseudoLabelSet out;
  for (const Decoded& d : decode_corpus(p, target, cfg)) out.push_back({d.id, d.text, d.confidence});
  std::stable_sort(out.begin(), out.end(),
                   [](const PseudoLabel& a, const PseudoLabel& b) { return a.confidence > b.confidence; });
  return out;
}

// Keeps the ceil(keep_ratio * n) most confident entries.
inline PseudoLabelSet filter_pseudo(const PseudoLabelSet& set, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "keep_ratio must lie in (0, 1]");
  }
  const double want = keep_ratio * static_cast<double>(set.size());
  // Absorbs rounding in the product, e.g. 0.7 * 10.
  auto keep = static_cast<std::size_t>(std::ceil(want - 1e-9));
  keep = std::min(keep, set.size());
  return PseudoLabelSet(set.begin(), set.begin() + static_cast<std::ptrdiff_t>(keep));
}

inline constexpr std::string_view kPseudoCsvHeader = "id,transcript,confidence";

inline void write_pseudo_csv(std::ostream& out, const PseudoLabelSet& set) {
  out << kPseudoCsvHeader << '\n';
  for (const PseudoLabel& p : set) out << p.id << ',' << p.transcript << ',' << format_real(p.confidence) << '\n';
}

// ---------------------------------------------------------------------------
// Adaptation

enum class Method { kSourceOnly, kSelfTrainingOnly, kDomainMmd, kCMatch };

inline constexpr std::array<Method, 4> kAllMethods = {Method::kSourceOnly, Method::kSelfTrainingOnly,
                                                      Method::kDomainMmd, Method::kCMatch};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::kSourceOnly: return "source-only";
    case Method::kSelfTrainingOnly: return "self-training-only";
    case Method::kDomainMmd: return "mmd-domain";
    case Method::kCMatch: return "cmatch";
  }
  return "?";
}

inline Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::kUsage, "unknown method '" + std::string(name) +
                                     "' (expected cmatch, mmd-domain, source-only or self-training-only)");
}

// Source-only returns the model unchanged. Every other method self-trains on
// the (already filtered) pseudo labels, adding the matching term of its kind.
// The last dev_fraction of the pseudo-labelled utterances, in target corpus
// order, is held out for early stopping.
inline TrainResult adapt_run(const ModelParams& model, const DomainCorpus& source, const DomainCorpus& target,
                             const PseudoLabelSet& pseudo, const AdaptConfig& cfg, Method method) {
  cfg.validate();
  validate(model);
  TrainResult out{model, {}, 0, 0, 0, 0};
  if (method == Method::kSourceOnly) return out;
  if (source.utterances.empty()) throw Error(ErrorKind::kEmptyDomain, "source corpus is empty");

  const CharSet& cs = model.charset;
  const auto [strain, sdev] = split_tail(source, cfg.dev_fraction);

  std::map<std::string, const PseudoLabel*> by_id;
  for (const PseudoLabel& pl : pseudo) by_id[pl.id] = &pl;
  std::vector<TrainItem> tgt;
  for (const Utterance& u : target.utterances) {
    const auto it = by_id.find(u.id);
    if (it == by_id.end() || it->second->transcript.empty()) continue;
    tgt.push_back({&u, cs.encode(it->second->transcript)});
  }
  if (tgt.empty()) throw Error(ErrorKind::kEmptyDomain, "no usable pseudo-labelled target utterances");

  detail::LoopSpec spec;
  spec.source_train = reference_items(strain, cs);
  spec.source_dev = reference_items(sdev, cs);
  spec.cer_dev = &sdev;
  if (tgt.size() >= 2) {
    const auto hold = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                   std::floor(cfg.dev_fraction * static_cast<double>(tgt.size()))));
    spec.target_dev.assign(tgt.end() - static_cast<std::ptrdiff_t>(hold), tgt.end());
    tgt.resize(tgt.size() - hold);
  }
  spec.target_train = std::move(tgt);
  spec.match = method == Method::kCMatch     ? MatchKind::kCharacter
               : method == Method::kDomainMmd ? MatchKind::kDomain
                                              : MatchKind::kNone;
  spec.epochs = cfg.adapt_epochs;
  spec.purpose = 200;
  return detail::train_loop(model, spec, cfg);
}

inline ModelParams adapt(const ModelParams& model, const DomainCorpus& source, const DomainCorpus& target,
                         const PseudoLabelSet& pseudo, const AdaptConfig& cfg) {
  return adapt_run(model, source, target, pseudo, cfg, Method::kCMatch).params;
}

inline ModelParams adapt_domain_mmd(const ModelParams& model, const DomainCorpus& source,
                                    const DomainCorpus& target, const PseudoLabelSet& pseudo,
                                    const AdaptConfig& cfg) {
  return adapt_run(model, source, target, pseudo, cfg, Method::kDomainMmd).params;
}

// ---------------------------------------------------------------------------
// Centroid diagnostic

struct CentroidTable {
  // Indexed by character label; absent when no frame was kept for it.
  std::vector<std::optional<std::vector<double>>> centroids;
  std::vector<std::size_t> counts;
};

// Mean encoder feature of the kept frames of each character. Strategies that
// need a transcript use the utterance's reference transcript.
inline CentroidTable character_centroids(const ModelParams& p, const DomainCorpus& corpus,
                                         const AssignmentStrategy& strategy, const CharSet& cs) {
  const std::size_t dim = p.dims.feature_dim;
  std::vector<std::vector<double>> sums(cs.size(), std::vector<double>(dim, 0.0));
  CentroidTable out;
  out.counts.assign(cs.size(), 0);
  for (const Utterance& u : corpus.utterances) {
    const Matrix feats = encode(p, u.frames);
    const LogProbLattice lattice = ctc_lattice_from_features(p, feats);
    std::optional<LabelSeq> transcript;
    if (u.transcript) transcript = cs.encode(*u.transcript);
    FrameLabelAssignment a;
    try {
      a = assign_labels(strategy, lattice, transcript, cs);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInfeasibleAlignment) throw;
      continue;
    }
    for (std::size_t t = 0; t < a.labels.size(); ++t) {
      if (!a.keep_mask[t]) continue;
      const auto l = static_cast<std::size_t>(a.labels[t]);
      ++out.counts[l];
      for (std::size_t d = 0; d < dim; ++d) sums[l][d] += feats(t, d);
    }
  }
  out.centroids.resize(cs.size());
  for (Label c : cs.characters()) {
    const auto l = static_cast<std::size_t>(c);
    if (out.counts[l] == 0) continue;
    for (double& v : sums[l]) v /= static_cast<double>(out.counts[l]);
    out.centroids[l] = std::move(sums[l]);
  }
  return out;
}

// Euclidean distance per character; absent unless both tables hold it.
inline std::vector<std::optional<double>> centroid_distances(const CentroidTable& a, const CentroidTable& b,
                                                             const CharSet& cs) {
  std::vector<std::optional<double>> out(cs.size());
  for (Label c : cs.characters()) {
    const auto l = static_cast<std::size_t>(c);
    if (!a.centroids[l] || !b.centroids[l]) continue;
    double s = 0.0;
    for (std::size_t d = 0; d < a.centroids[l]->size(); ++d) {
      const double diff = (*a.centroids[l])[d] - (*b.centroids[l])[d];
      s += diff * diff;
    }
    out[l] = std::sqrt(s);
  }
  return out;
}

// Mean over present distances; nullopt when none is present.
inline std::optional<double> mean_distance(const std::vector<std::optional<double>>& d) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& v : d) {
    if (v) {
      s += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

}  // namespace cmatch
