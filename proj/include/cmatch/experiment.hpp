// SPDX-License-Identifier: Apache-2.0
//
// End-to-end synthetic adaptation task: generate a clean source domain and a
// shifted target domain, pretrain on the source, pseudo-label the target, run
// each adaptation method, and score it on held-out target utterances.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <tuple>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cmatch/adapt.hpp"
#include "cmatch/assign.hpp"
#include "cmatch/corpus.hpp"
#include "cmatch/metrics.hpp"
#include "cmatch/text_io.hpp"

namespace cmatch {

struct TaskSpec {
  GeneratorSpec generator{};  // shape of every corpus; counts and seeds set per task
  std::size_t source_utterances = 400;
  std::size_t target_utterances = 400;
  std::size_t test_utterances = 200;
  ShiftKind shift_kind = ShiftKind::kDevice;
  double shift_perturbation = 0.25;
  double shift_bias = 0.2;
  double noise_amplitude = 0.5;
};

struct TaskData {
  DomainCorpus source;       // clean, labelled
  DomainCorpus source_test;  // clean, held out
  DomainCorpus target;       // shifted, labels hidden
  DomainCorpus target_test;  // shifted, held out, labels hidden
};

// Deterministic sub-seed for stream `k` of a task seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(k), 0x636d6174u};
  std::mt19937_64 rng(seq);
  return rng();
}

inline DomainShiftSpec make_shift(const TaskSpec& spec, std::uint64_t seed, std::uint64_t stream) {
  if (spec.shift_kind == ShiftKind::kDevice) {
    return make_device_shift(spec.generator.input_dim, spec.shift_perturbation, spec.shift_bias,
                             derive_seed(seed, 10), "device");
  }
  return make_environment_shift(spec.noise_amplitude, derive_seed(seed, stream), "environment");
}

inline TaskData make_task(const TaskSpec& spec, std::uint64_t seed) {
  auto corpus = [&](std::size_t n, std::uint64_t stream, const char* prefix) {
    GeneratorSpec g = spec.generator;
    g.num_utterances = n;
    g.prototype_seed = derive_seed(seed, 0);
    g.seed = derive_seed(seed, stream);
    g.domain_tag = "clean";
    g.id_prefix = prefix;
    return generate(g);
  };
  TaskData out;
  out.source = corpus(spec.source_utterances, 1, "src");
  out.source_test = corpus(spec.test_utterances, 2, "srctest");
  out.target = apply_shift(corpus(spec.target_utterances, 3, "tgt"), make_shift(spec, seed, 11));
  out.target_test = apply_shift(corpus(spec.test_utterances, 4, "tgttest"), make_shift(spec, seed, 12));
  return out;
}

struct MethodOutcome {
  Method method = Method::kSourceOnly;
  double target_cer = 0.0;
  double target_wer = 0.0;
  TrainResult training;
};

struct CentroidRow {
  Label character = 0;
  std::optional<double> before;
  std::optional<double> after;
};

struct ExperimentOutcome {
  ModelParams pretrained;
  PseudoLabelSet kept;
  double source_test_cer = 0.0;
  std::vector<EpochMetrics> pretrain_epochs;
  std::size_t pseudo_total = 0;
  std::size_t pseudo_kept = 0;
  double pseudo_cer = 0.0;  // of the kept pseudo labels against hidden references
  std::vector<MethodOutcome> methods;
  std::vector<CentroidRow> centroids;  // filled when cmatch runs
  std::optional<double> mean_centroid_before;
  std::optional<double> mean_centroid_after;
};

inline std::pair<double, double> score(const ModelParams& p, const DomainCorpus& test, const AdaptConfig& cfg) {
  ErrorTally cer, wer;
  for (const Utterance& u : test.utterances) {
    if (!u.transcript) throw Error(ErrorKind::kMissingTranscript, "utterance " + u.id + " has no reference transcript");
    const std::string hyp = decode_utterance(p, u, cfg).text;
    cer.add(char_edits(*u.transcript, hyp), u.transcript->size());
    wer.add(word_edits(*u.transcript, hyp), words_of(*u.transcript).size());
  }
  return {cer.rate(), wer.defined() ? wer.rate() : 0.0};
}

// Distances between source and target centroids under one model. Frames are
// labelled by forced alignment to the reference transcripts.
inline std::vector<std::optional<double>> domain_centroid_distances(const ModelParams& p, const TaskData& task) {
  const AssignmentStrategy align{AssignmentKind::kCtcAlign, 0.0};
  return centroid_distances(character_centroids(p, task.source, align, p.charset),
                            character_centroids(p, task.target, align, p.charset), p.charset);
}

inline ExperimentOutcome run_experiment(const TaskData& task, const CharSet& cs, const AdaptConfig& cfg,
                                        const std::vector<Method>& methods) {
  ExperimentOutcome out;
  TrainResult pre = pretrain_run(task.source, cs, cfg);
  out.pretrain_epochs = pre.epochs;
  out.pretrained = pre.params;
  out.source_test_cer = score(pre.params, task.source_test, cfg).first;

  const PseudoLabelSet all = pseudo_label(pre.params, task.target, cfg);
  const PseudoLabelSet kept = filter_pseudo(all, cfg.keep_ratio);
  out.pseudo_total = all.size();
  out.pseudo_kept = kept.size();
  out.kept = kept;
  {
    std::map<std::string, const Utterance*> refs;
    for (const Utterance& u : task.target.utterances) refs[u.id] = &u;
    ErrorTally t;
    for (const PseudoLabel& pl : kept) {
      const std::string& ref = *refs.at(pl.id)->transcript;
      t.add(char_edits(ref, pl.transcript), ref.size());
    }
    out.pseudo_cer = t.rate();
  }

  for (Method m : methods) {
    MethodOutcome mo;
    mo.method = m;
    mo.training = adapt_run(pre.params, task.source, task.target, kept, cfg, m);
    std::tie(mo.target_cer, mo.target_wer) = score(mo.training.params, task.target_test, cfg);
    if (m == Method::kCMatch) {
      const auto before = domain_centroid_distances(pre.params, task);
      const auto after = domain_centroid_distances(mo.training.params, task);
      for (Label c : cs.characters()) {
        const auto l = static_cast<std::size_t>(c);
        out.centroids.push_back({c, before[l], after[l]});
      }
      out.mean_centroid_before = mean_distance(before);
      out.mean_centroid_after = mean_distance(after);
    }
    out.methods.push_back(std::move(mo));
  }
  return out;
}

// Every strategy adapts the same model with cmatch on the same pseudo labels.
struct AssignmentOutcome {
  AssignmentKind kind = AssignmentKind::kPseudoCtcPred;
  double target_cer = 0.0;
  double target_wer = 0.0;
  TrainResult training;
};

inline constexpr std::array<AssignmentKind, 3> kAllAssignmentKinds = {
    AssignmentKind::kPseudoCtcPred, AssignmentKind::kFrameAverage, AssignmentKind::kCtcAlign};

inline std::vector<AssignmentOutcome> compare_assignments(const ModelParams& model, const TaskData& task,
                                                          const PseudoLabelSet& kept, const AdaptConfig& cfg) {
  std::vector<AssignmentOutcome> out;
  for (AssignmentKind kind : kAllAssignmentKinds) {
    AdaptConfig c = cfg;
    c.strategy.kind = kind;
    AssignmentOutcome o;
    o.kind = kind;
    o.training = adapt_run(model, task.source, task.target, kept, c, Method::kCMatch);
    std::tie(o.target_cer, o.target_wer) = score(o.training.params, task.target_test, c);
    out.push_back(std::move(o));
  }
  return out;
}

inline constexpr std::string_view kAssignmentCsvHeader = "strategy,target_cer,target_wer,steps,match_skipped_steps";

inline void write_assignment_csv(std::ostream& out, const std::vector<AssignmentOutcome>& rows) {
  out << kAssignmentCsvHeader << '\n';
  for (const AssignmentOutcome& a : rows) {
    out << to_string(a.kind) << ',' << format_real(a.target_cer) << ',' << format_real(a.target_wer) << ','
        << a.training.steps << ',' << a.training.match_skipped_steps << '\n';
  }
}

// On-disk task layout: one corpus directory per split.
inline constexpr std::array<const char*, 4> kTaskSplits = {"source", "source_test", "target", "target_test"};

inline void write_task(const TaskData& task, const std::filesystem::path& dir) {
  write_corpus(task.source, dir / kTaskSplits[0]);
  write_corpus(task.source_test, dir / kTaskSplits[1]);
  write_corpus(task.target, dir / kTaskSplits[2]);
  write_corpus(task.target_test, dir / kTaskSplits[3]);
}

inline TaskData read_task(const std::filesystem::path& dir) {
  return {read_corpus(dir / kTaskSplits[0]), read_corpus(dir / kTaskSplits[1]), read_corpus(dir / kTaskSplits[2]),
          read_corpus(dir / kTaskSplits[3])};
}

inline constexpr std::string_view kMethodCsvHeader = "method,target_cer,target_wer,steps,match_skipped_steps";

inline void write_method_csv(std::ostream& out, const std::vector<MethodOutcome>& rows) {
  out << kMethodCsvHeader << '\n';
  for (const MethodOutcome& m : rows) {
    out << to_string(m.method) << ',' << format_real(m.target_cer) << ',' << format_real(m.target_wer) << ','
        << m.training.steps << ',' << m.training.match_skipped_steps << '\n';
  }
}

inline constexpr std::string_view kCentroidCsvHeader = "character,before,after";

inline void write_centroid_csv(std::ostream& out, const std::vector<CentroidRow>& rows, const CharSet& cs) {
  auto cell = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("absent"); };
  out << kCentroidCsvHeader << '\n';
  for (const CentroidRow& r : rows) {
    out << cs.symbol(r.character) << ',' << cell(r.before) << ',' << cell(r.after) << '\n';
  }
}

}  // namespace cmatch
