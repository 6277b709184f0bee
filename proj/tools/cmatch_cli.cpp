// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver. Exit status: 0 success, 2 usage, 3 data, 4 numerical.
#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmatch/adapt.hpp"
#include "cmatch/checkpoint.hpp"
#include "cmatch/config.hpp"
#include "cmatch/corpus.hpp"
#include "cmatch/evaluate.hpp"
#include "cmatch/experiment.hpp"

namespace fs = std::filesystem;
using namespace cmatch;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string source;
  std::string target;
  std::string corpus;
  std::string checkpoint;
  std::string hypotheses;
  std::string test;
  std::string metrics;
  std::string pseudo;
  std::string method = "cmatch";
  std::optional<std::size_t> beam;
};

RunConfig load_config(const Options& o) {
  if (o.config.empty()) throw Error(ErrorKind::kUsage, "--config is required");
  RunConfig cfg = read_config(o.config);
  cfg.require_seed(o.seed);
  return cfg;
}

// Command-line paths are taken as given; omitted ones fall back under work_dir.
fs::path or_default(const std::string& given, const RunConfig& cfg, const fs::path& fallback) {
  return given.empty() ? cfg.work_dir / fallback : fs::path(given);
}

template <class Fn>
void write_text(const fs::path& path, Fn&& body) {
  auto out = open_for_write(path);
  body(out);
  if (!out) throw Error(ErrorKind::kParse, "failed writing " + path.string());
}

// Writes to `path`, or to stdout when it is empty.
template <class Fn>
void emit(const std::string& path, Fn&& body) {
  if (path.empty()) {
    body(std::cout);
  } else {
    write_text(path, body);
  }
}

void check_corpus_dims(const ModelParams& p, const DomainCorpus& c) {
  for (const Utterance& u : c.utterances) {
    if (u.frames.cols() != p.dims.input_dim) {
      throw Error(ErrorKind::kInvalidShape, "corpus " + c.domain_tag + " has " + std::to_string(u.frames.cols()) +
                                                "-dimensional frames but the checkpoint expects " +
                                                std::to_string(p.dims.input_dim));
    }
  }
}

int cmd_generate(const Options& o) {
  RunConfig cfg = load_config(o);
  const fs::path out = or_default(o.out, cfg, "data");
  write_task(make_task(cfg.task, *cfg.seed), out);
  std::cout << "wrote " << out.string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const Options& o) {
  RunConfig cfg = load_config(o);
  const DomainCorpus source = read_corpus(or_default(o.source, cfg, "data/source"));
  const TrainResult r = pretrain_run(source, cfg.charset(), cfg.adapt);
  const fs::path out = or_default(o.out, cfg, "pretrained.ckpt");
  write_checkpoint(r.params, out);
  if (!o.metrics.empty()) write_text(o.metrics, [&](std::ostream& s) { write_epoch_csv(s, r.epochs); });
  std::cout << "wrote " << out.string() << " (best epoch " << r.best_epoch << " of " << r.epochs.size() << ")\n";
  return kExitOk;
}

int cmd_adapt(const Options& o) {
  RunConfig cfg = load_config(o);
  const fs::path ckpt = or_default(o.checkpoint, cfg, "pretrained.ckpt");
  const bool all = o.method == "all";
  const std::vector<Method> methods =
      all ? std::vector<Method>(kAllMethods.begin(), kAllMethods.end()) : std::vector<Method>{parse_method(o.method)};
  if (all && o.test.empty()) throw Error(ErrorKind::kUsage, "--method all needs --test for the method table");

  const fs::path out = or_default(o.out, cfg, all ? fs::path("adapt") : fs::path(o.method + ".ckpt"));
  if (methods.front() == Method::kSourceOnly && !all) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    fs::copy_file(ckpt, out, fs::copy_options::overwrite_existing);
    std::cout << "wrote " << out.string() << " (unchanged)\n";
    return kExitOk;
  }

  const ModelParams model = read_checkpoint(ckpt);
  AdaptConfig ac = cfg.adapt;
  ac.lambda = model.ctc_weight;
  const DomainCorpus source = read_corpus(or_default(o.source, cfg, "data/source"));
  const DomainCorpus target = read_corpus(or_default(o.target, cfg, "data/target"));
  std::optional<DomainCorpus> test;
  if (!o.test.empty()) test = read_corpus(o.test);
  check_corpus_dims(model, source);
  check_corpus_dims(model, target);
  if (test) check_corpus_dims(model, *test);

  const PseudoLabelSet kept = filter_pseudo(pseudo_label(model, target, ac), ac.keep_ratio);
  const fs::path pseudo_path = !o.pseudo.empty() ? fs::path(o.pseudo) : all ? out / "pseudo.csv" : fs::path();
  if (!pseudo_path.empty()) write_text(pseudo_path, [&](std::ostream& s) { write_pseudo_csv(s, kept); });

  std::vector<MethodOutcome> rows;
  for (Method m : methods) {
    MethodOutcome mo;
    mo.method = m;
    mo.training = adapt_run(model, source, target, kept, ac, m);
    const fs::path ck = all ? out / (std::string(to_string(m)) + ".ckpt") : out;
    if (m == Method::kSourceOnly) {
      if (ck.has_parent_path()) fs::create_directories(ck.parent_path());
      fs::copy_file(ckpt, ck, fs::copy_options::overwrite_existing);
    } else {
      write_checkpoint(mo.training.params, ck);
    }
    const fs::path metrics = all ? out / (std::string(to_string(m)) + ".epochs.csv") : fs::path(o.metrics);
    if (!metrics.empty() && m != Method::kSourceOnly) {
      write_text(metrics, [&](std::ostream& s) { write_epoch_csv(s, mo.training.epochs); });
    }
    if (test) std::tie(mo.target_cer, mo.target_wer) = score(mo.training.params, *test, ac);
    rows.push_back(std::move(mo));
  }
  if (all) {
    write_text(out / "methods.csv", [&](std::ostream& s) { write_method_csv(s, rows); });
  } else if (test) {
    write_method_csv(std::cout, rows);
  }
  std::cout << "wrote " << out.string() << '\n';
  return kExitOk;
}

int cmd_decode(const Options& o) {
  if (o.checkpoint.empty() || o.corpus.empty()) throw Error(ErrorKind::kUsage, "decode needs --checkpoint and --corpus");
  AdaptConfig ac;
  if (!o.config.empty()) ac = read_config(o.config).adapt;
  if (o.beam) ac.beam_width = *o.beam;
  const ModelParams model = read_checkpoint(o.checkpoint);
  ac.lambda = model.ctc_weight;
  ac.validate();
  const DomainCorpus corpus = read_corpus(o.corpus);
  check_corpus_dims(model, corpus);
  const std::vector<Decoded> rows = decode_corpus(model, corpus, ac);
  emit(o.out, [&](std::ostream& s) { write_transcript_csv(s, rows); });
  return kExitOk;
}

int cmd_evaluate(const Options& o) {
  if (o.hypotheses.empty() || o.corpus.empty()) {
    throw Error(ErrorKind::kUsage, "evaluate needs --hypotheses and --corpus");
  }
  const Evaluation e = evaluate(read_transcript_csv(o.hypotheses), read_corpus(o.corpus));
  emit(o.out, [&](std::ostream& s) { write_evaluation_csv(s, e); });
  return kExitOk;
}

int cmd_compare(const Options& o) {
  RunConfig cfg = load_config(o);
  const TaskData task = o.data.empty() ? make_task(cfg.task, *cfg.seed) : read_task(o.data);
  ModelParams model;
  if (o.checkpoint.empty()) {
    model = pretrain(task.source, cfg.charset(), cfg.adapt);
  } else {
    model = read_checkpoint(o.checkpoint);
    for (const DomainCorpus* c : {&task.source, &task.target, &task.target_test}) check_corpus_dims(model, *c);
  }
  AdaptConfig ac = cfg.adapt;
  ac.lambda = model.ctc_weight;
  const PseudoLabelSet kept = filter_pseudo(pseudo_label(model, task.target, ac), ac.keep_ratio);
  const auto rows = compare_assignments(model, task, kept, ac);
  const fs::path out = or_default(o.out, cfg, "assignments.csv");
  write_text(out, [&](std::ostream& s) { write_assignment_csv(s, rows); });
  std::cout << "wrote " << out.string() << '\n';
  return kExitOk;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUsage: return kExitUsage;
    case ErrorKind::kNumerical: return kExitNumerical;
    default: return kExitData;
  }
}

const char* kFooter = R"(CSV outputs (header row first; columns never reordered):
  pretrain --metrics, adapt *.epochs.csv  epoch,L_src,L_tgt,L_cmatch,total,dev_cer
  adapt pseudo.csv, decode               id,transcript,confidence
  adapt methods.csv                      method,target_cer,target_wer,steps,match_skipped_steps
  evaluate                               id,ref_chars,char_errors,cer,ref_words,word_errors,wer,flag
                                         (last row id '*corpus*' aggregates; empty references
                                          print rate 'nan' with flag 'empty-reference')
  compare-assignments                    strategy,target_cer,target_wer,steps,match_skipped_steps

Paths inside the config file resolve against the config file's directory.
Omitted output and input paths default to locations under the config's work_dir.
Exit status: 0 success, 2 usage error, 3 data error, 4 numerical failure.)";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cmatch: character-level distribution matching for domain adaptation of a CTC-attention recognizer"};
  app.require_subcommand(1);
  app.footer(kFooter);
  Options o;

  auto config_flag = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--config", o.config, "run configuration (key = value)");
    if (required) opt->required();
    c->add_option("--seed", o.seed, "run seed; overrides the config value");
  };

  auto* gen = app.add_subcommand("generate", "write source, source_test, target and target_test corpora");
  config_flag(gen, true);
  gen->add_option("--out", o.out, "output directory (default: <work_dir>/data)");

  auto* pre = app.add_subcommand("pretrain", "train a model on the labelled source corpus");
  config_flag(pre, true);
  pre->add_option("--source", o.source, "source corpus directory (default: <work_dir>/data/source)");
  pre->add_option("--out", o.out, "output checkpoint (default: <work_dir>/pretrained.ckpt)");
  pre->add_option("--metrics", o.metrics, "per-epoch CSV");

  auto* ad = app.add_subcommand("adapt", "pseudo-label the target corpus and adapt a checkpoint");
  config_flag(ad, true);
  ad->add_option("--checkpoint", o.checkpoint, "pretrained checkpoint (default: <work_dir>/pretrained.ckpt)");
  ad->add_option("--source", o.source, "source corpus directory (default: <work_dir>/data/source)");
  ad->add_option("--target", o.target, "target corpus directory (default: <work_dir>/data/target)");
  ad->add_option("--method", o.method, "cmatch | mmd-domain | source-only | self-training-only | all")
      ->check(CLI::IsMember({"cmatch", "mmd-domain", "source-only", "self-training-only", "all"}));
  ad->add_option("--test", o.test, "held-out target corpus scored after adaptation (required by --method all)");
  ad->add_option("--out", o.out, "output checkpoint, or directory for --method all");
  ad->add_option("--metrics", o.metrics, "per-epoch CSV for a single method");
  ad->add_option("--pseudo", o.pseudo, "CSV of the kept pseudo labels");

  auto* dec = app.add_subcommand("decode", "beam-decode a corpus");
  dec->add_option("--config", o.config, "optional run configuration for beam_width");
  dec->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  dec->add_option("--corpus", o.corpus, "corpus directory")->required();
  dec->add_option("--beam", o.beam, "beam width; overrides the config")->check(CLI::PositiveNumber);
  dec->add_option("--out", o.out, "transcript CSV (default: stdout)");

  auto* ev = app.add_subcommand("evaluate", "score decoded transcripts against a reference corpus");
  ev->add_option("--hypotheses", o.hypotheses, "transcript CSV written by decode")->required();
  ev->add_option("--corpus", o.corpus, "reference corpus directory")->required();
  ev->add_option("--out", o.out, "evaluation CSV (default: stdout)");

  auto* cmp = app.add_subcommand("compare-assignments", "adapt with cmatch under every label assignment strategy");
  config_flag(cmp, true);
  cmp->add_option("--data", o.data, "directory written by generate (default: generated in memory)");
  cmp->add_option("--checkpoint", o.checkpoint, "pretrained checkpoint (default: pretrain on the source)");
  cmp->add_option("--out", o.out, "CSV path (default: <work_dir>/assignments.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*pre) return cmd_pretrain(o);
    if (*ad) return cmd_adapt(o);
    if (*dec) return cmd_decode(o);
    if (*ev) return cmd_evaluate(o);
    if (*cmp) return cmd_compare(o);
  } catch (const Error& e) {
    std::cerr << "cmatch: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "cmatch: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
