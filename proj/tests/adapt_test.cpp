// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "cmatch/adapt.hpp"
#include "cmatch/corpus.hpp"
#include "cmatch/metrics.hpp"
#include "oracles.hpp"

namespace cmatch {
namespace {

TEST(Metrics, LevenshteinMatchesBruteForce) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> len(0, 7);
  std::uniform_int_distribution<int> sym('a', 'c');
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<char> r(len(rng)), h(len(rng));
    for (char& c : r) c = static_cast<char>(sym(rng));
    for (char& c : h) c = static_cast<char>(sym(rng));
    const auto [sub, ins, del] = oracle::edit_counts(r, h);
    EXPECT_EQ(levenshtein(r, h), (EditCounts{sub, ins, del})) << std::string(r.begin(), r.end()) << " / "
                                                    << std::string(h.begin(), h.end());
  }
}

TEST(Metrics, WordErrorRate) {
  const EditCounts e = word_edits("a b c", "a c");
  EXPECT_EQ(e, (EditCounts{0, 0, 1}));
  ErrorTally t;
  t.add(e, 3);
  EXPECT_DOUBLE_EQ(t.rate(), 1.0 / 3.0);
  EXPECT_EQ(char_edits("abc", "abc"), (EditCounts{0, 0, 0}));
  EXPECT_EQ(char_edits("abc", "axc"), (EditCounts{1, 0, 0}));
}

TEST(Metrics, EmptyReferenceIsUndefined) {
  ErrorTally t;
  t.add(char_edits("", "ab"), 0);
  EXPECT_FALSE(t.defined());
}

// ---------------------------------------------------------------------------

PseudoLabelSet ranked(std::size_t n) {
  PseudoLabelSet s;
  for (std::size_t i = 0; i < n; ++i) s.push_back({"u" + std::to_string(i), "a", 1.0 - 0.01 * i});
  return s;
}

TEST(FilterPseudo, KeepsCeilOfRatio) {
  EXPECT_EQ(filter_pseudo(ranked(10), 0.7).size(), 7u);
  EXPECT_EQ(filter_pseudo(ranked(10), 0.71).size(), 8u);
  EXPECT_EQ(filter_pseudo(ranked(1), 0.1).size(), 1u);
  EXPECT_TRUE(filter_pseudo(ranked(0), 0.5).empty());
  EXPECT_THROW(filter_pseudo(ranked(3), 0.0), Error);
  EXPECT_THROW(filter_pseudo(ranked(3), 1.5), Error);
}

TEST(FilterPseudo, FullRatioIsIdentity) {
  const PseudoLabelSet s = ranked(9);
  const PseudoLabelSet f = filter_pseudo(s, 1.0);
  ASSERT_EQ(f.size(), s.size());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(f[i].id, s[i].id);
}

TEST(FilterPseudo, MonotoneAndPrefix) {
  const PseudoLabelSet s = ranked(23);
  std::size_t prev = 0;
  for (int k = 1; k <= 100; ++k) {
    const PseudoLabelSet f = filter_pseudo(s, k / 100.0);
    EXPECT_GE(f.size(), prev);
    prev = f.size();
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f[i].id, s[i].id);
  }
}

TEST(Method, NamesRoundTrip) {
  for (Method m : kAllMethods) EXPECT_EQ(parse_method(to_string(m)), m);
  try {
    parse_method("bogus");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUsage);
  }
}

// ---------------------------------------------------------------------------

struct Fixture {
  CharSet cs = CharSet::with_blank("abcd");
  DomainCorpus source;
  DomainCorpus target;
  ModelParams params;
  std::vector<TrainItem> src;
  std::vector<TrainItem> tgt;

  explicit Fixture(std::uint64_t seed = 3) {
    GeneratorSpec g;
    g.characters = "abcd";
    g.num_utterances = 6;
    g.seed = seed;
    source = generate(g);
    g.seed = seed + 100;
    target = apply_shift(generate(g), make_device_shift(8, 0.3, 0.3, seed, "dev"));
    params = init_model(ModelDims{}, cs, 0.3, seed);
    src = reference_items(source, cs);
    for (const Utterance& u : target.utterances) {
      // Target transcripts are hidden; train on hand-made pseudo labels.
      const std::string text = u.id.back() == '1' ? "ab" : "cab";
      tgt.push_back({&u, cs.encode(text)});
    }
  }
};

TEST(TrainStep, TotalDecomposes) {
  Fixture f;
  AdaptConfig cfg;
  cfg.strategy = {AssignmentKind::kCtcAlign, 0.0};
  cfg.assign_source_ground_truth = true;
  for (MatchKind kind : {MatchKind::kNone, MatchKind::kCharacter, MatchKind::kDomain}) {
    ModelParams p = f.params;
    const double ls = mean_joint_loss(p, f.src, cfg.joint());
    const double lt = mean_joint_loss(p, f.tgt, cfg.joint());
    const StepReport r = train_step(p, f.src, f.tgt, kind, cfg);
    ASSERT_TRUE(r.updated);
    EXPECT_NEAR(r.source, ls, 1e-9);
    EXPECT_NEAR(r.target, lt, 1e-9);
    EXPECT_EQ(r.match_applied, kind != MatchKind::kNone);
    EXPECT_NEAR(r.total, 0.5 * (r.source + r.target) + cfg.gamma * r.match, 1e-9);
    if (kind != MatchKind::kNone) {
      EXPECT_GT(r.match, 0.0);
    }
  }
}

TEST(TrainStep, EmptyTargetIsSourceOnlyUpdate) {
  Fixture f;
  AdaptConfig cfg;
  cfg.gamma = 0.0;
  ModelParams a = f.params, b = f.params, c = f.params;
  const StepReport ra = train_step(a, f.src, {}, MatchKind::kNone, cfg);
  train_step(b, f.src, {}, MatchKind::kCharacter, cfg);
  cfg.gamma = 10.0;
  train_step(c, f.src, {}, MatchKind::kDomain, cfg);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.weights, c.weights);
  EXPECT_NEAR(ra.total, ra.source, 1e-12);
  EXPECT_NE(a.weights, f.params.weights);
}

TEST(TrainStep, ZeroGammaMatchesNoMatching) {
  Fixture f;
  AdaptConfig cfg;
  cfg.gamma = 0.0;
  ModelParams a = f.params, b = f.params;
  train_step(a, f.src, f.tgt, MatchKind::kNone, cfg);
  train_step(b, f.src, f.tgt, MatchKind::kCharacter, cfg);
  EXPECT_EQ(a.weights, b.weights);
}

TEST(TrainStep, UpdateIsClipped) {
  Fixture f;
  AdaptConfig cfg;
  cfg.clip_norm = 1e-3;
  cfg.step_size = 1.0;
  ModelParams p = f.params;
  train_step(p, f.src, f.tgt, MatchKind::kCharacter, cfg);
  double s = 0.0;
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const auto w = p.weights[i].data();
    const auto w0 = f.params.weights[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) s += (w[k] - w0[k]) * (w[k] - w0[k]);
  }
  EXPECT_NEAR(std::sqrt(s), 1e-3, 1e-9);
}

TEST(DomainMatch, ZeroForIdenticalDomainsAndOrderFree) {
  Fixture f;
  AdaptConfig cfg;
  Tape tape;
  const ParamVars pv = bind(tape, f.params);
  std::size_t skipped = 0;
  const auto fs = detail::forward_batch(pv, f.params, f.src, cfg.joint(), skipped);
  EXPECT_NEAR(detail::domain_match(fs, fs, cfg, f.params.dims.feature_dim).second, 0.0, 1e-12);

  const auto ft = detail::forward_batch(pv, f.params, f.tgt, cfg.joint(), skipped);
  auto rev = ft;
  std::reverse(rev.begin(), rev.end());
  const double d1 = detail::domain_match(fs, ft, cfg, f.params.dims.feature_dim).second;
  const double d2 = detail::domain_match(fs, rev, cfg, f.params.dims.feature_dim).second;
  EXPECT_GT(d1, 0.0);
  EXPECT_NEAR(d1, d2, 1e-12);
}

TEST(CharacterMatch, NoOverlapSkipsTheTerm) {
  Fixture f;
  AdaptConfig cfg;
  cfg.strategy = {AssignmentKind::kCtcAlign, 0.0};
  cfg.assign_source_ground_truth = true;
  std::vector<TrainItem> s{{&f.source.utterances[0], f.cs.encode("aa")}};
  std::vector<TrainItem> t{{&f.target.utterances[0], f.cs.encode("dd")}};
  s[0].transcript = f.cs.encode("a");
  t[0].transcript = f.cs.encode("d");
  ModelParams p = f.params;
  const StepReport r = train_step(p, s, t, MatchKind::kCharacter, cfg);
  EXPECT_TRUE(r.updated);
  EXPECT_FALSE(r.match_applied);
  EXPECT_EQ(r.match, 0.0);
}

TEST(TrainStep, InfeasibleUtterancesAreSkipped) {
  Fixture f;
  AdaptConfig cfg;
  std::vector<TrainItem> s = f.src;
  s.push_back({&f.source.utterances[0], LabelSeq(500, f.cs.encode("a")[0])});
  ModelParams p = f.params;
  const StepReport r = train_step(p, s, {}, MatchKind::kNone, cfg);
  EXPECT_EQ(r.skipped_utterances, 1u);
  EXPECT_TRUE(r.updated);
}

// ---------------------------------------------------------------------------

TEST(Centroids, DistancesAndAbsentCharacters) {
  const CharSet cs = CharSet::with_blank("abcd");
  const ModelParams p = init_model(ModelDims{}, cs, 0.3, 1);
  GeneratorSpec g;
  g.characters = "ab";  // c and d never occur
  g.num_utterances = 5;
  const DomainCorpus c = generate(g);
  const AssignmentStrategy align{AssignmentKind::kCtcAlign, 0.0};
  const CentroidTable t = character_centroids(p, c, align, cs);
  EXPECT_TRUE(t.centroids[cs.encode("a")[0]].has_value());
  EXPECT_FALSE(t.centroids[cs.encode("c")[0]].has_value());

  // Brute-force centroid of 'a' from the forced alignment.
  std::vector<double> sum(p.dims.feature_dim, 0.0);
  std::size_t n = 0;
  for (const Utterance& u : c.utterances) {
    const Matrix feats = encode(p, u.frames);
    const auto a = assign_labels(align, ctc_lattice_from_features(p, feats), cs.encode(*u.transcript), cs);
    for (std::size_t r = 0; r < a.labels.size(); ++r) {
      if (!a.keep_mask[r] || a.labels[r] != cs.encode("a")[0]) continue;
      ++n;
      for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += feats(r, d);
    }
  }
  ASSERT_EQ(n, t.counts[cs.encode("a")[0]]);
  for (std::size_t d = 0; d < sum.size(); ++d) {
    EXPECT_NEAR((*t.centroids[cs.encode("a")[0]])[d], sum[d] / static_cast<double>(n), 1e-12);
  }

  const auto self = centroid_distances(t, t, cs);
  EXPECT_NEAR(*self[cs.encode("a")[0]], 0.0, 1e-15);
  EXPECT_FALSE(self[cs.encode("d")[0]].has_value());
  EXPECT_NEAR(*mean_distance(self), 0.0, 1e-15);
  EXPECT_FALSE(mean_distance({std::nullopt, std::nullopt}).has_value());
  EXPECT_DOUBLE_EQ(*mean_distance({1.0, std::nullopt, 3.0}), 2.0);
}

// ---------------------------------------------------------------------------

AdaptConfig quick_config() {
  AdaptConfig cfg;
  cfg.pretrain_epochs = 3;
  cfg.adapt_epochs = 2;
  cfg.seed = 11;
  return cfg;
}

TEST(Pretrain, Deterministic) {
  GeneratorSpec g;
  g.num_utterances = 20;
  const DomainCorpus c = generate(g);
  const CharSet cs = CharSet::with_blank(g.characters);
  const TrainResult a = pretrain_run(c, cs, quick_config());
  const TrainResult b = pretrain_run(c, cs, quick_config());
  EXPECT_EQ(a.params.weights, b.params.weights);
  std::ostringstream ca, cb;
  write_epoch_csv(ca, a.epochs);
  write_epoch_csv(cb, b.epochs);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(ca.str().substr(0, kEpochCsvHeader.size()), kEpochCsvHeader);
  AdaptConfig other = quick_config();
  other.seed = 12;
  EXPECT_NE(pretrain_run(c, cs, other).params.weights, a.params.weights);
}

TEST(TrainStep, MemorizesSmallCorpus) {
  GeneratorSpec g;
  g.num_utterances = 20;
  g.seed = 4;
  const DomainCorpus c = generate(g);
  const CharSet cs = CharSet::with_blank(g.characters);
  AdaptConfig cfg;
  cfg.step_size = 0.2;
  ModelParams p = init_model(cfg.dims, cs, cfg.lambda, 2);
  const std::vector<TrainItem> items = reference_items(c, cs);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 600; ++step) {
    const StepReport r = train_step(p, items, {}, MatchKind::kNone, cfg);
    ASSERT_TRUE(r.updated);
    if (step == 0) first = r.total;
    last = r.total;
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(corpus_cer(p, c, cfg).rate(), 0.0);
}

TEST(Pretrain, EmptySourceIsRejected) {
  try {
    pretrain_run(DomainCorpus{"x", {}, false}, CharSet::with_blank("ab"), quick_config());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyDomain);
  }
}

TEST(PseudoLabel, SortedByConfidenceDescending) {
  GeneratorSpec g;
  g.num_utterances = 10;
  const CharSet cs = CharSet::with_blank(g.characters);
  const ModelParams p = init_model(ModelDims{}, cs, 0.3, 5);
  const DomainCorpus t = generate(g);
  const PseudoLabelSet s = pseudo_label(p, t, quick_config());
  ASSERT_EQ(s.size(), 10u);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_GE(s[i - 1].confidence, s[i].confidence);
  std::ostringstream out;
  write_pseudo_csv(out, s);
  EXPECT_EQ(out.str().substr(0, kPseudoCsvHeader.size() + 1), std::string(kPseudoCsvHeader) + "\n");
}

TEST(Adapt, SourceOnlyIsUnchangedAndMethodsAreDeterministic) {
  Fixture f;
  AdaptConfig cfg = quick_config();
  PseudoLabelSet pl;
  for (const Utterance& u : f.target.utterances) pl.push_back({u.id, "cab", 0.5});
  const TrainResult so = adapt_run(f.params, f.source, f.target, pl, cfg, Method::kSourceOnly);
  EXPECT_EQ(so.params.weights, f.params.weights);
  EXPECT_EQ(so.steps, 0u);
  for (Method m : {Method::kSelfTrainingOnly, Method::kDomainMmd, Method::kCMatch}) {
    const TrainResult a = adapt_run(f.params, f.source, f.target, pl, cfg, m);
    const TrainResult b = adapt_run(f.params, f.source, f.target, pl, cfg, m);
    EXPECT_GT(a.steps, 0u);
    EXPECT_GE(a.best_epoch, 1u);
    EXPECT_EQ(a.params.weights, b.params.weights);
  }
  try {
    adapt_run(f.params, f.source, f.target, {}, cfg, Method::kCMatch);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyDomain);
  }
}

}  // namespace
}  // namespace cmatch
