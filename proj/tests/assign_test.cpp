// SPDX-License-Identifier: Apache-2.0
#include "cmatch/assign.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"

namespace cmatch {
namespace {

const CharSet kAb = CharSet::with_blank("ab");
constexpr Label A = 1, B = 2;

Matrix peaked(const LabelSeq& path, std::size_t vocab, double p) {
  Matrix m(path.size(), vocab, std::log((1.0 - p) / static_cast<double>(vocab - 1)));
  for (std::size_t t = 0; t < path.size(); ++t) m(t, static_cast<std::size_t>(path[t])) = std::log(p);
  return m;
}

AssignmentStrategy strategy(AssignmentKind kind, double threshold = 0.9) { return {kind, threshold}; }

TEST(FrameAverage, UniformPartition) {
  const LogProbLattice six(Matrix(6, 3, std::log(1.0 / 3)));
  const auto res = assign_labels(strategy(AssignmentKind::kFrameAverage), six, LabelSeq{A, B}, kAb);
  EXPECT_EQ(res.labels, (LabelSeq{A, A, A, B, B, B}));
  EXPECT_EQ(res.kept(), 6u);
}

TEST(FrameAverage, FloorRule) {
  const LogProbLattice five(Matrix(5, 3, std::log(1.0 / 3)));
  const auto res = assign_labels(strategy(AssignmentKind::kFrameAverage), five, LabelSeq{A, B}, kAb);
  EXPECT_EQ(res.labels, (LabelSeq{A, A, A, B, B}));
}

TEST(FrameAverage, EveryCharacterGetsItsShareInOrder) {
  std::mt19937_64 rng(2);
  const CharSet cs = CharSet::with_blank("abcdefg");
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> len(1, 6), sym(1, 7), extra(0, 20);
    LabelSeq tr(static_cast<std::size_t>(len(rng)));
    for (Label& l : tr) l = sym(rng);
    const std::size_t n = tr.size() + static_cast<std::size_t>(extra(rng));
    const auto res = frame_average_labels(n, tr);
    std::vector<std::size_t> count(tr.size(), 0);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = i * tr.size() / n;
      EXPECT_GE(idx, pos);  // non-decreasing character position
      pos = idx;
      ++count[idx];
      EXPECT_EQ(res.labels[i], tr[idx]);
    }
    for (std::size_t c : count) EXPECT_GE(c, n / tr.size());
  }
}

TEST(FrameAverage, AgreesWithAlignmentOnUniformDurations) {
  // Peaked lattice with equal-length character segments and no blanks.
  const LabelSeq path{A, A, A, B, B, B, A, A, A};
  const LogProbLattice lat(peaked(path, 3, 0.95));
  const LabelSeq tr{A, B, A};
  const auto avg = assign_labels(strategy(AssignmentKind::kFrameAverage), lat, tr, kAb);
  const auto align = assign_labels(strategy(AssignmentKind::kCtcAlign), lat, tr, kAb);
  for (std::size_t t = 0; t < path.size(); ++t) {
    if (align.keep_mask[t]) {
      EXPECT_TRUE(avg.keep_mask[t]);
      EXPECT_EQ(avg.labels[t], align.labels[t]) << "frame " << t;
    }
  }
  EXPECT_EQ(align.kept(), path.size());
}

TEST(AssignLabels, MissingTranscript) {
  const LogProbLattice lat(Matrix(4, 3, std::log(1.0 / 3)));
  for (auto kind : {AssignmentKind::kCtcAlign, AssignmentKind::kFrameAverage}) {
    try {
      assign_labels(strategy(kind), lat, std::nullopt, kAb);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kMissingTranscript);
    }
  }
  EXPECT_NO_THROW(assign_labels(strategy(AssignmentKind::kPseudoCtcPred), lat, std::nullopt, kAb));
}

TEST(AssignLabels, InfeasibleAlignmentPropagates) {
  const LogProbLattice lat(Matrix(2, 3, std::log(1.0 / 3)));
  try {
    assign_labels(strategy(AssignmentKind::kCtcAlign), lat, LabelSeq{A, A}, kAb);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasibleAlignment);
  }
}

TEST(AssignLabels, PseudoKeepsExactlyConfidentNonBlankFrames) {
  const LabelSeq path{0, A, A, 0, B, 0};
  const LogProbLattice lat(peaked(path, 3, 0.95));
  const auto res = assign_labels(strategy(AssignmentKind::kPseudoCtcPred, 0.9), lat, std::nullopt, kAb);
  EXPECT_EQ(res.labels, path);
  EXPECT_EQ(res.keep_mask, (std::vector<bool>{false, true, true, false, true, false}));
}

TEST(AssignLabels, KeptLabelsAreNeverBlank) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const LogProbLattice lat(oracle::random_log_probs(7, 3, rng, 3.0));
    const LabelSeq tr{B, A};
    for (auto kind : {AssignmentKind::kCtcAlign, AssignmentKind::kFrameAverage, AssignmentKind::kPseudoCtcPred}) {
      const auto res = assign_labels(strategy(kind, 0.5), lat, tr, kAb);
      ASSERT_EQ(res.labels.size(), 7u);
      ASSERT_EQ(res.keep_mask.size(), 7u);
      for (std::size_t t = 0; t < 7; ++t) {
        if (!res.keep_mask[t]) continue;
        EXPECT_NE(res.labels[t], kAb.blank());
        EXPECT_TRUE(kAb.contains(res.labels[t]));
      }
    }
  }
}

TEST(AssignmentKind, NamesRoundTrip) {
  for (auto kind : {AssignmentKind::kCtcAlign, AssignmentKind::kFrameAverage, AssignmentKind::kPseudoCtcPred}) {
    EXPECT_EQ(parse_assignment_kind(to_string(kind)), kind);
  }
  EXPECT_THROW(parse_assignment_kind("viterbi"), Error);
}

}  // namespace
}  // namespace cmatch
