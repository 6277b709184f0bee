// SPDX-License-Identifier: Apache-2.0
//
// Frame-level label assignment for character-conditional feature matching.
#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "cmatch/ctc.hpp"
#include "cmatch/error.hpp"

namespace cmatch {

enum class AssignmentKind { kCtcAlign, kFrameAverage, kPseudoCtcPred };

struct AssignmentStrategy {
  AssignmentKind kind = AssignmentKind::kPseudoCtcPred;
  double confidence_threshold = 0.9;

  bool needs_transcript() const noexcept { return kind != AssignmentKind::kPseudoCtcPred; }
};

inline std::string_view to_string(AssignmentKind kind) {
  switch (kind) {
    case AssignmentKind::kCtcAlign: return "ctc-align";
    case AssignmentKind::kFrameAverage: return "frame-average";
    case AssignmentKind::kPseudoCtcPred: return "pseudo-ctc";
  }
  return "?";
}

inline AssignmentKind parse_assignment_kind(std::string_view name) {
  if (name == "ctc-align") return AssignmentKind::kCtcAlign;
  if (name == "frame-average") return AssignmentKind::kFrameAverage;
  if (name == "pseudo-ctc") return AssignmentKind::kPseudoCtcPred;
  throw Error(ErrorKind::kUsage, "unknown assignment strategy '" + std::string(name) +
                                     "' (expected ctc-align, frame-average or pseudo-ctc)");
}

// Uniform partition: frame i of n gets transcript[floor(i * m / n)].
inline FrameLabelAssignment frame_average_labels(std::size_t frames, const LabelSeq& transcript) {
  if (transcript.empty()) throw Error(ErrorKind::kMissingTranscript, "frame average needs characters");
  const std::size_t m = transcript.size();
  FrameLabelAssignment out;
  out.labels.resize(frames);
  out.keep_mask.assign(frames, true);
  for (std::size_t i = 0; i < frames; ++i) out.labels[i] = transcript[i * m / frames];
  return out;
}

inline FrameLabelAssignment assign_labels(const AssignmentStrategy& strategy,
                                          const LogProbLattice& lattice,
                                          const std::optional<LabelSeq>& transcript,
                                          const CharSet& cs) {
  if (!(strategy.confidence_threshold >= 0.0 && strategy.confidence_threshold <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "confidence threshold must lie in [0, 1]");
  }
  if (strategy.needs_transcript() && !transcript) {
    throw Error(ErrorKind::kMissingTranscript,
                std::string(to_string(strategy.kind)) + " needs a transcript");
  }
  switch (strategy.kind) {
    case AssignmentKind::kCtcAlign:
      return ctc_forced_align(lattice, *transcript, cs);
    case AssignmentKind::kFrameAverage:
      check_transcript(*transcript, cs);
      return frame_average_labels(lattice.frames(), *transcript);
    case AssignmentKind::kPseudoCtcPred:
      return ctc_greedy_predict(lattice, strategy.confidence_threshold, cs);
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown assignment strategy");
}

}  // namespace cmatch
