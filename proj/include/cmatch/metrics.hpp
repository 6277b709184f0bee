// SPDX-License-Identifier: Apache-2.0
//
// Edit-distance scoring for character and word error rates.
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cmatch/text_io.hpp"

namespace cmatch {

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;

  std::size_t total() const noexcept { return substitutions + insertions + deletions; }
  friend bool operator==(const EditCounts&, const EditCounts&) = default;
};

// Minimal edit counts turning `ref` into `hyp`. Among alignments with the
// minimal total, the one with the most substitutions is reported (which also
// fixes insertions and deletions, since I - D = |hyp| - |ref|).
template <class T>
EditCounts levenshtein(const std::vector<T>& ref, const std::vector<T>& hyp) {
  struct Cell {
    std::size_t total = 0;
    EditCounts counts;
  };
  auto better = [](const Cell& a, const Cell& b) {
    if (a.total != b.total) return a.total < b.total;
    return a.counts.substitutions > b.counts.substitutions;
  };
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = {j, {0, j, 0}};
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = {i, {0, 0, i}};
    for (std::size_t j = 1; j <= m; ++j) {
      Cell diag = prev[j - 1];
      if (ref[i - 1] != hyp[j - 1]) {
        ++diag.total;
        ++diag.counts.substitutions;
      }
      Cell del = prev[j];
      ++del.total;
      ++del.counts.deletions;
      Cell ins = cur[j - 1];
      ++ins.total;
      ++ins.counts.insertions;
      Cell best = diag;
      if (better(del, best)) best = del;
      if (better(ins, best)) best = ins;
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  return prev[m].counts;
}

inline std::vector<char> chars_of(std::string_view s) { return {s.begin(), s.end()}; }

inline std::vector<std::string> words_of(std::string_view s) { return fields(s); }

inline EditCounts char_edits(std::string_view ref, std::string_view hyp) {
  return levenshtein(chars_of(ref), chars_of(hyp));
}

inline EditCounts word_edits(std::string_view ref, std::string_view hyp) {
  return levenshtein(words_of(ref), words_of(hyp));
}

// Accumulated error rate; undefined when the reference is empty.
struct ErrorTally {
  std::size_t edits = 0;
  std::size_t ref_length = 0;

  void add(const EditCounts& c, std::size_t ref_len) {
    edits += c.total();
    ref_length += ref_len;
  }
  bool defined() const noexcept { return ref_length > 0; }
  double rate() const noexcept {
    return ref_length == 0 ? 0.0 : static_cast<double>(edits) / static_cast<double>(ref_length);
  }
};

}  // namespace cmatch
