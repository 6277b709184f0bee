// SPDX-License-Identifier: Apache-2.0
//
// Scoring decoded transcripts against a reference corpus.
#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cmatch/adapt.hpp"
#include "cmatch/metrics.hpp"
#include "cmatch/text_io.hpp"
#include "cmatch/utterance.hpp"

namespace cmatch {

inline constexpr std::string_view kTranscriptCsvHeader = "id,transcript,confidence";

inline void write_transcript_csv(std::ostream& out, const std::vector<Decoded>& rows) {
  out << kTranscriptCsvHeader << '\n';
  for (const Decoded& d : rows) out << d.id << ',' << d.text << ',' << format_real(d.confidence) << '\n';
}

inline std::vector<Decoded> read_transcript_csv(const std::filesystem::path& path) {
  LineReader in(path);
  std::string line;
  if (!in.next(line) || line != kTranscriptCsvHeader) {
    in.fail("expected header '" + std::string(kTranscriptCsvHeader) + "'");
  }
  std::vector<Decoded> out;
  std::map<std::string, std::size_t> seen;
  while (in.next(line)) {
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 3) in.fail("expected 3 columns, found " + std::to_string(cols.size()));
    if (cols[0].empty()) in.fail("empty utterance id");
    if (!seen.emplace(cols[0], out.size()).second) in.fail("duplicate utterance id '" + cols[0] + "'");
    out.push_back({cols[0], cols[1], in.parse_real(cols[2])});
  }
  return out;
}

struct EvaluationRow {
  std::string id;
  std::size_t ref_chars = 0;
  std::size_t char_errors = 0;
  std::size_t ref_words = 0;
  std::size_t word_errors = 0;
};

struct Evaluation {
  std::vector<EvaluationRow> rows;  // sorted by id
  ErrorTally cer;
  ErrorTally wer;
};

// Every reference utterance needs exactly one hypothesis and vice versa.
inline Evaluation evaluate(const std::vector<Decoded>& hyps, const DomainCorpus& refs) {
  std::map<std::string, const Decoded*> by_id;
  for (const Decoded& d : hyps) by_id[d.id] = &d;
  Evaluation out;
  for (const Utterance& u : refs.utterances) {
    if (!u.transcript) throw Error(ErrorKind::kMissingTranscript, "utterance " + u.id + " has no reference transcript");
    const auto it = by_id.find(u.id);
    if (it == by_id.end()) throw Error(ErrorKind::kParse, "no hypothesis for utterance " + u.id);
    const std::string& hyp = it->second->text;
    const EditCounts c = char_edits(*u.transcript, hyp);
    const EditCounts w = word_edits(*u.transcript, hyp);
    const std::size_t nw = words_of(*u.transcript).size();
    out.rows.push_back({u.id, u.transcript->size(), c.total(), nw, w.total()});
    out.cer.add(c, u.transcript->size());
    out.wer.add(w, nw);
    by_id.erase(it);
  }
  if (!by_id.empty()) {
    throw Error(ErrorKind::kParse, "hypothesis for unknown utterance " + by_id.begin()->first);
  }
  std::sort(out.rows.begin(), out.rows.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

inline constexpr std::string_view kEvaluationCsvHeader =
    "id,ref_chars,char_errors,cer,ref_words,word_errors,wer,flag";
inline constexpr std::string_view kCorpusRowId = "*corpus*";

// Rates with an empty denominator print as "nan" and carry the
// "empty-reference" flag.
inline void write_evaluation_csv(std::ostream& out, const Evaluation& e) {
  auto rate = [](std::size_t errors, std::size_t n) {
    return n == 0 ? std::string("nan") : format_real(static_cast<double>(errors) / static_cast<double>(n));
  };
  auto row = [&](std::string_view id, std::size_t rc, std::size_t ce, std::size_t rw, std::size_t we) {
    out << id << ',' << rc << ',' << ce << ',' << rate(ce, rc) << ',' << rw << ',' << we << ',' << rate(we, rw)
        << ',' << (rc == 0 || rw == 0 ? "empty-reference" : "") << '\n';
  };
  out << kEvaluationCsvHeader << '\n';
  for (const EvaluationRow& r : e.rows) row(r.id, r.ref_chars, r.char_errors, r.ref_words, r.word_errors);
  row(kCorpusRowId, e.cer.ref_length, e.cer.edits, e.wer.ref_length, e.wer.edits);
}

}  // namespace cmatch
