// SPDX-License-Identifier: Apache-2.0
//
// Synthetic speech-like corpora with device/environment shifts, and their
// on-disk format.
//
// Each character owns a fixed random prototype vector. An utterance repeats
// the prototypes of its transcript for a random number of frames per
// character and adds i.i.d. Gaussian jitter. A device shift maps every frame
// through x -> A x + b; an environment shift adds seeded Gaussian noise.
//
// Directory layout:
//   manifest.tsv      header "#cmatch-corpus<TAB>1<TAB><domain><TAB>visible|hidden",
//                     then one row per utterance:
//                     id<TAB>frames/<id>.txt<TAB>transcript-or-dash<TAB>domain
//   frames/<id>.txt   "N D" then N lines of D reals
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cmatch/ctc.hpp"
#include "cmatch/error.hpp"
#include "cmatch/numkit.hpp"
#include "cmatch/text_io.hpp"
#include "cmatch/utterance.hpp"

namespace cmatch {

struct GeneratorSpec {
  std::string characters = "abcdefgh";  // non-blank symbols
  std::size_t num_utterances = 100;
  std::size_t min_length = 3;  // characters per transcript
  std::size_t max_length = 6;
  std::size_t min_frames = 2;  // frames per character
  std::size_t max_frames = 4;
  std::size_t input_dim = 8;
  double prototype_scale = 1.0;
  double min_prototype_distance = 1.0;
  double jitter = 0.3;
  std::uint64_t prototype_seed = 1;  // shared by every corpus of one task
  std::uint64_t seed = 1;            // utterance stream
  std::string domain_tag = "clean";
  std::string id_prefix = "utt";

  void validate() const {
    if (characters.empty()) throw Error(ErrorKind::kInvalidArgument, "generator needs characters");
    if (min_length == 0 || min_length > max_length) {
      throw Error(ErrorKind::kInvalidArgument, "transcript length range is empty");
    }
    if (min_frames == 0 || min_frames > max_frames) {
      throw Error(ErrorKind::kInvalidArgument, "frames-per-character range is empty");
    }
    if (input_dim < 2) throw Error(ErrorKind::kInvalidArgument, "input dimension must be at least 2");
    if (!(jitter >= 0.0) || !(prototype_scale > 0.0)) {
      throw Error(ErrorKind::kInvalidArgument, "jitter must be >= 0 and prototype scale > 0");
    }
  }
};

enum class ShiftKind { kDevice, kEnvironment };

struct DomainShiftSpec {
  ShiftKind kind = ShiftKind::kDevice;
  Matrix channel;         // D x D, device
  std::vector<double> bias;  // D, device
  double noise_amplitude = 0.0;  // environment
  std::uint64_t noise_seed = 0;
  std::string tag = "shifted";
};

// Prototype vectors, one row per character; rejection-sampled until every pair
// is at least `min_prototype_distance` apart.
inline Matrix make_prototypes(const GeneratorSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.prototype_seed);
  std::normal_distribution<double> normal(0.0, spec.prototype_scale);
  const std::size_t k = spec.characters.size();
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Matrix protos(k, spec.input_dim);
    for (double& v : protos.data()) v = normal(rng);
    bool ok = true;
    for (std::size_t i = 0; i < k && ok; ++i) {
      for (std::size_t j = i + 1; j < k && ok; ++j) {
        double d2 = 0.0;
        for (std::size_t d = 0; d < spec.input_dim; ++d) d2 += std::pow(protos(i, d) - protos(j, d), 2);
        ok = std::sqrt(d2) >= spec.min_prototype_distance && d2 > 0.0;
      }
    }
    if (ok) return protos;
  }
  throw Error(ErrorKind::kInvalidArgument, "could not place prototypes at the requested distance");
}

// Transcripts never repeat a character back to back: the frame-wise toy
// encoder cannot emit the separating blank inside a run of identical frames.
inline DomainCorpus generate(const GeneratorSpec& spec) {
  spec.validate();
  const Matrix protos = make_prototypes(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> duration(spec.min_frames, spec.max_frames);
  std::uniform_int_distribution<std::size_t> symbol(0, spec.characters.size() - 1);
  std::normal_distribution<double> noise(0.0, 1.0);

  DomainCorpus corpus{spec.domain_tag, {}, false};
  const std::size_t width = std::to_string(spec.num_utterances).size();
  for (std::size_t u = 0; u < spec.num_utterances; ++u) {
    const std::size_t m = length(rng);
    std::vector<std::size_t> chars;
    while (chars.size() < m) {
      const std::size_t c = symbol(rng);
      if (!chars.empty() && c == chars.back() && spec.characters.size() > 1) continue;
      chars.push_back(c);
    }
    std::vector<std::size_t> durations(m);
    std::size_t total = 0;
    for (std::size_t i = 0; i < m; ++i) total += durations[i] = duration(rng);

    Matrix frames(total, spec.input_dim);
    std::size_t row = 0;
    std::string text;
    for (std::size_t i = 0; i < m; ++i) {
      text.push_back(spec.characters[chars[i]]);
      for (std::size_t f = 0; f < durations[i]; ++f, ++row) {
        for (std::size_t d = 0; d < spec.input_dim; ++d) {
          frames(row, d) = protos(chars[i], d) + spec.jitter * noise(rng);
        }
      }
    }
    std::string id = std::to_string(u);
    id.insert(0, width - id.size(), '0');
    corpus.utterances.push_back({spec.id_prefix + id, std::move(frames), std::move(text), spec.domain_tag});
  }
  return corpus;
}

inline double condition_number(const Matrix& m) {
  Eigen::MatrixXd a(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m(r, c);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  const double smin = s(s.size() - 1);
  return smin > 0.0 ? s(0) / smin : std::numeric_limits<double>::infinity();
}

// Channel I + perturbation * G (G standard normal entries), redrawn until its
// condition number is at most `max_condition`; bias entries are N(0, bias_scale^2).
inline DomainShiftSpec make_device_shift(std::size_t dim, double perturbation, double bias_scale,
                                         std::uint64_t seed, std::string tag,
                                         double max_condition = 100.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Matrix a(dim, dim);
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t c = 0; c < dim; ++c) a(r, c) = (r == c ? 1.0 : 0.0) + perturbation * normal(rng);
    if (condition_number(a) > max_condition) continue;
    std::vector<double> b(dim);
    for (double& v : b) v = bias_scale * normal(rng);
    return {ShiftKind::kDevice, std::move(a), std::move(b), 0.0, 0, std::move(tag)};
  }
  throw Error(ErrorKind::kInvalidArgument, "could not sample a well-conditioned channel");
}

inline DomainShiftSpec make_environment_shift(double amplitude, std::uint64_t noise_seed, std::string tag) {
  if (!(amplitude >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "noise amplitude must be >= 0");
  return {ShiftKind::kEnvironment, Matrix(), {}, amplitude, noise_seed, std::move(tag)};
}

// Transformed copy of `corpus`; transcripts are kept as hidden references.
inline DomainCorpus apply_shift(const DomainCorpus& corpus, const DomainShiftSpec& shift) {
  DomainCorpus out{shift.tag, {}, true};
  std::mt19937_64 rng(shift.noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (const Utterance& u : corpus.utterances) {
    Matrix frames = u.frames;
    if (shift.kind == ShiftKind::kDevice) {
      const std::size_t dim = frames.cols();
      if (shift.channel.rows() != dim || shift.channel.cols() != dim || shift.bias.size() != dim) {
        throw Error(ErrorKind::kInvalidShape, "device shift is " + shape_string(shift.channel) +
                                                  " but frames have dimension " + std::to_string(dim));
      }
      for (std::size_t r = 0; r < frames.rows(); ++r) {
        for (std::size_t i = 0; i < dim; ++i) {
          double s = shift.bias[i];
          for (std::size_t j = 0; j < dim; ++j) s += shift.channel(i, j) * u.frames(r, j);
          frames(r, i) = s;
        }
      }
    } else {
      if (shift.noise_amplitude < 0.0) throw Error(ErrorKind::kInvalidArgument, "negative noise amplitude");
      for (double& v : frames.data()) {
        const double z = noise(rng);  // drawn even at zero amplitude to keep the stream aligned
        v += shift.noise_amplitude * z;
      }
    }
    out.utterances.push_back({u.id, std::move(frames), u.transcript, shift.tag});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Disk format

inline constexpr const char* kManifestName = "manifest.tsv";

inline void write_corpus(const DomainCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "frames");
  auto manifest = open_for_write(dir / kManifestName);
  manifest << "#cmatch-corpus\t1\t" << corpus.domain_tag << '\t'
           << (corpus.labels_hidden ? "hidden" : "visible") << '\n';
  for (const Utterance& u : corpus.utterances) {
    if (u.id.empty() || u.id.find_first_of("\t\n/\\") != std::string::npos) {
      throw Error(ErrorKind::kInvalidArgument, "utterance id '" + u.id + "' is not file-safe");
    }
    if (u.transcript && (u.transcript->find_first_of("\t\n") != std::string::npos || *u.transcript == "-")) {
      throw Error(ErrorKind::kInvalidTranscript, "transcript of " + u.id + " cannot be stored");
    }
    const std::string rel = "frames/" + u.id + ".txt";
    manifest << u.id << '\t' << rel << '\t' << (u.transcript ? *u.transcript : "-") << '\t' << u.domain << '\n';
    auto frames = open_for_write(dir / rel);
    frames << u.frames.rows() << ' ' << u.frames.cols() << '\n';
    write_matrix_rows(frames, u.frames);
  }
}

inline Matrix read_frame_file(const std::filesystem::path& path) {
  LineReader in(path);
  std::string line;
  if (!in.next(line)) in.fail("missing 'N D' header");
  const auto head = fields(line);
  if (head.size() != 2) in.fail("expected 'N D' header");
  const std::size_t n = in.parse_count(head[0]);
  const std::size_t d = in.parse_count(head[1]);
  Matrix m = in.read_matrix(n, d);
  while (in.next(line)) {
    if (!fields(line).empty()) in.fail("unexpected trailing data");
  }
  return m;
}

inline DomainCorpus read_corpus(const std::filesystem::path& dir) {
  LineReader in(dir / kManifestName);
  std::string line;
  if (!in.next(line)) in.fail("missing corpus header");
  const auto head = split(line, '\t');
  if (head.size() != 4 || head[0] != "#cmatch-corpus" || head[1] != "1" ||
      (head[3] != "visible" && head[3] != "hidden")) {
    in.fail("bad corpus header");
  }
  DomainCorpus corpus{head[2], {}, head[3] == "hidden"};
  while (in.next(line)) {
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 4) in.fail("expected 4 tab-separated columns, found " + std::to_string(cols.size()));
    const auto frame_path = dir / cols[1];
    if (!std::filesystem::exists(frame_path)) in.fail("frame file " + frame_path.string() + " does not exist");
    Utterance u{cols[0], read_frame_file(frame_path), std::nullopt, cols[3]};
    if (cols[2] != "-") u.transcript = cols[2];
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

// Deterministic split: the last `fraction` of utterances (at least one when
// the corpus has two or more) become the held-out part.
inline std::pair<DomainCorpus, DomainCorpus> split_tail(const DomainCorpus& corpus, double fraction) {
  DomainCorpus head{corpus.domain_tag, {}, corpus.labels_hidden};
  DomainCorpus tail = head;
  const std::size_t n = corpus.size();
  std::size_t held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (held == 0 && n >= 2 && fraction > 0.0) held = 1;
  for (std::size_t i = 0; i < n; ++i) {
    (i < n - held ? head : tail).utterances.push_back(corpus.utterances[i]);
  }
  return {std::move(head), std::move(tail)};
}

}  // namespace cmatch
