// SPDX-License-Identifier: Apache-2.0
//
// Text checkpoint:
//
//   cmatch-checkpoint 1
//   dims <input> <hidden> <feature> <attention> <subsample>
//   charset <blank_index> <symbol codes...>
//   ctc_weight <real>
//   param <name> <rows> <cols>
//   <rows lines of cols reals>
//   ...
//   end
//
// Reals are written with 17 significant digits, so write -> read -> write is
// byte-identical.
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cmatch/error.hpp"
#include "cmatch/model.hpp"
#include "cmatch/text_io.hpp"

namespace cmatch {

inline void write_checkpoint(std::ostream& out, const ModelParams& p) {
  validate(p);
  out << "cmatch-checkpoint 1\n";
  out << "dims " << p.dims.input_dim << ' ' << p.dims.hidden_dim << ' ' << p.dims.feature_dim << ' '
      << p.dims.attention_dim << ' ' << p.dims.subsample << '\n';
  out << "charset " << static_cast<int>(p.charset.blank());
  for (char ch : p.charset.symbols()) out << ' ' << static_cast<int>(static_cast<unsigned char>(ch));
  out << '\n';
  out << "ctc_weight " << format_real(p.ctc_weight) << '\n';
  for (std::size_t i = 0; i < kNumParams; ++i) {
    out << "param " << kParamNames[i] << ' ' << p.weights[i].rows() << ' ' << p.weights[i].cols() << '\n';
    write_matrix_rows(out, p.weights[i]);
  }
  out << "end\n";
}

inline void write_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  write_checkpoint(out, p);
  if (!out) throw Error(ErrorKind::kParse, "failed writing " + path.string());
}

inline std::string checkpoint_text(const ModelParams& p) {
  std::ostringstream out;
  write_checkpoint(out, p);
  return out.str();
}

inline ModelParams read_checkpoint(const std::filesystem::path& path) {
  LineReader in(path);
  std::string line;
  auto expect = [&](const char* key, std::size_t min_fields) {
    if (!in.next(line)) in.fail(std::string("missing '") + key + "' line");
    auto toks = fields(line);
    if (toks.empty() || toks[0] != key || toks.size() < min_fields) in.fail(std::string("expected '") + key + "'");
    return toks;
  };
  if (!in.next(line) || line != "cmatch-checkpoint 1") in.fail("not a version 1 checkpoint");

  ModelParams p;
  const auto dims = expect("dims", 6);
  if (dims.size() != 6) in.fail("dims needs five values");
  p.dims = {in.parse_count(dims[1]), in.parse_count(dims[2]), in.parse_count(dims[3]),
            in.parse_count(dims[4]), in.parse_count(dims[5])};

  const auto cs = expect("charset", 3);
  std::string symbols;
  for (std::size_t i = 2; i < cs.size(); ++i) {
    const std::size_t code = in.parse_count(cs[i]);
    if (code == 0 || code > 127) in.fail("bad symbol code " + cs[i]);
    symbols.push_back(static_cast<char>(code));
  }
  try {
    p.charset = CharSet(symbols, in.parse_count(cs[1]));
  } catch (const Error& e) {
    in.fail(e.what());
  }

  const auto w = expect("ctc_weight", 2);
  p.ctc_weight = in.parse_real(w.at(1));

  for (std::size_t i = 0; i < kNumParams; ++i) {
    const auto head = expect("param", 4);
    if (head.size() != 4 || head[1] != kParamNames[i]) in.fail("expected param " + std::string(kParamNames[i]));
    p.weights[i] = in.read_matrix(in.parse_count(head[2]), in.parse_count(head[3]));
  }
  expect("end", 1);
  try {
    validate(p);
  } catch (const Error& e) {
    in.fail(e.what());
  }
  return p;
}

}  // namespace cmatch
