// SPDX-License-Identifier: Apache-2.0
//
// Small helpers shared by the text formats (corpus, checkpoint, config).
#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cmatch/error.hpp"
#include "cmatch/numkit.hpp"

namespace cmatch {

// Shortest text that reads back to the same double.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

// Whitespace-separated fields, empty fields dropped.
inline std::vector<std::string> fields(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

// Reports parse failures as "<file>:<line>: <message>".
class LineReader {
 public:
  explicit LineReader(std::filesystem::path path) : path_(std::move(path)), in_(path_) {
    if (!in_) throw Error(ErrorKind::kParse, "cannot open " + path_.string());
  }

  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw Error(ErrorKind::kParse, path_.string() + ":" + std::to_string(line_no_) + ": " + message);
  }

  double parse_real(const std::string& tok) const {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (tok.empty() || end != tok.c_str() + tok.size() || errno == ERANGE || !std::isfinite(v)) {
      fail("bad real number '" + tok + "'");
    }
    return v;
  }

  std::size_t parse_count(const std::string& tok) const {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
      fail("bad count '" + tok + "'");
    }
    return static_cast<std::size_t>(std::stoull(tok));
  }

  // Reads `rows` lines of `cols` reals.
  Matrix read_matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    std::string line;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!next(line)) fail("expected " + std::to_string(rows) + " rows, file ended after " + std::to_string(r));
      const auto toks = fields(line);
      if (toks.size() != cols) {
        fail("expected " + std::to_string(cols) + " values, found " + std::to_string(toks.size()));
      }
      for (std::size_t c = 0; c < cols; ++c) m(r, c) = parse_real(toks[c]);
    }
    return m;
  }

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

inline void write_matrix_rows(std::ostream& out, const Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c > 0) out << ' ';
      out << format_real(m(r, c));
    }
    out << '\n';
  }
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kParse, "cannot write " + path.string());
  return out;
}

}  // namespace cmatch
