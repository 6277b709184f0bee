// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cmatch {

enum class ErrorKind {
  kInvalidShape,
  kInvalidArgument,
  kInvalidTranscript,
  kInfeasibleAlignment,
  kMissingTranscript,
  kEmptyDomain,
  kNoOverlap,
  kParse,
  kUsage,
  kNumerical,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidShape: return "invalid shape";
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kInvalidTranscript: return "invalid transcript";
    case ErrorKind::kInfeasibleAlignment: return "infeasible alignment";
    case ErrorKind::kMissingTranscript: return "missing transcript";
    case ErrorKind::kEmptyDomain: return "empty domain";
    case ErrorKind::kNoOverlap: return "no overlapping characters";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kUsage: return "usage error";
    case ErrorKind::kNumerical: return "numerical failure";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace cmatch
