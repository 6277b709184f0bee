// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cmatch/numkit.hpp"

namespace cmatch {

// N x D frame features with an optional transcript.
struct Utterance {
  std::string id;
  Matrix frames;
  std::optional<std::string> transcript;
  std::string domain;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

// A set of utterances from one domain. When `labels_hidden` is set the
// transcripts are evaluation references only and must not drive training.
struct DomainCorpus {
  std::string domain_tag;
  std::vector<Utterance> utterances;
  bool labels_hidden = false;

  std::size_t size() const noexcept { return utterances.size(); }
  bool empty() const noexcept { return utterances.empty(); }

  friend bool operator==(const DomainCorpus&, const DomainCorpus&) = default;
};

}  // namespace cmatch
