// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration. Blank lines and lines starting with '#'
// are ignored; unknown or repeated keys are usage errors.
#pragma once

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "cmatch/adapt.hpp"
#include "cmatch/assign.hpp"
#include "cmatch/error.hpp"
#include "cmatch/experiment.hpp"
#include "cmatch/mmd.hpp"
#include "cmatch/text_io.hpp"

namespace cmatch {

struct RunConfig {
  TaskSpec task{};
  AdaptConfig adapt{};
  std::optional<std::uint64_t> seed;
  std::filesystem::path base_dir = ".";  // directory of the config file
  std::filesystem::path work_dir = ".";  // resolved against base_dir

  CharSet charset() const { return CharSet::with_blank(task.generator.characters); }

  // Resolves `p` against the config file's directory unless it is absolute.
  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
  }

  // The run seed; a command-line value overrides the file.
  std::uint64_t require_seed(std::optional<std::uint64_t> override_seed) {
    if (override_seed) seed = override_seed;
    if (!seed) throw Error(ErrorKind::kUsage, "config key 'seed' is required (or pass --seed)");
    adapt.seed = *seed;
    return *seed;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_u64(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) throw std::invalid_argument(v);
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), nullptr, 10);
  if (errno == ERANGE) throw std::invalid_argument(v);
  return x;
}

inline double parse_double(const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(x)) {
    throw std::invalid_argument(v);
  }
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(v);
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

inline const std::map<std::string, Setter, std::less<>>& config_setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v); }},
      {"work_dir", [](RunConfig& c, const std::string& v) { c.work_dir = v; }},
      // corpus
      {"characters",
       [](RunConfig& c, const std::string& v) {
         // Transcripts travel through CSV and TSV files.
         if (v.find_first_of(", \t-") != std::string::npos) throw std::invalid_argument(v);
         c.task.generator.characters = v;
       }},
      {"source_utterances", [](RunConfig& c, const std::string& v) { c.task.source_utterances = parse_u64(v); }},
      {"target_utterances", [](RunConfig& c, const std::string& v) { c.task.target_utterances = parse_u64(v); }},
      {"test_utterances", [](RunConfig& c, const std::string& v) { c.task.test_utterances = parse_u64(v); }},
      {"min_length", [](RunConfig& c, const std::string& v) { c.task.generator.min_length = parse_u64(v); }},
      {"max_length", [](RunConfig& c, const std::string& v) { c.task.generator.max_length = parse_u64(v); }},
      {"min_frames", [](RunConfig& c, const std::string& v) { c.task.generator.min_frames = parse_u64(v); }},
      {"max_frames", [](RunConfig& c, const std::string& v) { c.task.generator.max_frames = parse_u64(v); }},
      {"input_dim",
       [](RunConfig& c, const std::string& v) { c.task.generator.input_dim = c.adapt.dims.input_dim = parse_u64(v); }},
      {"prototype_scale", [](RunConfig& c, const std::string& v) { c.task.generator.prototype_scale = parse_double(v); }},
      {"min_prototype_distance",
       [](RunConfig& c, const std::string& v) { c.task.generator.min_prototype_distance = parse_double(v); }},
      {"jitter", [](RunConfig& c, const std::string& v) { c.task.generator.jitter = parse_double(v); }},
      {"shift",
       [](RunConfig& c, const std::string& v) {
         if (v == "device") {
           c.task.shift_kind = ShiftKind::kDevice;
         } else if (v == "environment") {
           c.task.shift_kind = ShiftKind::kEnvironment;
         } else {
           throw std::invalid_argument(v);
         }
       }},
      {"shift_perturbation", [](RunConfig& c, const std::string& v) { c.task.shift_perturbation = parse_double(v); }},
      {"shift_bias", [](RunConfig& c, const std::string& v) { c.task.shift_bias = parse_double(v); }},
      {"noise_amplitude", [](RunConfig& c, const std::string& v) { c.task.noise_amplitude = parse_double(v); }},
      // model
      {"hidden_dim", [](RunConfig& c, const std::string& v) { c.adapt.dims.hidden_dim = parse_u64(v); }},
      {"feature_dim", [](RunConfig& c, const std::string& v) { c.adapt.dims.feature_dim = parse_u64(v); }},
      {"attention_dim", [](RunConfig& c, const std::string& v) { c.adapt.dims.attention_dim = parse_u64(v); }},
      {"subsample", [](RunConfig& c, const std::string& v) { c.adapt.dims.subsample = parse_u64(v); }},
      // training and adaptation
      {"lambda", [](RunConfig& c, const std::string& v) { c.adapt.lambda = parse_double(v); }},
      {"gamma", [](RunConfig& c, const std::string& v) { c.adapt.gamma = parse_double(v); }},
      {"confidence_threshold",
       [](RunConfig& c, const std::string& v) { c.adapt.strategy.confidence_threshold = parse_double(v); }},
      {"keep_ratio", [](RunConfig& c, const std::string& v) { c.adapt.keep_ratio = parse_double(v); }},
      {"beam_width", [](RunConfig& c, const std::string& v) { c.adapt.beam_width = parse_u64(v); }},
      {"strategy", [](RunConfig& c, const std::string& v) { c.adapt.strategy.kind = parse_assignment_kind(v); }},
      {"kernel", [](RunConfig& c, const std::string& v) { c.adapt.kernel = parse_kernel(v); }},
      {"assign_source_ground_truth",
       [](RunConfig& c, const std::string& v) { c.adapt.assign_source_ground_truth = parse_bool(v); }},
      {"pretrain_epochs", [](RunConfig& c, const std::string& v) { c.adapt.pretrain_epochs = parse_u64(v); }},
      {"adapt_epochs", [](RunConfig& c, const std::string& v) { c.adapt.adapt_epochs = parse_u64(v); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.adapt.batch_size = parse_u64(v); }},
      {"step_size", [](RunConfig& c, const std::string& v) { c.adapt.step_size = parse_double(v); }},
      {"clip_norm", [](RunConfig& c, const std::string& v) { c.adapt.clip_norm = parse_double(v); }},
      {"patience", [](RunConfig& c, const std::string& v) { c.adapt.patience = parse_u64(v); }},
      {"dev_fraction", [](RunConfig& c, const std::string& v) { c.adapt.dev_fraction = parse_double(v); }},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_setters()) out.push_back(k);
  return out;
}

// Parses config text; `origin` names the source in error messages.
inline RunConfig parse_config(std::string_view text, const std::string& origin,
                              const std::filesystem::path& base_dir) {
  RunConfig cfg;
  cfg.base_dir = base_dir;
  std::map<std::string, std::size_t> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    const std::string body = detail::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::kUsage, where + "expected key = value");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string val = detail::trim(std::string_view(body).substr(eq + 1));
    const auto& table = detail::config_setters();
    const auto it = table.find(key);
    if (it == table.end()) throw Error(ErrorKind::kUsage, where + "unknown config key '" + key + "'");
    if (const auto prev = seen.find(key); prev != seen.end()) {
      throw Error(ErrorKind::kUsage, where + "config key '" + key + "' repeats line " + std::to_string(prev->second));
    }
    seen[key] = line_no;
    try {
      it->second(cfg, val);
    } catch (const std::invalid_argument&) {
      throw Error(ErrorKind::kUsage, where + "bad value '" + val + "' for config key '" + key + "'");
    } catch (const Error& e) {
      throw Error(ErrorKind::kUsage, where + "config key '" + key + "': " + e.what());
    }
  }
  try {
    cfg.task.generator.validate();
    cfg.adapt.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kUsage, origin + ": " + e.what());
  }
  cfg.work_dir = cfg.resolve(cfg.work_dir);
  return cfg;
}

inline RunConfig read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kUsage, "cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return parse_config(text.str(), path.string(), base);
}

}  // namespace cmatch
