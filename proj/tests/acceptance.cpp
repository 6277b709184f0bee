// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cmatch/adapt.hpp"
#include "cmatch/ctc.hpp"
#include "cmatch/experiment.hpp"
#include "cmatch/mmd.hpp"
#include "cmatch/model.hpp"
#include "joint_oracle.hpp"
#include "oracles.hpp"

using namespace cmatch;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const char* title, const Verdict& v) {
  if (!v.pass) ++failures;
  std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", id, title, v.detail.c_str());
  std::fflush(stdout);
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// 1 and 4: CTC loss and forced alignment against exhaustive path enumeration.

void ctc_sweep() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> frames_d(1, 6), vocab_d(2, 4), len_d(1, 3);
  double worst_loss = 0.0, worst_align = 0.0;
  std::size_t feasible = 0, infeasible_agree = 0, disagreements = 0, collapse_failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = frames_d(rng), v = vocab_d(rng), m = len_d(rng);
    const CharSet cs(std::string("-abc").substr(0, v), 0);
    std::uniform_int_distribution<int> sym(1, static_cast<int>(v) - 1);
    LabelSeq labels(m);
    for (Label& l : labels) l = sym(rng);
    const Matrix logp = oracle::random_log_probs(n, v, rng);
    const LogProbLattice lat(logp);
    const oracle::PathStats ref = oracle::ctc_paths(logp, labels, 0);

    if (ref.count == 0) {
      try {
        ctc_loss(lat, labels, cs);
        ++disagreements;
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kInfeasibleAlignment) {
          ++infeasible_agree;
        } else {
          ++disagreements;
        }
      }
      continue;
    }
    ++feasible;
    worst_loss = std::max(worst_loss, std::abs(ctc_loss(lat, labels, cs).loss - (-std::log(ref.sum))));
    const ForcedAlignment fa = ctc_forced_align_scored(lat, labels, cs);
    worst_align = std::max(worst_align, std::abs(fa.log_score - ref.max_log));
    double path_score = 0.0;
    for (std::size_t t = 0; t < n; ++t) path_score += logp(t, static_cast<std::size_t>(fa.frames.labels[t]));
    worst_align = std::max(worst_align, std::abs(path_score - ref.max_log));
    if (oracle::collapse_path(fa.frames.labels, 0) != labels) ++collapse_failures;
  }
  const double secs = seconds_since(t0);

  Verdict c1;
  c1.pass = worst_loss <= 1e-9 && worst_align <= 1e-9 && disagreements == 0 && secs < 30.0;
  c1.detail = fmt("1000 instances (%zu feasible, %zu infeasible agreed, %zu disagreements); max |loss err| %.3g, "
                  "max |align err| %.3g; %.2f s",
                  feasible, infeasible_agree, disagreements, worst_loss, worst_align, secs);
  report(1, "CTC oracle equivalence", c1);

  Verdict c4;
  c4.pass = collapse_failures == 0 && feasible > 0;
  c4.detail = fmt("%zu collapse failures over %zu feasible instances", collapse_failures, feasible);
  report(4, "alignment collapses to transcript", c4);
}

// ---------------------------------------------------------------------------
// 2: gradients against central finite differences.

double fd_relative_error(const Matrix& analytic, Matrix x, const std::function<double(const Matrix&)>& f) {
  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + eps;
    const double up = f(x);
    x.data()[i] = orig - eps;
    const double down = f(x);
    x.data()[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic.data()[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

LabeledFeatureBag random_bag(std::size_t n, std::size_t dim, int max_label, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> lab(1, max_label);
  LabeledFeatureBag bag{oracle::random_matrix(n, dim, rng), {}};
  for (std::size_t i = 0; i < n; ++i) bag.labels.push_back(lab(rng));
  return bag;
}

void gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2002);
  const CharSet cs = CharSet::with_blank("abc");
  double worst_joint = 0.0, worst_cmatch = 0.0, worst_mmd = 0.0;
  std::size_t instances = 0;
  std::uniform_int_distribution<std::size_t> n_d(3, 6);
  for (int trial = 0; trial < 100; ++trial) {
    // Joint loss: every parameter of a small model.
    const ModelParams p = init_model({3, 5, 4, 3, 1}, cs, 0.3, 3000 + trial);
    const Matrix frames = oracle::random_matrix(n_d(rng) + 2, 3, rng);
    const LabelSeq tr = cs.encode(trial % 3 == 0 ? "ab" : trial % 3 == 1 ? "cac" : "b");
    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const std::vector<Matrix> params(p.weights.begin(), p.weights.end());
    worst_joint = std::max(worst_joint, grad_check(
                                            [&](Tape&, std::span<const Var> vars) {
                                              ParamVars pv;
                                              std::copy(vars.begin(), vars.end(), pv.vars.begin());
                                              return joint_loss(pv, p, frames, tr, {lambda}).total;
                                            },
                                            params, 1e-5));

    // Squared MMD, both kernels.
    const Matrix xs = oracle::random_matrix(n_d(rng), 3, rng);
    const Matrix xt = oracle::random_matrix(n_d(rng), 3, rng);
    for (const KernelSpec& k : {KernelSpec::linear(), KernelSpec::rbf(1.2)}) {
      const bool rbf = k.kind == KernelKind::kRbf;
      const MmdResult r = mmd_sq_biased(xs, xt, k);
      worst_mmd = std::max(worst_mmd, fd_relative_error(r.grad_source, xs, [&](const Matrix& a) {
                             return oracle::mmd_double_sum(a, xt, rbf, k.bandwidth);
                           }));
      worst_mmd = std::max(worst_mmd, fd_relative_error(r.grad_target, xt, [&](const Matrix& b) {
                             return oracle::mmd_double_sum(xs, b, rbf, k.bandwidth);
                           }));
    }

    // Character-level loss: per-character double sums averaged over shared characters.
    const LabeledFeatureBag s = random_bag(n_d(rng) + 2, 3, 3, rng);
    const LabeledFeatureBag t = random_bag(n_d(rng) + 2, 3, 3, rng);
    const bool rbf = trial % 2 == 0;
    const KernelSpec k = rbf ? KernelSpec::rbf(0.9) : KernelSpec::linear();
    auto oracle_cmatch = [&](const Matrix& fs, const Matrix& ft) {
      double total = 0.0;
      int matched = 0;
      for (Label c = 1; c <= 3; ++c) {
        auto pick = [&](const Matrix& f, const LabelSeq& labels) {
          std::vector<double> rows;
          for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == c) rows.insert(rows.end(), f.row(i).begin(), f.row(i).end());
          }
          const std::size_t n = rows.size() / f.cols();
          return Matrix(n, f.cols(), std::move(rows));
        };
        const Matrix a = pick(fs, s.labels), b = pick(ft, t.labels);
        if (a.rows() == 0 || b.rows() == 0) continue;
        total += oracle::mmd_double_sum(a, b, rbf, k.bandwidth);
        ++matched;
      }
      return total / matched;
    };
    try {
      const CMatchResult r = cmatch_loss(s, t, cs, k);
      worst_cmatch = std::max(worst_cmatch, fd_relative_error(r.grad_source, s.features, [&](const Matrix& a) {
                                return oracle_cmatch(a, t.features);
                              }));
      worst_cmatch = std::max(worst_cmatch, fd_relative_error(r.grad_target, t.features, [&](const Matrix& b) {
                                return oracle_cmatch(s.features, b);
                              }));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNoOverlap) throw;
    }
    ++instances;
  }
  const double secs = seconds_since(t0);
  Verdict v;
  const double worst = std::max({worst_joint, worst_cmatch, worst_mmd});
  v.pass = worst < 1e-4 && secs < 60.0;
  v.detail = fmt("%zu instances; max rel err joint %.3g, cmatch %.3g, mmd %.3g; %.2f s", instances, worst_joint,
                 worst_cmatch, worst_mmd, secs);
  report(2, "gradient suite", v);
}

// ---------------------------------------------------------------------------
// 3: MMD identities.

void mmd_identities() {
  std::mt19937_64 rng(3003);
  std::uniform_int_distribution<std::size_t> n_d(1, 8), d_d(1, 5);
  double self = 0.0, linear = 0.0, sym = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = d_d(rng);
    const Matrix xs = oracle::random_matrix(n_d(rng), d, rng, -3.0, 3.0);
    const Matrix xt = oracle::random_matrix(n_d(rng), d, rng, -3.0, 3.0);
    const KernelSpec k = trial % 2 == 0 ? KernelSpec::linear() : KernelSpec::rbf(0.5 + 0.001 * trial);
    self = std::max(self, std::abs(mmd_sq_biased(xs, xs, k).value));
    sym = std::max(sym, std::abs(mmd_sq_biased(xs, xt, k).value - mmd_sq_biased(xt, xs, k).value));
    double direct = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double ms = 0.0, mt = 0.0;
      for (std::size_t i = 0; i < xs.rows(); ++i) ms += xs(i, j);
      for (std::size_t i = 0; i < xt.rows(); ++i) mt += xt(i, j);
      const double diff = ms / static_cast<double>(xs.rows()) - mt / static_cast<double>(xt.rows());
      direct += diff * diff;
    }
    linear = std::max(linear, std::abs(mmd_sq_biased(xs, xt, KernelSpec::linear()).value - direct));
  }
  Verdict v;
  v.pass = self <= 1e-12 && linear <= 1e-10 && sym <= 1e-12;
  v.detail = fmt("1000 instances; max |mmd(X,X)| %.3g, max |linear - mean diff^2| %.3g, max asymmetry %.3g", self,
                 linear, sym);
  report(3, "MMD identities", v);
}

// ---------------------------------------------------------------------------
// 5: beam search against exhaustive enumeration.

void beam_oracle() {
  const CharSet cs = CharSet::with_blank("ab");
  std::mt19937_64 rng(5005);
  std::uniform_int_distribution<std::size_t> n_d(3, 6);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    ModelParams p = init_model({3, 5, 4, 3, 1}, cs, 0.3, 5000 + trial);
    for (Matrix& m : p.weights) {
      for (double& v : m.data()) v *= 3.0;
    }
    const Matrix frames = oracle::random_matrix(n_d(rng), 3, rng);
    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto candidates = oracle::all_sequences(cs, 3);
    const BeamResult r = beam_search(p, frames, {lambda}, candidates.size(), 3);
    double best = kNegInf;
    LabelSeq best_seq;
    for (const LabelSeq& s : candidates) {
      const double score = oracle::joint_score(p, frames, s, lambda);
      if (score > best) {
        best = score;
        best_seq = s;
      }
    }
    if (r.best().tokens != best_seq) ++mismatches;
  }
  Verdict v;
  v.pass = mismatches == 0;
  v.detail = fmt("%zu mismatches over 100 models", mismatches);
  report(5, "beam-search oracle", v);
}

// ---------------------------------------------------------------------------
// 6: pseudo-label filtering.

void filtering() {
  PseudoLabelSet set;
  for (int i = 0; i < 10; ++i) set.push_back({"u" + std::to_string(i), "a", 1.0 - 0.05 * i});
  const std::size_t kept = filter_pseudo(set, 0.7).size();
  bool monotone = true;
  std::size_t prev = 0;
  for (int k = 1; k <= 1000; ++k) {
    const std::size_t n = filter_pseudo(set, k / 1000.0).size();
    monotone = monotone && n >= prev;
    prev = n;
  }
  Verdict v;
  v.pass = kept == 7 && monotone;
  v.detail = fmt("n=10, keep_ratio=0.7 keeps %zu; monotone over 1000 ratios: %s", kept, monotone ? "yes" : "no");
  report(6, "filtering contract", v);
}

// ---------------------------------------------------------------------------
// 7-10: the desk-scale device-shift task.

struct SeedRun {
  ExperimentOutcome outcome;
  std::map<std::string, std::string> csv;  // name -> bytes
};

SeedRun run_seed(std::uint64_t seed, const CharSet& cs) {
  const TaskSpec spec;
  AdaptConfig cfg;
  cfg.seed = seed;
  const TaskData task = make_task(spec, seed);
  SeedRun out;
  out.outcome = run_experiment(task, cs, cfg, std::vector<Method>(kAllMethods.begin(), kAllMethods.end()));
  std::ostringstream methods, centroids, epochs, pseudo;
  write_method_csv(methods, out.outcome.methods);
  write_centroid_csv(centroids, out.outcome.centroids, cs);
  write_epoch_csv(epochs, out.outcome.pretrain_epochs);
  write_pseudo_csv(pseudo, out.outcome.kept);
  out.csv = {{"methods", methods.str()}, {"centroids", centroids.str()}, {"pretrain_epochs", epochs.str()},
             {"pseudo", pseudo.str()}};
  for (const MethodOutcome& m : out.outcome.methods) {
    std::ostringstream e;
    write_epoch_csv(e, m.training.epochs);
    out.csv["epochs_" + std::string(to_string(m.method))] = e.str();
  }
  return out;
}

double method_cer(const ExperimentOutcome& o, Method m) {
  for (const MethodOutcome& mo : o.methods) {
    if (mo.method == m) return mo.target_cer;
  }
  return std::nan("");
}

void adaptation_task() {
  const std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  const CharSet cs = CharSet::with_blank(TaskSpec{}.generator.characters);

  const auto t0 = Clock::now();
  std::vector<SeedRun> runs;
  for (std::uint64_t s : seeds) {
    runs.push_back(run_seed(s, cs));
    const ExperimentOutcome& o = runs.back().outcome;
    std::printf("  seed %llu: source-test CER %.4f, pseudo kept %zu/%zu (CER %.4f); target CER",
                static_cast<unsigned long long>(s), o.source_test_cer, o.pseudo_kept, o.pseudo_total, o.pseudo_cer);
    for (const MethodOutcome& m : o.methods) {
      std::printf(" %s %.4f", std::string(to_string(m.method)).c_str(), m.target_cer);
    }
    std::printf("\n");
    std::fflush(stdout);
  }
  const double secs7 = seconds_since(t0);

  std::map<Method, double> med;
  for (Method m : kAllMethods) {
    std::vector<double> v;
    for (const SeedRun& r : runs) v.push_back(method_cer(r.outcome, m));
    med[m] = median(v);
  }
  const double so = med[Method::kSourceOnly], st = med[Method::kSelfTrainingOnly], dm = med[Method::kDomainMmd],
               cm = med[Method::kCMatch];
  const double reduction = so > 0.0 ? (so - cm) / so : 0.0;
  Verdict c7;
  c7.pass = cm < st && st < so && cm <= dm && reduction >= 0.10 && secs7 < 900.0;
  c7.detail = fmt("median target CER cmatch %.4f, mmd-domain %.4f, self-training-only %.4f, source-only %.4f; "
                  "relative reduction %.1f%%; %.1f s",
                  cm, dm, st, so, 100.0 * reduction, secs7);
  report(7, "desk-scale adaptation", c7);

  Verdict c8;
  std::string per_seed;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& o = runs[i].outcome;
    const bool ok = o.mean_centroid_before && o.mean_centroid_after && *o.mean_centroid_after < *o.mean_centroid_before;
    c8.pass = c8.pass && ok;
    per_seed += fmt("%sseed %llu %.4f->%.4f", i == 0 ? "" : ", ", static_cast<unsigned long long>(seeds[i]),
                    o.mean_centroid_before.value_or(std::nan("")), o.mean_centroid_after.value_or(std::nan("")));
  }
  c8.detail = "mean centroid distance before->after: " + per_seed;
  report(8, "centroid distances shrink", c8);

  std::map<AssignmentKind, std::vector<double>> by_kind;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    AdaptConfig cfg;
    cfg.seed = seeds[i];
    const TaskData task = make_task(TaskSpec{}, seeds[i]);
    for (const AssignmentOutcome& a : compare_assignments(runs[i].outcome.pretrained, task, runs[i].outcome.kept, cfg)) {
      by_kind[a.kind].push_back(a.target_cer);
    }
  }
  double lo = 1e300, hi = -1e300;
  std::string meds;
  for (AssignmentKind k : kAllAssignmentKinds) {
    const double m = median(by_kind[k]);
    lo = std::min(lo, m);
    hi = std::max(hi, m);
    meds += fmt("%s%s %.4f", meds.empty() ? "" : ", ", std::string(to_string(k)).c_str(), m);
  }
  Verdict c9;
  c9.pass = hi - lo <= 0.02;
  c9.detail = fmt("median target CER %s; spread %.4f", meds.c_str(), hi - lo);
  report(9, "label assignment strategies agree", c9);

  std::size_t compared = 0, differing = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const SeedRun again = run_seed(seeds[i], cs);
    for (const auto& [name, bytes] : runs[i].csv) {
      ++compared;
      const auto it = again.csv.find(name);
      if (it == again.csv.end() || it->second != bytes) ++differing;
    }
  }
  Verdict c10;
  c10.pass = differing == 0 && compared > 0;
  c10.detail = fmt("%zu of %zu CSV outputs differ on repeat", differing, compared);
  report(10, "determinism", c10);
}

}  // namespace

int main() {
  try {
    ctc_sweep();
    gradient_suite();
    mmd_identities();
    beam_oracle();
    filtering();
    adaptation_task();
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criterion failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}
