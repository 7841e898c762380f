#pragma once
// Process-reward scoring.
//
// Three scorers behind one call shape `double(problem, trajectory-suffix)`:
//
//   OraclePrm   - the exact probability that a uniform reference rollout from
//                 the given state reaches the gold answer, by enumeration.
//                 The reference rollout is the toy step-MDP's: at each value
//                 level it extends with either the faithfully computed next
//                 partial result or an off-by-one corruption (uniformly), and
//                 at the answer level it answers either its current value or
//                 its off-by-one (uniformly).  Terminal states score exactly
//                 1 or 0; unparseable states score 0.
//   NoisyPrm    - logit-space Gaussian perturbation of another scorer, for
//                 studying the 0.5-threshold filters under miscalibration.
//   ExternalPrm - replays scores recorded in a file keyed by state hash, so
//                 real PRM outputs can be plugged in offline.
//
// Plus the trajectory-level diagnostics: ORM (last step) / mean / min
// accuracy at the 0.5 threshold per correctness class, and five-segment score
// profiles.

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/rng.hpp"
#include "sppd/toy.hpp"
#include "sppd/tree.hpp"

namespace sppd {

enum class PrmSource { oracle, noisy, external };

struct PrmScore {
  double value = 0.0;
  PrmSource source = PrmSource::oracle;
};

// ---------------------------------------------------------------------------
// Oracle scorer.
// ---------------------------------------------------------------------------

class OraclePrm {
public:
  explicit OraclePrm(const TokenVocab& v) : vocab_(v) {}

  double operator()(const ToyProblem& p, const std::vector<int>& suffix) const {
    return score(p, suffix).value;
  }

  PrmScore score(const ToyProblem& p, const std::vector<int>& suffix) const {
    return {score_value(p, suffix), PrmSource::oracle};
  }

  double score_value(const ToyProblem& p, const std::vector<int>& suffix) const {
    const TokenVocab& v = vocab_;
    if (!suffix.empty() && suffix.back() == v.end())
      return check_answer(v, p, suffix) ? 1.0 : 0.0;

    // Parse the suffix as completed `<digit> |` claims. Anything else - a
    // stray answer marker, a malformed run, more claims than operators -
    // cannot reach a valid gold tail and scores 0.
    std::vector<int> claims;
    std::size_t i = 0;
    const std::size_t n = suffix.size();
    while (i < n) {
      if (suffix[i] == v.ans()) return 0.0;  // answer started but state is not terminal
      if (i + 1 < n && v.is_digit(suffix[i]) && suffix[i + 1] == v.sep()) {
        claims.push_back(suffix[i]);
        i += 2;
        continue;
      }
      return 0.0;
    }
    if (static_cast<int>(claims.size()) > p.length()) return 0.0;
    int value = claims.empty() ? p.start : claims.back();
    return success_prob(p, value, static_cast<int>(claims.size()));
  }

  // Success probability from (current value, claims made) under the uniform
  // binary rollout, by memoized enumeration over the state space of size
  // m x (L+1).
  double success_prob(const ToyProblem& p, int value, int k) const {
    std::vector<vecd> memo(static_cast<std::size_t>(p.length()) + 1,
                           vecd(static_cast<std::size_t>(p.modulus), -1.0));
    return succ(p, value, k, memo);
  }

private:
  double succ(const ToyProblem& p, int value, int k, std::vector<vecd>& memo) const {
    double& slot = memo[static_cast<std::size_t>(k)][static_cast<std::size_t>(value)];
    if (slot >= 0.0) return slot;
    double r;
    if (k == p.length()) {
      // Answer level: answer the current value or its off-by-one.
      r = 0.5 * (value == p.gold ? 1.0 : 0.0) +
          0.5 * ((value + 1) % p.modulus == p.gold ? 1.0 : 0.0);
    } else {
      int next = apply_op(vocab_, p.ops[static_cast<std::size_t>(k)].first,
                          p.ops[static_cast<std::size_t>(k)].second, value);
      r = 0.5 * succ(p, next, k + 1, memo) + 0.5 * succ(p, (next + 1) % p.modulus, k + 1, memo);
    }
    slot = r;
    return r;
  }

  TokenVocab vocab_;
};

// ---------------------------------------------------------------------------
// Calibrated-noise scorer.
// ---------------------------------------------------------------------------

// sigma = 0 is the exact identity (no logit round trip). Scores of exactly
// 0 or 1 have infinite logits and stay fixed; everything else is perturbed in
// logit space and mapped back through the sigmoid, which lands in (0,1) by
// construction - the final clamp is pure belt-and-braces.
inline PrmScore noisy_score(PrmScore base, double sigma, Rng& rng) {
  if (sigma < 0.0) fail(errkind::param, "noisy_score: sigma must be >= 0");
  if (sigma == 0.0) return base;
  double s = base.value;
  if (s > 0.0 && s < 1.0) {
    double logit = std::log(s / (1.0 - s));
    s = sigmoid(logit + sigma * rng.normal());
  }
  return {std::clamp(s, 0.0, 1.0), PrmSource::noisy};
}

template <class Inner>
class NoisyPrm {
public:
  NoisyPrm(Inner inner, double sigma, std::uint64_t seed)
      : inner_(std::move(inner)), sigma_(sigma), rng_(derive_seed(seed, fnv1a("prm-noise"))) {
    if (sigma < 0.0) fail(errkind::param, "NoisyPrm: sigma must be >= 0");
  }

  double operator()(const ToyProblem& p, const std::vector<int>& suffix) {
    PrmScore s{inner_(p, suffix), PrmSource::oracle};
    return noisy_score(s, sigma_, rng_).value;
  }

private:
  Inner inner_;
  double sigma_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// External score replay.
// ---------------------------------------------------------------------------

inline std::uint64_t state_key(const ToyProblem& p, const std::vector<int>& suffix) {
  std::uint64_t h = fnv1a("prm-state");
  for (int t : p.prompt) h = fnv1a_pod(t, h);
  for (int t : suffix) h = fnv1a_pod(t, h);
  return h;
}

class ExternalPrm {
public:
  explicit ExternalPrm(std::unordered_map<std::uint64_t, double> table)
      : table_(std::move(table)) {}

  // Line format: `<16-hex-digit state hash> <score>`; '#' comments allowed.
  static ExternalPrm parse(const std::string& text) {
    std::unordered_map<std::uint64_t, double> table;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string key;
      double score;
      if (!(ls >> key)) continue;
      if (!(ls >> score) || score < 0.0 || score > 1.0)
        fail(errkind::data, "external PRM: bad score on line " + std::to_string(lineno));
      std::size_t used = 0;
      std::uint64_t k = 0;
      try {
        k = std::stoull(key, &used, 16);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != key.size())
        fail(errkind::data, "external PRM: bad state key on line " + std::to_string(lineno));
      table[k] = score;
    }
    return ExternalPrm(std::move(table));
  }

  double operator()(const ToyProblem& p, const std::vector<int>& suffix) const {
    auto it = table_.find(state_key(p, suffix));
    if (it == table_.end())
      fail(errkind::data,
           "external PRM: no recorded score for state " + hex64(state_key(p, suffix)));
    return it->second;
  }

  std::size_t size() const { return table_.size(); }

private:
  std::unordered_map<std::uint64_t, double> table_;
};

// Caching wrapper: each unique state is scored exactly once per tree build.
template <class Inner>
class CachedPrm {
public:
  explicit CachedPrm(Inner& inner) : inner_(inner) {}

  double operator()(const ToyProblem& p, const std::vector<int>& suffix) {
    auto key = state_key(p, suffix);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    double s = inner_(p, suffix);
    cache_.emplace(key, s);
    return s;
  }

  const std::unordered_map<std::uint64_t, double>& cache() const { return cache_; }

private:
  Inner& inner_;
  std::unordered_map<std::uint64_t, double> cache_;
};

// ---------------------------------------------------------------------------
// Diagnostics: how well would thresholding at 0.5 classify trajectories?
// ---------------------------------------------------------------------------

struct ClassDiag {
  long count = 0;
  double orm_acc = 0.0;   // last-step score as the outcome score
  double mean_acc = 0.0;  // trajectory mean score
  double min_acc = 0.0;   // trajectory min score
};

struct QuintileStat {
  long count = 0;  // trajectories contributing (segment non-empty)
  double mean = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

struct PrmDiagnostics {
  ClassDiag correct, incorrect;
  // [class][segment]: class 0 = correct, 1 = incorrect.
  QuintileStat quintiles[2][5];
};

namespace detail {

inline double quantile(vecd sorted, double q) {
  if (sorted.empty()) return 0.0;
  double pos = q * static_cast<double>(sorted.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace detail

inline PrmDiagnostics diagnostics(const StepDataset& ds) {
  if (ds.records.empty()) fail(errkind::param, "diagnostics: empty dataset");

  // Regroup records into per-trajectory score sequences. std::map keys give a
  // canonical order, making the result independent of record order.
  std::map<std::pair<long, int>, std::pair<vecd, bool>> trajs;
  for (const auto& r : ds.records) {
    auto& slot = trajs[{r.question_id, r.traj_id}];
    slot.first.push_back(r.score);
    slot.second = r.correct;
  }

  PrmDiagnostics out;
  long hit[2][3] = {{0, 0, 0}, {0, 0, 0}};
  vecd seg_means[2][5];
  for (auto& [key, tr] : trajs) {
    const vecd& scores = tr.first;
    bool correct = tr.second;
    int cls = correct ? 0 : 1;
    double orm = scores.back();
    double mean = 0.0, mn = scores[0];
    for (double s : scores) {
      mean += s;
      mn = std::min(mn, s);
    }
    mean /= static_cast<double>(scores.size());
    // A metric above 0.5 classifies the trajectory as correct; accuracy is
    // agreement with the actual final-answer flag.
    double metrics[3] = {orm, mean, mn};
    for (int m = 0; m < 3; ++m)
      if ((metrics[m] > 0.5) == correct) ++hit[cls][m];
    (correct ? out.correct : out.incorrect).count += 1;

    // Five contiguous segments by proportional index; short trajectories
    // leave some segments empty and those are skipped.
    vecd seg_sum(5, 0.0);
    std::vector<int> seg_n(5, 0);
    const std::size_t n = scores.size();
    for (std::size_t s = 0; s < n; ++s) {
      std::size_t seg = s * 5 / n;
      seg_sum[seg] += scores[s];
      ++seg_n[seg];
    }
    for (int seg = 0; seg < 5; ++seg)
      if (seg_n[seg] > 0)
        seg_means[cls][seg].push_back(seg_sum[static_cast<std::size_t>(seg)] / seg_n[seg]);
  }

  auto fill_class = [&](ClassDiag& d, int cls) {
    if (d.count == 0) return;
    d.orm_acc = static_cast<double>(hit[cls][0]) / static_cast<double>(d.count);
    d.mean_acc = static_cast<double>(hit[cls][1]) / static_cast<double>(d.count);
    d.min_acc = static_cast<double>(hit[cls][2]) / static_cast<double>(d.count);
  };
  fill_class(out.correct, 0);
  fill_class(out.incorrect, 1);

  for (int cls = 0; cls < 2; ++cls)
    for (int seg = 0; seg < 5; ++seg) {
      vecd& xs = seg_means[cls][seg];
      QuintileStat& q = out.quintiles[cls][seg];
      q.count = static_cast<long>(xs.size());
      if (xs.empty()) continue;
      double sum = 0.0;
      for (double x : xs) sum += x;
      q.mean = sum / static_cast<double>(xs.size());
      std::sort(xs.begin(), xs.end());
      q.q1 = detail::quantile(xs, 0.25);
      q.q3 = detail::quantile(xs, 0.75);
    }
  return out;
}

inline std::string diagnostics_csv(const PrmDiagnostics& d) {
  std::ostringstream out;
  out << "class,metric,accuracy,count\n";
  auto row = [&](const char* cls, const char* metric, double acc, long count) {
    out << cls << "," << metric << "," << fmt_g17(acc) << "," << count << "\n";
  };
  row("correct", "orm", d.correct.orm_acc, d.correct.count);
  row("correct", "mean_prm", d.correct.mean_acc, d.correct.count);
  row("correct", "min_prm", d.correct.min_acc, d.correct.count);
  row("incorrect", "orm", d.incorrect.orm_acc, d.incorrect.count);
  row("incorrect", "mean_prm", d.incorrect.mean_acc, d.incorrect.count);
  row("incorrect", "min_prm", d.incorrect.min_acc, d.incorrect.count);
  return out.str();
}

inline std::string quintiles_csv(const PrmDiagnostics& d) {
  std::ostringstream out;
  out << "class,segment,mean,q1,q3,count\n";
  const char* names[2] = {"correct", "incorrect"};
  for (int cls = 0; cls < 2; ++cls)
    for (int seg = 0; seg < 5; ++seg) {
      const QuintileStat& q = d.quintiles[cls][seg];
      out << names[cls] << "," << (seg + 1) << "," << fmt_g17(q.mean) << "," << fmt_g17(q.q1)
          << "," << fmt_g17(q.q3) << "," << q.count << "\n";
    }
  return out.str();
}

}  // namespace sppd
