#pragma once
// Training orchestration: evaluation modes, the per-stage minibatch loop,
// tree mining, and the two-round pipeline.
//
// Stage curriculum (one round):
//   base witness SFT  ->  freeze as pi_ref
//   mine trees with pi_ref, score with the PRM
//   SFT on tau+            (sft stage)
//   sentence DPO           (dpo stage, ref = SFT output)
//   step-level preference  (sppd stage, ref = DPO output)
// Round two re-mines with the round-one output as sampler, then runs the
// step stage again against that new reference.  The reported step-stage
// policy is whichever round scored best on held-out greedy accuracy, ties
// to the later round.
//
// Every stage snapshots the parameter vector at the stage start and after
// each epoch, tracks a validation metric, and restores the best snapshot at
// the end ("best" includes the untouched stage start, so a stage can never
// hand a worse policy to the next stage than it received).  A non-finite
// loss or parameter aborts the stage and restores the last end-of-epoch
// snapshot.

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "sppd/config.hpp"
#include "sppd/io.hpp"
#include "sppd/losses.hpp"
#include "sppd/optim.hpp"
#include "sppd/prefs.hpp"
#include "sppd/prm.hpp"
#include "sppd/toy.hpp"
#include "sppd/tree.hpp"

namespace sppd {

constexpr double grad_clip_norm = 10.0;
constexpr int max_rollout_steps = 12;  // outer step budget per decoded trajectory

// ---------------------------------------------------------------------------
// Decoding and evaluation.
// ---------------------------------------------------------------------------

inline std::vector<int> greedy_suffix(const Policy& policy, const std::vector<int>& prompt) {
  std::vector<int> state = prompt;
  for (int i = 0; i < max_rollout_steps; ++i) {
    StepSample s = policy.greedy_step(state);
    state.insert(state.end(), s.tokens.begin(), s.tokens.end());
    if (s.truncated || (!s.tokens.empty() && s.tokens.back() == policy.vocab().end())) break;
  }
  return {state.begin() + static_cast<long>(prompt.size()), state.end()};
}

inline std::vector<int> sampled_suffix(const Policy& policy, const std::vector<int>& prompt,
                                       Rng& rng) {
  std::vector<int> state = prompt;
  for (int i = 0; i < max_rollout_steps; ++i) {
    StepSample s = policy.sample_step(state, rng);
    state.insert(state.end(), s.tokens.begin(), s.tokens.end());
    if (s.truncated || (!s.tokens.empty() && s.tokens.back() == policy.vocab().end())) break;
  }
  return {state.begin() + static_cast<long>(prompt.size()), state.end()};
}

enum class EvalMode { greedy, maj, orm_max, orm_vote };

inline const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::greedy: return "greedy";
    case EvalMode::maj: return "maj";
    case EvalMode::orm_max: return "orm_max";
    case EvalMode::orm_vote: return "orm_vote";
  }
  return "?";
}

inline EvalMode eval_mode_from(const std::string& s) {
  if (s == "greedy") return EvalMode::greedy;
  if (s == "maj") return EvalMode::maj;
  if (s == "orm_max") return EvalMode::orm_max;
  if (s == "orm_vote") return EvalMode::orm_vote;
  fail(errkind::param, "unknown eval mode '" + s + "' (greedy | maj | orm_max | orm_vote)");
}

struct QuestionEval {
  long question_id = 0;
  int answer = -1;  // -1 = no parseable answer
  bool correct = false;
};

struct EvalResult {
  double accuracy = 0.0;
  long n_correct = 0;
  long count = 0;
  std::vector<QuestionEval> records;
};

// Runs fn(i) for i in [0, n) over `threads` workers with static chunking;
// fn must only touch slot i of its outputs, so results are order-stable and
// identical to the serial run.
inline void parallel_for(long n, int threads, const std::function<void(long)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = static_cast<int>(std::min<long>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (long i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

// Aggregated answer selection.  `scorer` is only consulted by the orm modes
// (trajectory score = PRM score of the full final state); maj picks the
// modal parsed answer.  All ties resolve to the lowest answer value so the
// result is independent of sample order.
template <class ScoreFn>
EvalResult evaluate(const Policy& policy, const std::vector<ToyProblem>& problems, EvalMode mode,
                    int n_samples, ScoreFn&& scorer, std::uint64_t seed, int threads = 1) {
  if (problems.empty()) fail(errkind::param, "evaluate: no problems");
  if (mode != EvalMode::greedy && n_samples < 1)
    fail(errkind::param, "evaluate: sampled modes need n_samples >= 1");
  const TokenVocab& v = policy.vocab();

  EvalResult out;
  out.records.resize(problems.size());
  parallel_for(static_cast<long>(problems.size()), threads, [&](long qi) {
    const ToyProblem& p = problems[static_cast<std::size_t>(qi)];
    QuestionEval& rec = out.records[static_cast<std::size_t>(qi)];
    rec.question_id = p.id;

    if (mode == EvalMode::greedy) {
      std::vector<int> suffix = greedy_suffix(policy, p.prompt);
      auto a = parse_answer(v, suffix);
      rec.answer = a.value_or(-1);
      rec.correct = a.has_value() && *a == p.gold;
      return;
    }

    Rng rng(derive_seed(seed, fnv1a_pod(p.id, fnv1a("eval-rollouts"))));
    std::vector<std::vector<int>> suffixes(static_cast<std::size_t>(n_samples));
    for (auto& s : suffixes) s = sampled_suffix(policy, p.prompt, rng);

    if (mode == EvalMode::maj) {
      std::map<int, int> votes;
      for (const auto& s : suffixes)
        if (auto a = parse_answer(v, s)) ++votes[*a];
      int best = -1, best_votes = 0;
      for (auto [ans, n] : votes)
        if (n > best_votes) {  // map order makes ties go to the lowest answer
          best = ans;
          best_votes = n;
        }
      rec.answer = best;
    } else {
      vecd scores(suffixes.size());
      for (std::size_t k = 0; k < suffixes.size(); ++k) scores[k] = scorer(p, suffixes[k]);
      if (mode == EvalMode::orm_max) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < suffixes.size(); ++k)
          if (scores[k] > scores[best]) best = k;
        rec.answer = parse_answer(v, suffixes[best]).value_or(-1);
      } else {  // orm_vote: sum scores per answer, argmax of the sums
        std::map<int, double> mass;
        for (std::size_t k = 0; k < suffixes.size(); ++k)
          if (auto a = parse_answer(v, suffixes[k])) mass[*a] += scores[k];
        int best = -1;
        double best_mass = -1.0;
        for (auto [ans, m] : mass)
          if (m > best_mass) {
            best = ans;
            best_mass = m;
          }
        rec.answer = best;
      }
    }
    rec.correct = rec.answer == p.gold;
  });

  out.count = static_cast<long>(out.records.size());
  for (const auto& r : out.records) out.n_correct += r.correct ? 1 : 0;
  out.accuracy = static_cast<double>(out.n_correct) / static_cast<double>(out.count);
  return out;
}

// ---------------------------------------------------------------------------
// Stage loop.
// ---------------------------------------------------------------------------

struct StageMetrics {
  std::string name;
  vecd epoch_losses;
  std::vector<TrainLogRow> log;
  double start_metric = -1.0;  // validation metric before any update
  double best_metric = -1.0;
  int best_epoch = 0;  // 0 = stage start
  int epochs_run = 0;
  bool stopped_early = false;
  bool nan_abort = false;
};

struct StageResult {
  std::unique_ptr<Policy> policy;
  StageMetrics metrics;
};

using BatchLossFn = std::function<LossValue(const Policy&, const std::vector<std::size_t>&)>;
using MetricFn = std::function<double(const Policy&)>;

// One stage: shuffled minibatches, gradient clipping at grad_clip_norm,
// optional per-epoch cosine decay, per-batch log rows.  `metric` drives both
// the best-snapshot restore (when best_restore) and the stop_at early-exit
// rule; pass nullptr to train blind.
inline StageResult run_stage_core(const StageConfig& cfg, const std::string& name,
                                  const Policy& start, std::size_t n_items,
                                  const BatchLossFn& batch_loss, std::uint64_t seed,
                                  const MetricFn& metric, bool best_restore,
                                  const std::string& seed_tag = "") {
  cfg.validate();
  if (n_items == 0) fail(errkind::data, "stage '" + name + "': empty training set");

  StageResult res;
  res.policy = start.clone();
  res.metrics.name = name;
  Policy& pol = *res.policy;

  std::unique_ptr<Optimizer> opt;
  if (cfg.optimizer == "adam") {
    AdamConfig ac;
    ac.lr = cfg.lr;
    opt = std::make_unique<Adam>(ac);
  } else {
    opt = std::make_unique<Sgd>();
  }

  // A caller may pin the rng stream of another stage (seed_tag) to compare
  // loss variants batch for batch; by default the stream is keyed by name.
  Rng rng(derive_seed(seed, fnv1a("stage:" + (seed_tag.empty() ? name : seed_tag))));
  vecd last_good = pol.theta();
  vecd best_theta = pol.theta();
  if (metric) {
    res.metrics.start_metric = metric(pol);
    res.metrics.best_metric = res.metrics.start_metric;
  }

  std::vector<std::size_t> order(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
  long gstep = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates reshuffle per epoch
    for (std::size_t i = n_items - 1; i > 0; --i)
      std::swap(order[i], order[rng.bounded(static_cast<std::uint64_t>(i) + 1)]);

    // lr is held constant within an epoch and annealed across epochs.
    double lr =
        cfg.cosine_horizon > 0 ? cosine_lr(cfg.lr, epoch - 1, cfg.cosine_horizon) : cfg.lr;
    double epoch_loss = 0.0;
    long batches = 0;
    for (std::size_t at = 0; at < n_items; at += static_cast<std::size_t>(cfg.batch)) {
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(at),
                                   order.begin() +
                                       static_cast<long>(std::min(at + static_cast<std::size_t>(cfg.batch),
                                                                  n_items)));
      LossValue lv = batch_loss(pol, idx);
      if (!std::isfinite(lv.value) || !all_finite(lv.grad)) {
        pol.theta_mut() = last_good;
        res.metrics.nan_abort = true;
        break;
      }
      double gn = clip_grad_norm(lv.grad, grad_clip_norm);
      opt->step(pol.theta_mut(), lv.grad, lr);
      if (!all_finite(pol.theta())) {
        pol.theta_mut() = last_good;
        res.metrics.nan_abort = true;
        break;
      }
      ++gstep;
      epoch_loss += lv.value;
      ++batches;
      res.metrics.log.push_back({name, epoch, gstep, lv.value, gn, lr});
    }
    if (res.metrics.nan_abort) break;

    last_good = pol.theta();
    res.metrics.epoch_losses.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    res.metrics.epochs_run = epoch;

    if (metric) {
      bool stop_check = cfg.stop_at > 0.0 && epoch >= cfg.check_from &&
                        (epoch - cfg.check_from) % cfg.check_every == 0;
      if (best_restore || stop_check) {
        double m = metric(pol);
        if (m >= res.metrics.best_metric) {  // >= : later checkpoint wins ties
          res.metrics.best_metric = m;
          res.metrics.best_epoch = epoch;
          best_theta = pol.theta();
        }
        if (stop_check && m >= cfg.stop_at) {
          res.metrics.stopped_early = true;
          break;
        }
      }
    }
  }

  if (best_restore && metric && !res.metrics.nan_abort) pol.theta_mut() = best_theta;
  return res;
}

// ---------------------------------------------------------------------------
// Stage data adapters.
// ---------------------------------------------------------------------------

inline std::vector<SftItem> witness_items(const TokenVocab& v,
                                          const std::vector<ToyProblem>& problems) {
  std::vector<SftItem> items;
  items.reserve(problems.size());
  for (const auto& p : problems) items.push_back({p.prompt, witness(v, p)});
  return items;
}

inline std::map<long, const ToyProblem*> problem_index(const std::vector<ToyProblem>& problems) {
  std::map<long, const ToyProblem*> idx;
  for (const auto& p : problems) idx[p.id] = &p;
  return idx;
}

inline std::vector<SftItem> tau_plus_items(const std::vector<ToyProblem>& problems,
                                           const std::vector<Trajectory>& chosen) {
  auto idx = problem_index(problems);
  std::vector<SftItem> items;
  items.reserve(chosen.size());
  for (const auto& t : chosen) {
    auto it = idx.find(t.question_id);
    if (it == idx.end())
      fail(errkind::data, "tau_plus_items: trajectory references unknown question " +
                              std::to_string(t.question_id));
    items.push_back({it->second->prompt, t.tokens});
  }
  return items;
}

inline std::vector<SeqPairItem> sentence_items(const std::vector<ToyProblem>& problems,
                                               const std::vector<SentencePair>& pairs) {
  auto idx = problem_index(problems);
  std::vector<SeqPairItem> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto it = idx.find(p.question_id);
    if (it == idx.end())
      fail(errkind::data, "sentence_items: pair references unknown question " +
                              std::to_string(p.question_id));
    items.push_back({it->second->prompt, p.chosen.tokens, p.rejected.tokens});
  }
  return items;
}

template <class T>
std::vector<T> take(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

// Convenience wrappers binding each loss to the core loop.

// SFT shuffles and batches individual next-token examples (prefix -> target),
// not whole sequences, so `batch` counts tokens and a long witness cannot
// crowd a minibatch on its own.
inline StageResult run_sft_stage(const StageConfig& cfg, const std::string& name,
                                 const Policy& start, const std::vector<SftItem>& items,
                                 std::uint64_t seed, const MetricFn& metric, bool best_restore) {
  std::vector<SftItem> flat;
  for (const auto& it : items) {
    SftItem e{it.prompt, {}};
    for (int tok : it.tokens) {
      e.tokens.assign(1, tok);
      flat.push_back(e);
      e.prompt.push_back(tok);
    }
  }
  const std::size_t n = flat.size();
  BatchLossFn fn = [flat = std::move(flat)](const Policy& p, const std::vector<std::size_t>& idx) {
    return sft_loss(p, take(flat, idx));
  };
  return run_stage_core(cfg, name, start, n, fn, seed, metric, best_restore);
}

inline StageResult run_dpo_stage(const StageConfig& cfg, const std::string& name,
                                 const Policy& start, const Policy& ref,
                                 const std::vector<SeqPairItem>& items, std::uint64_t seed,
                                 const MetricFn& metric, bool best_restore) {
  BatchLossFn fn = [&items, &ref, &cfg](const Policy& p, const std::vector<std::size_t>& idx) {
    return dpo_loss(p, ref, take(items, idx), cfg.beta);
  };
  return run_stage_core(cfg, name, start, items.size(), fn, seed, metric, best_restore);
}

inline StageResult run_step_stage(const StageConfig& cfg, const std::string& name,
                                  const Policy& start, const Policy& ref,
                                  const std::vector<StepPreferencePair>& items,
                                  std::uint64_t seed, const MetricFn& metric, bool best_restore,
                                  const std::string& seed_tag = "") {
  MarginMode mode = margin_mode_from(cfg.margin);
  BatchLossFn fn = [&items, &ref, &cfg, mode](const Policy& p,
                                              const std::vector<std::size_t>& idx) {
    return step_dpo_loss(p, ref, take(items, idx), cfg.beta, cfg.gamma, mode, cfg.fixed_margin);
  };
  return run_stage_core(cfg, name, start, items.size(), fn, seed, metric, best_restore, seed_tag);
}

// ---------------------------------------------------------------------------
// Mining: trees -> scored steps -> preference sets.
// ---------------------------------------------------------------------------

struct MinedData {
  std::vector<Trajectory> trajs;
  StepDataset dstep;
  SentenceSelection sel;
  std::vector<StepPreferencePair> step_pairs;
};

// One tree per question under `sampler`, scored by `scorer`; per-question
// seeds are derived from (seed, question id) so the result is independent of
// the thread count and of question order.  Every expanded child's successor
// state is scored - including children whose subtrees never completed a
// trajectory - so sibling pairs never trip the missing-score error.
template <class ScoreFn>
MinedData mine(const std::vector<ToyProblem>& problems, const Policy& sampler,
               const TreeConfig& tree_cfg, const PairConfig& pair_cfg, ScoreFn&& scorer,
               std::uint64_t seed, int threads = 1) {
  struct PerQ {
    std::vector<Trajectory> trajs;
    StepDataset ds;
    SentenceSelection sel;
    std::vector<StepPreferencePair> pairs;
  };
  std::vector<PerQ> slots(problems.size());

  parallel_for(static_cast<long>(problems.size()), threads, [&](long qi) {
    const ToyProblem& p = problems[static_cast<std::size_t>(qi)];
    PerQ& slot = slots[static_cast<std::size_t>(qi)];
    Rng rng(derive_seed(seed, fnv1a_pod(p.id, fnv1a("mine"))));
    auto [tree, trajs] = run_tree(p, sampler, tree_cfg, rng);
    slot.trajs = std::move(trajs);
    slot.ds = score_dataset(p, slot.trajs, scorer);
    StateScoreIndex idx = StateScoreIndex::from_dataset(slot.ds);
    for (std::size_t ni = 1; ni < tree.nodes.size(); ++ni) {
      const auto& state = tree.nodes[ni].state;
      if (!idx.find(state)) {
        std::vector<int> suffix(state.begin() + static_cast<long>(p.prompt.size()), state.end());
        idx.add(state, scorer(p, suffix));
      }
    }
    slot.pairs = extract_step_pairs(tree, idx, pair_cfg);
    slot.sel = select_sentence_pairs(slot.ds, slot.trajs);
  });

  MinedData out;
  for (auto& s : slots) {
    out.trajs.insert(out.trajs.end(), s.trajs.begin(), s.trajs.end());
    out.dstep.records.insert(out.dstep.records.end(), s.ds.records.begin(), s.ds.records.end());
    out.sel.pairs.insert(out.sel.pairs.end(), s.sel.pairs.begin(), s.sel.pairs.end());
    out.sel.sft_chosen.insert(out.sel.sft_chosen.end(), s.sel.sft_chosen.begin(),
                              s.sel.sft_chosen.end());
    out.step_pairs.insert(out.step_pairs.end(), s.pairs.begin(), s.pairs.end());
  }
  return out;
}

}  // namespace sppd
