#pragma once
// Synthetic step-reasoning problems: chained modular arithmetic.
//
// A problem is a start digit plus L (operator, operand) pairs, evaluated
// left-to-right mod m.  The prompt encodes the expression; a model answers by
// emitting one step per partial result (`<digit> |`) and a final answer step
// (`ans <digit> end`).  Everything about a problem - gold answer, per-state
// success probability, witness - is exactly computable, which is the whole
// point of working at this scale.

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/rng.hpp"
#include "sppd/vocab.hpp"

namespace sppd {

struct ToyProblem {
  long id = 0;
  int start = 0;
  std::vector<std::pair<int, int>> ops;  // (operator token, operand digit)
  int modulus = 17;
  int gold = 0;
  std::vector<int> prompt;

  int length() const { return static_cast<int>(ops.size()); }
};

struct GenConfig {
  int modulus = 17;
  int len_min = 2;
  int len_max = 6;
  bool use_add = true;
  bool use_sub = true;
  bool use_mul = true;
  int operand_max = 0;  // exclusive cap on operands; 0 means the full digit range

  void validate() const {
    TokenVocab v(modulus);  // re-checks the 32-token cap
    if (len_min < 2 || len_max > 6 || len_min > len_max)
      fail(errkind::param, "GenConfig: expression length range must satisfy 2 <= min <= max <= 6");
    if (!use_add && !use_sub && !use_mul)
      fail(errkind::param, "GenConfig: at least one operator must be enabled");
    if (operand_max < 0 || operand_max > modulus)
      fail(errkind::param, "GenConfig: operand_max must lie in [0, modulus]");
    if (operand_max == 1 && !use_add && !use_sub)
      fail(errkind::param, "GenConfig: operand_max=1 with only '*' makes every expression collapse to 0");
  }
};

inline int apply_op(const TokenVocab& v, int op, int operand, int value) {
  int m = v.modulus;
  if (op == v.op_add()) return (value + operand) % m;
  if (op == v.op_sub()) return ((value - operand) % m + m) % m;
  if (op == v.op_mul()) return (value * operand) % m;
  fail(errkind::domain, "apply_op: token " + std::to_string(op) + " is not an operator");
}

inline int evaluate(const TokenVocab& v, int start, const std::vector<std::pair<int, int>>& ops) {
  int val = start;
  for (auto [op, operand] : ops) val = apply_op(v, op, operand, val);
  return val;
}

inline std::vector<int> render_prompt(const TokenVocab& v, int start,
                                      const std::vector<std::pair<int, int>>& ops) {
  std::vector<int> out{start};
  for (auto [op, operand] : ops) {
    out.push_back(op);
    out.push_back(operand);
  }
  out.push_back(v.sep());
  return out;
}

// Inverse of render_prompt; the round trip is asserted in tests as the
// tokenize/detokenize identity on the grammar.
inline std::pair<int, std::vector<std::pair<int, int>>> parse_prompt(const TokenVocab& v,
                                                                     const std::vector<int>& prompt) {
  if (prompt.size() < 4 || prompt.size() % 2 != 0 || prompt.back() != v.sep() ||
      !v.is_digit(prompt[0]))
    fail(errkind::data, "parse_prompt: malformed prompt");
  std::vector<std::pair<int, int>> ops;
  for (std::size_t i = 1; i + 1 < prompt.size(); i += 2) {
    if (!v.is_op(prompt[i]) || !v.is_digit(prompt[i + 1]))
      fail(errkind::data, "parse_prompt: malformed (operator, operand) pair");
    ops.emplace_back(prompt[i], prompt[i + 1]);
  }
  return {prompt[0], ops};
}

// Deterministic i.i.d. generation over the configured grammar.  Lengths use a
// 40% short (L<=3) / 60% long (L>=4) mixture; when the configured range lies
// entirely on one side the mixture degrades to plain uniform instead of
// producing an empty stratum.
inline std::vector<ToyProblem> generate(std::uint64_t seed, long n, const GenConfig& cfg,
                                        long id_base = 0) {
  if (n < 1) fail(errkind::param, "generate: n must be >= 1");
  cfg.validate();
  TokenVocab v(cfg.modulus);
  int operand_cap = cfg.operand_max == 0 ? cfg.modulus : cfg.operand_max;
  std::vector<int> op_pool;
  if (cfg.use_add) op_pool.push_back(v.op_add());
  if (cfg.use_sub) op_pool.push_back(v.op_sub());
  if (cfg.use_mul) op_pool.push_back(v.op_mul());

  Rng rng(derive_seed(seed, fnv1a("toy-gen")));
  std::vector<ToyProblem> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    int L;
    if (cfg.len_max <= 3 || cfg.len_min >= 4) {
      L = cfg.len_min + static_cast<int>(rng.bounded(cfg.len_max - cfg.len_min + 1));
    } else if (rng.real() < 0.4) {
      int hi = std::min(3, cfg.len_max);
      L = cfg.len_min + static_cast<int>(rng.bounded(hi - cfg.len_min + 1));
    } else {
      int lo = std::max(4, cfg.len_min);
      L = lo + static_cast<int>(rng.bounded(cfg.len_max - lo + 1));
    }
    ToyProblem p;
    p.id = id_base + i;
    p.modulus = cfg.modulus;
    p.start = static_cast<int>(rng.bounded(cfg.modulus));
    for (int k = 0; k < L; ++k) {
      int op = op_pool[rng.bounded(op_pool.size())];
      int operand = static_cast<int>(rng.bounded(operand_cap));
      p.ops.emplace_back(op, operand);
    }
    p.gold = evaluate(v, p.start, p.ops);
    p.prompt = render_prompt(v, p.start, p.ops);
    out.push_back(std::move(p));
  }
  return out;
}

// The constructive witness: one partial-result step per operator, then the
// answer step.  Exactly L+1 steps, always reaches gold - SFT trains on these.
inline std::vector<int> witness(const TokenVocab& v, const ToyProblem& p) {
  std::vector<int> toks;
  int val = p.start;
  for (auto [op, operand] : p.ops) {
    val = apply_op(v, op, operand, val);
    toks.push_back(val);
    toks.push_back(v.sep());
  }
  toks.push_back(v.ans());
  toks.push_back(p.gold);
  toks.push_back(v.end());
  return toks;
}

// Tail parse of a trajectory (the tokens after the prompt): the answer is
// valid only when the sequence ends exactly with `ans <digit> end`.  Total
// function - malformed tails yield nullopt, never an exception.
inline std::optional<int> parse_answer(const TokenVocab& v, const std::vector<int>& traj) {
  std::size_t n = traj.size();
  if (n < 3) return std::nullopt;
  if (traj[n - 1] != v.end() || traj[n - 3] != v.ans()) return std::nullopt;
  if (!v.is_digit(traj[n - 2])) return std::nullopt;
  return traj[n - 2];
}

inline bool check_answer(const TokenVocab& v, const ToyProblem& p, const std::vector<int>& traj) {
  auto a = parse_answer(v, traj);
  return a.has_value() && *a == p.gold;
}

}  // namespace sppd
