#pragma once
// Training objectives.
//
// All losses return (value, flat gradient, counts) and reduce by arithmetic
// mean over their batch, so learning rates are scale-free in batch size.
// -log sigmoid(x) is always computed as softplus(-x).
//
// The step preference loss is
//     softplus(-(beta * h - margin)),
//     h = [log pi(a_w|s) - log ref(a_w|s)] - [log pi(a_l|s) - log ref(a_l|s)]
// with three margin modes: `dynamic` uses gamma * (v_w - v_l), the value gap
// of the two successor states (PRM scores standing in for the optimal value
// function); `fixed` uses a constant; `none` drops the margin, which is plain
// step-DPO.  gamma = 0 in dynamic mode is bit-identical to `none` because the
// term multiplies out to exactly 0.0 before the subtraction.
//
// The preference-decoding probability treats each sibling pair as a
// two-outcome policy:  pi_p(a_w | s) = sigmoid(beta * h - (v_w - v_l)); its
// margin coefficient is fixed at 1, not gamma - the decoding model is defined
// by the reward difference itself, while gamma belongs to the training loss.
//
// The every-step loss runs over an explicit binary preference tree: an
// expectation under pi_p_ref of the summed winner negative log-likelihoods at
// every visited node, either by exact enumeration of all 2^T paths or by
// Monte Carlo.

#include <string>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/policy.hpp"
#include "sppd/prefs.hpp"
#include "sppd/rng.hpp"

namespace sppd {

struct LossValue {
  double value = 0.0;
  vecd grad;
  long pair_count = 0;
  long token_count = 0;
};

// ---------------------------------------------------------------------------
// SFT: mean next-token NLL over all tokens of all items.
// ---------------------------------------------------------------------------

struct SftItem {
  std::vector<int> prompt;
  std::vector<int> tokens;  // target continuation (witness or tau+)
};

inline LossValue sft_loss(const Policy& policy, const std::vector<SftItem>& items) {
  if (items.empty()) fail(errkind::param, "sft_loss: empty batch");
  long total_tokens = 0;
  for (const auto& it : items) total_tokens += static_cast<long>(it.tokens.size());
  if (total_tokens == 0) fail(errkind::param, "sft_loss: no target tokens");

  LossValue out;
  out.grad.assign(policy.dim(), 0.0);
  out.token_count = total_tokens;
  const double coeff = -1.0 / static_cast<double>(total_tokens);
  for (const auto& it : items) {
    std::vector<int> ctx = it.prompt;
    for (int t : it.tokens) {
      out.value -= policy.logp_and_grad(ctx, t, coeff, out.grad);
      ctx.push_back(t);
    }
  }
  out.value /= static_cast<double>(total_tokens);
  return out;
}

// ---------------------------------------------------------------------------
// Sentence-level DPO over (prompt, chosen, rejected) triples.
// ---------------------------------------------------------------------------

struct SeqPairItem {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;
};

inline LossValue dpo_loss(const Policy& policy, const Policy& ref,
                          const std::vector<SeqPairItem>& pairs, double beta) {
  if (pairs.empty()) fail(errkind::param, "dpo_loss: empty batch");
  if (beta <= 0.0) fail(errkind::param, "dpo_loss: beta must be positive");

  LossValue out;
  out.grad.assign(policy.dim(), 0.0);
  out.pair_count = static_cast<long>(pairs.size());
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    double lw = policy.step_log_prob(p.prompt, p.chosen).total;
    double ll = policy.step_log_prob(p.prompt, p.rejected).total;
    double rw = lw - ref.step_log_prob(p.prompt, p.chosen).total;
    double rl = ll - ref.step_log_prob(p.prompt, p.rejected).total;
    double x = beta * (rw - rl);
    if (!std::isfinite(x))
      fail(errkind::numeric, "dpo_loss: non-finite reward difference at pair " + std::to_string(i));
    out.value += softplus(-x);
    double c = -beta * sigmoid(-x) * inv_n;  // d softplus(-x)/d theta, through x
    policy.step_logp_and_grad(p.prompt, p.chosen, c, out.grad);
    policy.step_logp_and_grad(p.prompt, p.rejected, -c, out.grad);
  }
  out.value *= inv_n;
  return out;
}

// ---------------------------------------------------------------------------
// Step-level preference loss with the margin modes.
// ---------------------------------------------------------------------------

enum class MarginMode { dynamic, fixed, none };

inline const char* margin_mode_name(MarginMode m) {
  switch (m) {
    case MarginMode::dynamic: return "dynamic";
    case MarginMode::fixed: return "fixed";
    case MarginMode::none: return "none";
  }
  return "?";
}

inline MarginMode margin_mode_from(const std::string& s) {
  if (s == "dynamic") return MarginMode::dynamic;
  if (s == "fixed") return MarginMode::fixed;
  if (s == "none") return MarginMode::none;
  fail(errkind::param, "unknown margin mode '" + s + "' (dynamic | fixed | none)");
}

inline LossValue step_dpo_loss(const Policy& policy, const Policy& ref,
                               const std::vector<StepPreferencePair>& pairs, double beta,
                               double gamma, MarginMode mode = MarginMode::dynamic,
                               double fixed_margin = 0.5) {
  if (pairs.empty()) fail(errkind::param, "step_dpo_loss: empty batch");
  if (beta <= 0.0) fail(errkind::param, "step_dpo_loss: beta must be positive");
  if (gamma < 0.0) fail(errkind::param, "step_dpo_loss: gamma must be >= 0");

  LossValue out;
  out.grad.assign(policy.dim(), 0.0);
  out.pair_count = static_cast<long>(pairs.size());
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    double hw = policy.step_log_prob(p.state, p.winner).total -
                ref.step_log_prob(p.state, p.winner).total;
    double hl = policy.step_log_prob(p.state, p.loser).total -
                ref.step_log_prob(p.state, p.loser).total;
    double h = hw - hl;
    if (!std::isfinite(h))
      fail(errkind::numeric,
           "step_dpo_loss: non-finite implicit-reward difference at pair " + std::to_string(i) +
               " (question " + std::to_string(p.question_id) + ")");
    double margin;
    switch (mode) {
      case MarginMode::dynamic: margin = gamma * (p.v_w - p.v_l); break;
      case MarginMode::fixed: margin = fixed_margin; break;
      default: margin = 0.0;
    }
    double x = beta * h - margin;
    out.value += softplus(-x);
    double c = -beta * sigmoid(-x) * inv_n;
    policy.step_logp_and_grad(p.state, p.winner, c, out.grad);
    policy.step_logp_and_grad(p.state, p.loser, -c, out.grad);
  }
  out.value *= inv_n;
  return out;
}

// ---------------------------------------------------------------------------
// Preference decoding.
// ---------------------------------------------------------------------------

inline double pref_decode_prob(const Policy& policy, const Policy& ref,
                               const std::vector<int>& state, const std::vector<int>& a_w,
                               const std::vector<int>& a_l, double v_w, double v_l, double beta) {
  if (a_w == a_l) fail(errkind::param, "pref_decode_prob: actions must differ");
  double h = (policy.step_log_prob(state, a_w).total - ref.step_log_prob(state, a_w).total) -
             (policy.step_log_prob(state, a_l).total - ref.step_log_prob(state, a_l).total);
  return sigmoid(beta * h - (v_w - v_l));
}

// log pi_p(a_w | s) with coeff * gradient accumulated into grad.  Shared by
// the every-step loss and the theory verifiers; d log sigmoid(x) / d theta =
// sigmoid(-x) * beta * (grad log pi(a_w) - grad log pi(a_l)).
inline double logp_pref_and_grad(const Policy& policy, const Policy& ref,
                                 const std::vector<int>& state, const std::vector<int>& a_w,
                                 const std::vector<int>& a_l, double v_w, double v_l, double beta,
                                 double coeff, vecd& grad) {
  double h = (policy.step_log_prob(state, a_w).total - ref.step_log_prob(state, a_w).total) -
             (policy.step_log_prob(state, a_l).total - ref.step_log_prob(state, a_l).total);
  double x = beta * h - (v_w - v_l);
  double c = coeff * sigmoid(-x) * beta;
  if (c != 0.0) {
    policy.step_logp_and_grad(state, a_w, c, grad);
    policy.step_logp_and_grad(state, a_l, -c, grad);
  }
  return -softplus(-x);  // log sigmoid(x)
}

// ---------------------------------------------------------------------------
// Binary preference trees and the offline every-step loss.
// ---------------------------------------------------------------------------

// A complete binary tree of sibling preference pairs, heap-indexed: node 0 is
// the root, node i's children are 2i+1 (after taking a_w) and 2i+2 (after
// a_l).  Only internal nodes are stored: 2^depth - 1 of them.  The induced
// two-outcome policies are pi_p(theta) and pi_p(ref) per pref_decode_prob;
// note pi_p(ref) depends only on the margins, since h vanishes at theta=ref.
struct BinaryPrefNode {
  std::vector<int> a_w, a_l;
  double v_w = 0.0, v_l = 0.0;
};

struct BinaryPrefTree {
  std::vector<int> root_state;
  int depth = 0;
  std::vector<BinaryPrefNode> nodes;  // heap order, internal nodes only

  void validate() const {
    if (depth < 0 || depth > 6)
      fail(errkind::param, "BinaryPrefTree: depth must lie in [0, 6] to stay enumerable");
    std::size_t want = (std::size_t{1} << depth) - 1;
    if (nodes.size() != want)
      fail(errkind::structural, "BinaryPrefTree: " + std::to_string(nodes.size()) +
                                    " internal nodes, expected " + std::to_string(want) +
                                    " (every internal node must branch exactly two ways)");
    for (const auto& n : nodes) {
      if (n.a_w == n.a_l || n.a_w.empty() || n.a_l.empty())
        fail(errkind::structural, "BinaryPrefTree: node actions must be distinct and non-empty");
      if (n.v_w < 0 || n.v_w > 1 || n.v_l < 0 || n.v_l > 1)
        fail(errkind::param, "BinaryPrefTree: successor values must lie in [0,1]");
    }
  }

  // State (token prefix) at a heap index, following the path from the root.
  std::vector<int> state_of(std::size_t idx) const {
    if (idx == 0) return root_state;
    std::size_t parent = (idx - 1) / 2;
    std::vector<int> s = state_of(parent);
    const BinaryPrefNode& p = nodes[parent];
    const auto& a = (idx == 2 * parent + 1) ? p.a_w : p.a_l;
    s.insert(s.end(), a.begin(), a.end());
    return s;
  }
};

enum class EveryStepMode { exact, monte_carlo };

// L = E_{tau ~ pi_p_ref} [ - sum_t log pi_p_theta(a_w | s_t) ].  The summand
// takes the *winner* at every node the path visits, whichever branch the path
// itself follows - that literal algebra is what makes the offline gradient
// equal the online one.
inline LossValue every_step_loss(const Policy& policy, const Policy& ref,
                                 const BinaryPrefTree& tree, double beta,
                                 EveryStepMode mode = EveryStepMode::exact, long samples = 0,
                                 Rng* rng = nullptr) {
  tree.validate();
  if (beta <= 0.0) fail(errkind::param, "every_step_loss: beta must be positive");
  LossValue out;
  out.grad.assign(policy.dim(), 0.0);

  if (tree.depth == 0) return out;  // empty sum: zero loss, zero gradient

  // Per-node quantities are path-independent; precompute them once.
  const std::size_t n_internal = tree.nodes.size();
  std::vector<std::vector<int>> states(n_internal);
  vecd logp_w_theta(n_internal);  // log pi_p_theta(a_w | s)
  vecd p_w_ref(n_internal);       // pi_p_ref(a_w | s) = sigmoid(-(v_w - v_l))
  std::vector<vecd> grad_w(n_internal);
  for (std::size_t i = 0; i < n_internal; ++i) {
    states[i] = tree.state_of(i);
    const BinaryPrefNode& n = tree.nodes[i];
    grad_w[i].assign(policy.dim(), 0.0);
    logp_w_theta[i] = logp_pref_and_grad(policy, ref, states[i], n.a_w, n.a_l, n.v_w, n.v_l, beta,
                                         1.0, grad_w[i]);
    p_w_ref[i] = sigmoid(-(n.v_w - n.v_l));
  }

  auto path_nodes = [&](std::uint64_t bits) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(tree.depth));
    std::size_t cur = 0;
    for (int t = 0; t < tree.depth; ++t) {
      idx[static_cast<std::size_t>(t)] = cur;
      bool take_w = ((bits >> t) & 1) == 0;
      cur = take_w ? 2 * cur + 1 : 2 * cur + 2;
    }
    return idx;
  };
  auto path_prob_ref = [&](const std::vector<std::size_t>& idx, std::uint64_t bits) {
    double p = 1.0;
    for (int t = 0; t < tree.depth; ++t) {
      double pw = p_w_ref[idx[static_cast<std::size_t>(t)]];
      p *= ((bits >> t) & 1) == 0 ? pw : 1.0 - pw;
    }
    return p;
  };

  if (mode == EveryStepMode::exact) {
    const std::uint64_t n_paths = std::uint64_t{1} << tree.depth;
    out.pair_count = static_cast<long>(n_paths);
    for (std::uint64_t bits = 0; bits < n_paths; ++bits) {
      auto idx = path_nodes(bits);
      double w = path_prob_ref(idx, bits);
      for (std::size_t t : idx) {
        out.value -= w * logp_w_theta[t];
        axpy(-w, grad_w[t], out.grad);
      }
    }
  } else {
    if (samples < 1 || rng == nullptr)
      fail(errkind::param, "every_step_loss: Monte-Carlo mode needs samples >= 1 and an rng");
    out.pair_count = samples;
    const double inv = 1.0 / static_cast<double>(samples);
    for (long s = 0; s < samples; ++s) {
      std::size_t cur = 0;
      for (int t = 0; t < tree.depth; ++t) {
        out.value -= inv * logp_w_theta[cur];
        axpy(-inv, grad_w[cur], out.grad);
        bool take_w = rng->real() < p_w_ref[cur];
        cur = take_w ? 2 * cur + 1 : 2 * cur + 2;
      }
    }
  }
  return out;
}

}  // namespace sppd
