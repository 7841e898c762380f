#pragma once
// Numerical verifiers for the three results the trainer leans on:
//
//  1. Reward reconstruction.  The soft fixed point ties policy, reference and
//     value function together; reconstruct_reward must reproduce the stored
//     step rewards of any solved MDP to machine precision (verify_lemma1).
//
//  2. Offline/online gradient equivalence.  On a binary preference tree the
//     gradient of the every-step NLL under pi_p_ref equals the expectation,
//     under pi_p_theta, of an importance ratio times the winner score
//     function.  Change of measure makes the two path sums identical term by
//     term, so both sides are computed by exact enumeration and compared
//     coordinate-wise (verify_theorem2).  `RatioForm::statement` swaps the
//     ratio's numerator for the raw token-level reference probability of the
//     taken action - a deliberately wrong variant kept for comparison runs;
//     it does not cancel and is expected to fail the check.
//
//  3. Shaping invariance.  Adding gamma * (V*(succ) - V*(s)) to each reward
//     telescopes, so pairwise returns of trajectories sharing an initial
//     state are unchanged for any gamma (verify_telescope).
//
// Fixture builders live here too so the CLI `verify` command and the tests
// draw from the same seeded distributions.

#include <cstdint>
#include <string>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/losses.hpp"
#include "sppd/mdp.hpp"
#include "sppd/policy.hpp"
#include "sppd/rng.hpp"

namespace sppd {

// ---------------------------------------------------------------------------
// Gradient equivalence on binary preference trees.
// ---------------------------------------------------------------------------

enum class RatioForm { proof, statement };

struct GradientReport {
  vecd online;
  vecd offline;
  double max_abs_diff = 0.0;
  // max_abs_diff scaled by the larger gradient's infinity norm; this is the
  // quantity compared against the tolerance, so near-zero coordinates do not
  // blow up an otherwise machine-exact match.
  double rel_diff = 0.0;
  long path_count = 0;
  bool pass = false;
};

// -grad of every_step_loss: the offline side of the identity.
inline vecd offline_every_step_gradient(const Policy& policy, const Policy& ref,
                                        const BinaryPrefTree& tree, double beta) {
  LossValue lv = every_step_loss(policy, ref, tree, beta, EveryStepMode::exact);
  for (double& g : lv.grad) g = -g;
  return lv.grad;
}

// The online side: sum over all 2^T paths of
//   P_theta(tau) * ratio(tau) * sum_t grad log pi_p_theta(a_w | s_t).
// The score term always takes the winner at each visited node, independent of
// which branch the path follows; the ratio runs over the taken branches.
inline vecd online_policy_gradient(const Policy& policy, const Policy& ref,
                                   const BinaryPrefTree& tree, double beta,
                                   RatioForm form = RatioForm::proof) {
  tree.validate();
  if (beta <= 0.0) fail(errkind::param, "online_policy_gradient: beta must be positive");
  vecd out(policy.dim(), 0.0);
  if (tree.depth == 0) return out;

  const std::size_t n = tree.nodes.size();
  std::vector<vecd> grad_logp_w(n);
  vecd p_w_theta(n), p_w_ref(n);
  vecd ref_raw_w(n), ref_raw_l(n);  // token-level reference probs (statement form)
  for (std::size_t i = 0; i < n; ++i) {
    const BinaryPrefNode& nd = tree.nodes[i];
    std::vector<int> state = tree.state_of(i);
    double h = (policy.step_log_prob(state, nd.a_w).total - ref.step_log_prob(state, nd.a_w).total) -
               (policy.step_log_prob(state, nd.a_l).total - ref.step_log_prob(state, nd.a_l).total);
    double x = beta * h - (nd.v_w - nd.v_l);
    p_w_theta[i] = sigmoid(x);
    p_w_ref[i] = sigmoid(-(nd.v_w - nd.v_l));
    grad_logp_w[i].assign(policy.dim(), 0.0);
    double c = sigmoid(-x) * beta;
    policy.step_logp_and_grad(state, nd.a_w, c, grad_logp_w[i]);
    policy.step_logp_and_grad(state, nd.a_l, -c, grad_logp_w[i]);
    if (form == RatioForm::statement) {
      ref_raw_w[i] = std::exp(ref.step_log_prob(state, nd.a_w).total);
      ref_raw_l[i] = std::exp(ref.step_log_prob(state, nd.a_l).total);
    }
  }

  const std::uint64_t n_paths = std::uint64_t{1} << tree.depth;
  for (std::uint64_t bits = 0; bits < n_paths; ++bits) {
    double p_theta = 1.0, numer = 1.0;
    vecd score(policy.dim(), 0.0);
    std::size_t cur = 0;
    for (int t = 0; t < tree.depth; ++t) {
      bool take_w = ((bits >> t) & 1) == 0;
      double pt = take_w ? p_w_theta[cur] : 1.0 - p_w_theta[cur];
      if (pt <= 0.0)
        fail(errkind::numeric, "online_policy_gradient: pi_p_theta assigns zero probability to a "
                               "taken branch; the importance ratio is undefined");
      p_theta *= pt;
      numer *= form == RatioForm::proof ? (take_w ? p_w_ref[cur] : 1.0 - p_w_ref[cur])
                                        : (take_w ? ref_raw_w[cur] : ref_raw_l[cur]);
      axpy(1.0, grad_logp_w[cur], score);
      cur = take_w ? 2 * cur + 1 : 2 * cur + 2;
    }
    axpy(p_theta * (numer / p_theta), score, out);
  }
  return out;
}

inline GradientReport verify_theorem2(const Policy& policy, const Policy& ref,
                                      const BinaryPrefTree& tree, double beta, double tol = 1e-8,
                                      RatioForm form = RatioForm::proof) {
  GradientReport rep;
  rep.online = online_policy_gradient(policy, ref, tree, beta, form);
  rep.offline = offline_every_step_gradient(policy, ref, tree, beta);
  rep.path_count = static_cast<long>(std::uint64_t{1} << tree.depth);
  double scale = 0.0;
  for (std::size_t i = 0; i < rep.online.size(); ++i) {
    rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(rep.online[i] - rep.offline[i]));
    scale = std::max({scale, std::abs(rep.online[i]), std::abs(rep.offline[i])});
  }
  rep.rel_diff = scale > 0.0 ? rep.max_abs_diff / scale : rep.max_abs_diff;
  rep.pass = rep.rel_diff <= tol;
  return rep;
}

// ---------------------------------------------------------------------------
// Reward reconstruction and shaping invariance on step MDPs.
// ---------------------------------------------------------------------------

struct ResidualReport {
  double max_residual = 0.0;
  long checked = 0;
  bool pass = false;
};

// Max |reconstruct_reward - stored reward| over all supported transitions.
// Zero-mass actions (pi_ref = 0) are skipped: the log-ratio behind the
// reconstruction is undefined there, and solve_soft already flags them.
inline ResidualReport verify_lemma1(const StepMdp& mdp, double tol = 1e-8) {
  SoftSolution sol = solve_soft(mdp);
  ResidualReport rep;
  for (std::size_t s = 0; s < mdp.states.size(); ++s) {
    const MdpState& st = mdp.states[s];
    for (std::size_t a = 0; a < st.actions.size(); ++a) {
      if (sol.zero_mass[s][a]) continue;
      double r = reconstruct_reward(mdp, sol, static_cast<int>(s), static_cast<int>(a));
      rep.max_residual = std::max(rep.max_residual, std::abs(r - st.actions[a].reward));
      ++rep.checked;
    }
  }
  if (rep.checked == 0) fail(errkind::data, "verify_lemma1: no supported transitions to check");
  rep.pass = rep.max_residual <= tol;
  return rep;
}

// All root-to-terminal action paths, as (state, action-index) lists.
inline std::vector<std::vector<std::pair<int, int>>> enumerate_paths(const StepMdp& mdp,
                                                                     int root) {
  std::vector<std::vector<std::pair<int, int>>> out;
  std::vector<std::pair<int, int>> cur;
  auto dfs = [&](auto&& self, int s) -> void {
    if (mdp.states[static_cast<std::size_t>(s)].terminal) {
      out.push_back(cur);
      return;
    }
    const auto& acts = mdp.states[static_cast<std::size_t>(s)].actions;
    for (std::size_t a = 0; a < acts.size(); ++a) {
      cur.emplace_back(s, static_cast<int>(a));
      self(self, acts[a].succ);
      cur.pop_back();
    }
  };
  dfs(dfs, root);
  return out;
}

// For every gamma and every pair of trajectories sharing a root, the shaped
// return difference must equal the raw return difference: the shaping terms
// telescope to gamma * (V*(terminal) - V*(root)) and cancel in the pair.
inline ResidualReport verify_telescope(const StepMdp& mdp, const std::vector<double>& gammas,
                                       double tol = 1e-10) {
  SoftSolution sol = solve_soft(mdp);
  ResidualReport rep;
  for (std::size_t root = 0; root < mdp.states.size(); ++root) {
    if (mdp.rho0[root] <= 0.0) continue;
    auto paths = enumerate_paths(mdp, static_cast<int>(root));
    auto ret = [&](const std::vector<std::pair<int, int>>& p, double gamma) {
      double r = 0.0;
      for (auto [s, a] : p) r += shaped_reward(mdp, sol, gamma, s, a);
      return r;
    };
    for (double gamma : gammas) {
      std::vector<double> raw(paths.size()), shaped(paths.size());
      for (std::size_t i = 0; i < paths.size(); ++i) {
        raw[i] = ret(paths[i], 0.0);
        shaped[i] = ret(paths[i], gamma);
      }
      for (std::size_t i = 0; i < paths.size(); ++i)
        for (std::size_t j = i + 1; j < paths.size(); ++j) {
          double resid = std::abs((shaped[i] - shaped[j]) - (raw[i] - raw[j]));
          rep.max_residual = std::max(rep.max_residual, resid);
          ++rep.checked;
        }
    }
  }
  if (rep.checked == 0)
    fail(errkind::data, "verify_telescope: need a root with at least two trajectories");
  rep.pass = rep.max_residual <= tol;
  return rep;
}

// Per-pair agreement between the preference loss at unit margin coefficient
// and the negative log of the decoding probability: softplus(-(beta*h - dv))
// must equal -log sigmoid(beta*h - dv).  This is the degenerate-preference
// NLL consistency check behind the decoding rule.
inline ResidualReport verify_decode_nll(const Policy& policy, const Policy& ref,
                                        const std::vector<StepPreferencePair>& pairs, double beta,
                                        double tol = 1e-12) {
  if (pairs.empty()) fail(errkind::param, "verify_decode_nll: empty batch");
  ResidualReport rep;
  for (const auto& p : pairs) {
    std::vector<StepPreferencePair> one{p};
    double loss = step_dpo_loss(policy, ref, one, beta, 1.0, MarginMode::dynamic).value;
    double nll = -std::log(pref_decode_prob(policy, ref, p.state, p.winner, p.loser, p.v_w, p.v_l,
                                            beta));
    rep.max_residual = std::max(rep.max_residual, std::abs(loss - nll));
    ++rep.checked;
  }
  rep.pass = rep.max_residual <= tol;
  return rep;
}

// ---------------------------------------------------------------------------
// Seeded fixture builders, shared by `verify` and the test suite.
// ---------------------------------------------------------------------------

// Random layered DAG: `levels` non-terminal layers of `width` states each,
// then one terminal layer.  Every state gets 2..3 actions into the next
// layer with rewards in [-1, 1]; reference probabilities are normalized and,
// when allow_zero_mass is set, occasionally zeroed to exercise the excluded-
// action path.
inline StepMdp fixture_mdp(std::uint64_t seed, int levels, int width, double beta,
                           bool allow_zero_mass = false) {
  if (levels < 1 || width < 1) fail(errkind::param, "fixture_mdp: levels and width must be >= 1");
  Rng rng(derive_seed(seed, fnv1a("fixture-mdp")));
  StepMdp mdp;
  mdp.beta = beta;
  auto name = [](int l, int w) { return "s" + std::to_string(l) + "_" + std::to_string(w); };
  for (int l = 0; l <= levels; ++l)
    for (int w = 0; w < width; ++w) mdp.add_state(name(l, w), l == levels);
  mdp.rho0.assign(mdp.states.size(), 0.0);
  mdp.rho0[0] = 1.0;
  for (int l = 0; l < levels; ++l)
    for (int w = 0; w < width; ++w) {
      int n_act = 2 + static_cast<int>(rng.bounded(2));
      vecd probs(static_cast<std::size_t>(n_act));
      double sum = 0.0;
      for (double& p : probs) {
        p = 0.05 + rng.real();
        sum += p;
      }
      if (allow_zero_mass && n_act == 3 && rng.bounded(3) == 0) {
        sum -= probs[2];
        probs[2] = 0.0;
      }
      for (int a = 0; a < n_act; ++a) {
        int succ = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(width)));
        mdp.add_edge(name(l, w), "a" + std::to_string(a), name(l + 1, succ),
                     2.0 * rng.real() - 1.0, probs[static_cast<std::size_t>(a)] / sum);
      }
    }
  mdp.validate();
  return mdp;
}

// Random complete binary preference tree over single-digit actions.  Sibling
// actions are distinct by construction; margins are uniform in [0, 1].
inline BinaryPrefTree fixture_tree(std::uint64_t seed, int depth, const TokenVocab& vocab) {
  if (depth < 0 || depth > 6) fail(errkind::param, "fixture_tree: depth must lie in [0, 6]");
  Rng rng(derive_seed(seed, fnv1a("fixture-tree")));
  BinaryPrefTree tree;
  tree.depth = depth;
  tree.root_state = {0, static_cast<int>(rng.bounded(static_cast<std::uint64_t>(vocab.modulus)))};
  std::size_t n = (std::size_t{1} << depth) - 1;
  for (std::size_t i = 0; i < n; ++i) {
    BinaryPrefNode node;
    int w = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(vocab.modulus)));
    int l = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(vocab.modulus - 1)));
    if (l >= w) ++l;  // distinct sibling tokens
    node.a_w = {w};
    node.a_l = {l};
    node.v_w = rng.real();
    node.v_l = rng.real();
    tree.nodes.push_back(std::move(node));
  }
  tree.validate();
  return tree;
}

// Tabular policy whose context table covers every internal state of a tree,
// with Gaussian logits.  Unseen prefixes fall back to a shared block, which
// the gradient identity must tolerate (it holds for any parameterization).
inline TabularPolicy fixture_tree_policy(std::uint64_t seed, const BinaryPrefTree& tree,
                                         const TokenVocab& vocab, double scale = 1.0) {
  std::vector<std::vector<int>> contexts;
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) contexts.push_back(tree.state_of(i));
  TabularPolicy pol(vocab, contexts);
  Rng rng(derive_seed(seed, fnv1a("fixture-tree-policy")));
  vecd& th = pol.theta_mut();
  for (double& t : th) t = scale * rng.normal();
  return pol;
}

}  // namespace sppd
