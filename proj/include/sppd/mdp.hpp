#pragma once
// Finite step-MDPs with deterministic concatenation transitions, and the
// exact soft (KL-regularized) solution over them.
//
// The model: maximize expected reward plus beta-weighted entropy relative to
// a reference policy.  Its fixed point is
//
//   pi*(a|s) = pi_ref(a|s) * exp((Q*(s,a) - V*(s)) / beta)
//   Q*(s,a)  = r(s,a) + V*(s')                (s' = f(s,a), V* = 0 at terminals)
//   V*(s)    = beta * log sum_a pi_ref(a|s) * exp(Q*(s,a) / beta)
//
// Because transitions strictly extend the state (a DAG), one backward pass in
// reverse topological order computes everything exactly; a damped fixed-point
// iteration lives in the test suite as the independent oracle.
//
// reconstruct_reward inverts the fixed point:
//   beta * log(pi*/pi_ref) = Q*(s,a) - V*(s) = r(s,a) + V*(s') - V*(s)
//   =>  r(s,a) = beta * log(pi*/pi_ref) + V*(s) - V*(s').
// The recovered value must equal the stored reward to 1e-8 on every
// enumerable fixture; that identity is the first thing `verify` checks.

#include <deque>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sppd/common.hpp"

namespace sppd {

constexpr std::size_t max_mdp_states = 100000;  // keeps enumeration-based oracles exact and fast

struct MdpAction {
  std::string name;
  int succ = -1;
  double reward = 0.0;
  double ref_prob = 0.0;
};

struct MdpState {
  std::string id;
  bool terminal = false;
  std::vector<MdpAction> actions;
};

struct StepMdp {
  std::vector<MdpState> states;
  std::unordered_map<std::string, int> index;
  vecd rho0;  // initial distribution over states (non-roots hold 0)
  double beta = 1.0;

  int add_state(const std::string& id, bool terminal) {
    if (index.count(id)) fail(errkind::data, "StepMdp: duplicate state id '" + id + "'");
    index.emplace(id, static_cast<int>(states.size()));
    states.push_back({id, terminal, {}});
    rho0.push_back(0.0);
    return static_cast<int>(states.size()) - 1;
  }

  int state_of(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) fail(errkind::domain, "StepMdp: unknown state '" + id + "'");
    return it->second;
  }

  void add_edge(const std::string& from, const std::string& action, const std::string& to,
                double reward, double ref_prob) {
    MdpState& s = states[static_cast<std::size_t>(state_of(from))];
    if (s.terminal) fail(errkind::domain, "StepMdp: terminal state '" + from + "' cannot have actions");
    s.actions.push_back({action, state_of(to), reward, ref_prob});
  }

  // Deterministic transition f(s, a) = s|a: the successor of the named action.
  int transition(int s, const std::string& action) const {
    const MdpState& st = states[static_cast<std::size_t>(s)];
    if (st.terminal) fail(errkind::domain, "transition: state '" + st.id + "' is terminal");
    for (const auto& a : st.actions)
      if (a.name == action) return a.succ;
    fail(errkind::domain, "transition: no action '" + action + "' at state '" + st.id + "'");
  }

  // Kahn topological order; throws on cycles (states must strictly grow).
  std::vector<int> topo_order() const {
    std::vector<int> indeg(states.size(), 0);
    for (const auto& s : states)
      for (const auto& a : s.actions) ++indeg[static_cast<std::size_t>(a.succ)];
    std::deque<int> q;
    for (std::size_t i = 0; i < states.size(); ++i)
      if (indeg[i] == 0) q.push_back(static_cast<int>(i));
    std::vector<int> order;
    order.reserve(states.size());
    while (!q.empty()) {
      int s = q.front();
      q.pop_front();
      order.push_back(s);
      for (const auto& a : states[static_cast<std::size_t>(s)].actions)
        if (--indeg[static_cast<std::size_t>(a.succ)] == 0) q.push_back(a.succ);
    }
    if (order.size() != states.size())
      fail(errkind::structural, "StepMdp: transition graph contains a cycle");
    return order;
  }

  void validate() const {
    if (beta <= 0.0) fail(errkind::param, "StepMdp: beta must be positive");
    if (states.empty()) fail(errkind::param, "StepMdp: no states");
    if (states.size() > max_mdp_states)
      fail(errkind::param, "StepMdp: state count exceeds the enumerable cap of 100000");
    double rho = 0.0;
    for (double p : rho0) rho += p;
    if (std::abs(rho - 1.0) > 1e-12)
      fail(errkind::data, "StepMdp: initial distribution sums to " + fmt_g17(rho) + ", expected 1");
    for (const auto& s : states) {
      if (s.terminal) {
        if (!s.actions.empty())
          fail(errkind::data, "StepMdp: terminal state '" + s.id + "' has actions");
        continue;
      }
      if (s.actions.empty())
        fail(errkind::data, "StepMdp: non-terminal state '" + s.id + "' has no actions");
      double sum = 0.0;
      for (const auto& a : s.actions) {
        if (a.ref_prob < 0.0)
          fail(errkind::data, "StepMdp: negative reference probability at '" + s.id + "'");
        sum += a.ref_prob;
      }
      if (std::abs(sum - 1.0) > 1e-12)
        fail(errkind::data,
             "StepMdp: pi_ref at '" + s.id + "' sums to " + fmt_g17(sum) + ", expected 1");
    }
    topo_order();  // cycle check
  }
};

struct SoftSolution {
  vecd v_star;
  std::vector<vecd> q_star;
  std::vector<vecd> pi_star;
  // Actions with pi_ref = 0 are excluded from the partition sum and flagged
  // here rather than guessed around; pi*(a|s) is reported as 0 for them.
  std::vector<std::vector<char>> zero_mass;
};

inline SoftSolution solve_soft(const StepMdp& mdp) {
  mdp.validate();
  const double beta = mdp.beta;
  SoftSolution sol;
  sol.v_star.assign(mdp.states.size(), 0.0);
  sol.q_star.resize(mdp.states.size());
  sol.pi_star.resize(mdp.states.size());
  sol.zero_mass.resize(mdp.states.size());

  std::vector<int> order = mdp.topo_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const std::size_t s = static_cast<std::size_t>(*it);
    const MdpState& st = mdp.states[s];
    if (st.terminal) {
      sol.v_star[s] = 0.0;
      continue;
    }
    const std::size_t n = st.actions.size();
    sol.q_star[s].assign(n, 0.0);
    sol.pi_star[s].assign(n, 0.0);
    sol.zero_mass[s].assign(n, 0);
    vecd log_terms;
    log_terms.reserve(n);
    for (std::size_t a = 0; a < n; ++a) {
      const MdpAction& act = st.actions[a];
      double q = act.reward + sol.v_star[static_cast<std::size_t>(act.succ)];
      sol.q_star[s][a] = q;
      if (act.ref_prob > 0.0) {
        log_terms.push_back(std::log(act.ref_prob) + q / beta);
      } else {
        sol.zero_mass[s][a] = 1;
      }
    }
    if (log_terms.empty())
      fail(errkind::data, "solve_soft: state '" + st.id + "' has no reference-supported actions");
    double v = beta * log_sum_exp(log_terms);
    sol.v_star[s] = v;
    for (std::size_t a = 0; a < n; ++a) {
      if (sol.zero_mass[s][a]) continue;
      sol.pi_star[s][a] = st.actions[a].ref_prob * std::exp((sol.q_star[s][a] - v) / beta);
    }
  }
  return sol;
}

inline double reconstruct_reward(const StepMdp& mdp, const SoftSolution& sol, int s, int a) {
  const MdpState& st = mdp.states[static_cast<std::size_t>(s)];
  const MdpAction& act = st.actions[static_cast<std::size_t>(a)];
  if (act.ref_prob <= 0.0)
    fail(errkind::domain, "reconstruct_reward: pi_ref('" + act.name + "'|'" + st.id +
                              "') = 0 leaves the ratio undefined");
  double implicit =
      mdp.beta * std::log(sol.pi_star[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] /
                          act.ref_prob);
  return implicit + sol.v_star[static_cast<std::size_t>(s)] -
         sol.v_star[static_cast<std::size_t>(act.succ)];
}

// Potential-based shaping with Phi = V*: r_gamma = r + gamma*(V*(s') - V*(s)).
// Along any complete trajectory the shaping telescopes to -gamma*V*(s0), so
// per-question return differences are invariant for every gamma.
inline double shaped_reward(const StepMdp& mdp, const SoftSolution& sol, double gamma, int s, int a) {
  const MdpAction& act = mdp.states[static_cast<std::size_t>(s)].actions[static_cast<std::size_t>(a)];
  return act.reward + gamma * (sol.v_star[static_cast<std::size_t>(act.succ)] -
                               sol.v_star[static_cast<std::size_t>(s)]);
}

// ---------------------------------------------------------------------------
// Fixture text format, one state or edge per line:
//   beta <value>                  (optional, default 1)
//   rho0 <state> <prob>           (optional; default: point mass on first root)
//   <id> 1                        (terminal state)
//   <id> 0 <action> <succ> <reward> <ref-prob>
// States may appear before they are declared by an edge line; order of lines
// is free.  '#' starts a comment.
// ---------------------------------------------------------------------------

inline StepMdp parse_mdp(const std::string& text) {
  StepMdp mdp;
  struct Edge {
    std::string from, action, to;
    double reward, ref;
  };
  std::vector<Edge> edges;
  std::vector<std::pair<std::string, double>> rho;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto ensure_state = [&](const std::string& id, bool terminal, bool declare) {
    auto it = mdp.index.find(id);
    if (it == mdp.index.end()) {
      mdp.add_state(id, terminal);
    } else if (declare && terminal != mdp.states[static_cast<std::size_t>(it->second)].terminal) {
      fail(errkind::data, "mdp fixture: state '" + id + "' redeclared with a different terminal flag");
    }
  };
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    if (first == "beta") {
      if (!(ls >> mdp.beta)) fail(errkind::data, "mdp fixture: bad beta on line " + std::to_string(lineno));
      continue;
    }
    if (first == "rho0") {
      std::string id;
      double p;
      if (!(ls >> id >> p)) fail(errkind::data, "mdp fixture: bad rho0 on line " + std::to_string(lineno));
      rho.emplace_back(id, p);
      continue;
    }
    int terminal;
    if (!(ls >> terminal) || (terminal != 0 && terminal != 1))
      fail(errkind::data, "mdp fixture: bad terminal flag on line " + std::to_string(lineno));
    if (terminal == 1) {
      ensure_state(first, true, true);
      continue;
    }
    Edge e;
    e.from = first;
    if (!(ls >> e.action >> e.to >> e.reward >> e.ref))
      fail(errkind::data, "mdp fixture: bad edge on line " + std::to_string(lineno));
    ensure_state(e.from, false, true);
    edges.push_back(e);
  }
  for (const auto& e : edges) {
    ensure_state(e.to, false, false);  // may already exist; leaves declared flags alone
    mdp.add_edge(e.from, e.action, e.to, e.reward, e.ref);
  }
  if (rho.empty()) {
    // Default: point mass on the first state with no incoming edge.
    std::vector<int> indeg(mdp.states.size(), 0);
    for (const auto& s : mdp.states)
      for (const auto& a : s.actions) ++indeg[static_cast<std::size_t>(a.succ)];
    for (std::size_t i = 0; i < mdp.states.size(); ++i)
      if (indeg[i] == 0) {
        mdp.rho0[i] = 1.0;
        break;
      }
  } else {
    for (const auto& [id, p] : rho) mdp.rho0[static_cast<std::size_t>(mdp.state_of(id))] = p;
  }
  mdp.validate();
  return mdp;
}

inline std::string format_mdp(const StepMdp& mdp) {
  std::ostringstream out;
  out << "beta " << fmt_g17(mdp.beta) << "\n";
  for (std::size_t i = 0; i < mdp.states.size(); ++i)
    if (mdp.rho0[i] != 0.0) out << "rho0 " << mdp.states[i].id << " " << fmt_g17(mdp.rho0[i]) << "\n";
  for (const auto& s : mdp.states) {
    if (s.terminal) {
      out << s.id << " 1\n";
      continue;
    }
    for (const auto& a : s.actions)
      out << s.id << " 0 " << a.name << " " << mdp.states[static_cast<std::size_t>(a.succ)].id << " "
          << fmt_g17(a.reward) << " " << fmt_g17(a.ref_prob) << "\n";
  }
  return out.str();
}

}  // namespace sppd
