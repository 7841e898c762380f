#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sppd/equiv.hpp"
#include "sppd/mdp.hpp"

using namespace sppd;

namespace {

// Independent oracle: damped Jacobi iteration of the soft Bellman fixed point
//   V(s) <- (1-d) V(s) + d * beta * log sum_a pi_ref(a|s) exp((r + V(s'))/beta)
// run until the update stalls.  No topological order, no single backward pass
// - nothing shared with solve_soft except the equation itself.
vecd iterate_v_star(const StepMdp& mdp, double damping = 0.5) {
  vecd v(mdp.states.size(), 0.0);
  for (int iter = 0; iter < 200000; ++iter) {
    double moved = 0.0;
    vecd next = v;
    for (std::size_t s = 0; s < mdp.states.size(); ++s) {
      const MdpState& st = mdp.states[s];
      if (st.terminal) {
        next[s] = 0.0;
        continue;
      }
      vecd terms;
      for (const auto& a : st.actions)
        if (a.ref_prob > 0.0)
          terms.push_back(std::log(a.ref_prob) +
                          (a.reward + v[static_cast<std::size_t>(a.succ)]) / mdp.beta);
      double target = mdp.beta * log_sum_exp(terms);
      next[s] = (1.0 - damping) * v[s] + damping * target;
      moved = std::max(moved, std::abs(next[s] - v[s]));
    }
    v = std::move(next);
    if (moved < 1e-14) break;
  }
  return v;
}

void check_solution_against_iteration(const StepMdp& mdp, double tol = 1e-10) {
  SoftSolution sol = solve_soft(mdp);
  vecd v = iterate_v_star(mdp);
  for (std::size_t s = 0; s < mdp.states.size(); ++s) {
    REQUIRE(std::abs(sol.v_star[s] - v[s]) <= tol);
    const MdpState& st = mdp.states[s];
    if (st.terminal) continue;
    double mass = 0.0;
    for (std::size_t a = 0; a < st.actions.size(); ++a) {
      const MdpAction& act = st.actions[a];
      REQUIRE(std::abs(sol.q_star[s][a] -
                       (act.reward + v[static_cast<std::size_t>(act.succ)])) <= tol);
      if (act.ref_prob > 0.0) {
        double pi = act.ref_prob * std::exp((sol.q_star[s][a] - v[s]) / mdp.beta);
        REQUIRE(std::abs(sol.pi_star[s][a] - pi) <= tol);
      } else {
        REQUIRE(sol.pi_star[s][a] == 0.0);
        REQUIRE(sol.zero_mass[s][a] == 1);
      }
      mass += sol.pi_star[s][a];
    }
    // V* is the partition function: the induced policy is exactly normalized.
    REQUIRE(std::abs(mass - 1.0) <= tol);
  }
}

// Two-level chain: root with rewards (1, 0), each middle state branching to
// terminals; uniform reference everywhere.
StepMdp chain_mdp(double beta) {
  StepMdp m;
  m.beta = beta;
  m.add_state("Q", false);
  m.add_state("Q|a", false);
  m.add_state("Q|b", false);
  m.add_state("Q|a|x", true);
  m.add_state("Q|a|y", true);
  m.add_state("Q|b|x", true);
  m.add_state("Q|b|y", true);
  m.add_edge("Q", "a", "Q|a", 1.0, 0.5);
  m.add_edge("Q", "b", "Q|b", 0.0, 0.5);
  m.add_edge("Q|a", "x", "Q|a|x", 0.5, 0.5);
  m.add_edge("Q|a", "y", "Q|a|y", -0.5, 0.5);
  m.add_edge("Q|b", "x", "Q|b|x", 0.25, 0.5);
  m.add_edge("Q|b", "y", "Q|b|y", 0.0, 0.5);
  m.rho0[0] = 1.0;
  return m;
}

}  // namespace

TEST_CASE("solve_soft matches the damped fixed-point iterator on the chain") {
  for (double beta : {0.1, 1.0, 10.0}) check_solution_against_iteration(chain_mdp(beta));
}

TEST_CASE("solve_soft matches the iterator on random DAG fixtures") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    StepMdp m = fixture_mdp(seed, 2 + int(seed % 3), 2 + int(seed % 2), 0.5 + 0.25 * double(seed),
                            /*allow_zero_mass=*/seed % 2 == 0);
    check_solution_against_iteration(m);
  }
}

TEST_CASE("soft solution degenerate spot values") {
  // Two zero-reward actions under a uniform reference: symmetry forces a
  // uniform optimum and V* = log(0.5 e^0 + 0.5 e^0) = 0.
  StepMdp m;
  m.add_state("s", false);
  m.add_state("t", true);
  m.add_edge("s", "a", "t", 0.0, 0.5);
  m.add_edge("s", "b", "t", 0.0, 0.5);
  m.rho0[0] = 1.0;
  SoftSolution sol = solve_soft(m);
  CHECK(sol.v_star[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(sol.pi_star[0][0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(sol.pi_star[0][1] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(sol.v_star[1] == 0.0);  // terminal

  // A terminal-only MDP is all zeros.
  StepMdp t;
  t.add_state("t", true);
  t.rho0[0] = 1.0;
  CHECK(solve_soft(t).v_star[0] == 0.0);

  // Determinism: a second solve is bit-identical.
  SoftSolution again = solve_soft(m);
  CHECK(again.v_star == sol.v_star);
  CHECK(again.pi_star[0] == sol.pi_star[0]);
}

TEST_CASE("reconstruct_reward recovers the stored reward everywhere") {
  for (double beta : {0.1, 1.0, 10.0}) {
    StepMdp m = chain_mdp(beta);
    SoftSolution sol = solve_soft(m);
    for (std::size_t s = 0; s < m.states.size(); ++s)
      for (std::size_t a = 0; a < m.states[s].actions.size(); ++a)
        REQUIRE(std::abs(reconstruct_reward(m, sol, int(s), int(a)) -
                         m.states[s].actions[a].reward) <= 1e-8);
  }

  // pi* == pi_ref with flat values: both terms vanish identically.
  StepMdp flat;
  flat.add_state("s", false);
  flat.add_state("t", true);
  flat.add_edge("s", "a", "t", 0.0, 0.5);
  flat.add_edge("s", "b", "t", 0.0, 0.5);
  flat.rho0[0] = 1.0;
  SoftSolution fsol = solve_soft(flat);
  CHECK(reconstruct_reward(flat, fsol, 0, 0) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("zero reference mass is excluded, flagged, and guarded") {
  StepMdp m;
  m.add_state("s", false);
  m.add_state("t", true);
  m.add_edge("s", "a", "t", 2.0, 1.0);
  m.add_edge("s", "dead", "t", 100.0, 0.0);  // unreachable under pi_ref
  m.rho0[0] = 1.0;
  SoftSolution sol = solve_soft(m);
  // The huge dead reward must not leak into the partition sum.
  CHECK(sol.v_star[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(sol.zero_mass[0][1] == 1);
  CHECK(sol.pi_star[0][1] == 0.0);
  CHECK(sol.pi_star[0][0] == doctest::Approx(1.0).epsilon(1e-12));

  try {
    reconstruct_reward(m, sol, 0, 1);
    FAIL("zero-mass ratio accepted");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::domain);
  }

  // A state whose entire action set has zero mass cannot be solved.
  StepMdp dead;
  dead.add_state("s", false);
  dead.add_state("t", true);
  dead.add_edge("s", "a", "t", 0.0, 0.0);
  dead.rho0[0] = 1.0;
  // validate() rejects it first: pi_ref sums to 0, not 1.
  CHECK_THROWS_AS(solve_soft(dead), error);
}

TEST_CASE("shaped_reward shapes by the value gain and telescopes") {
  StepMdp m = chain_mdp(1.0);
  SoftSolution sol = solve_soft(m);

  for (std::size_t s = 0; s < m.states.size(); ++s)
    for (std::size_t a = 0; a < m.states[s].actions.size(); ++a) {
      // gamma = 0 switches shaping off exactly.
      REQUIRE(shaped_reward(m, sol, 0.0, int(s), int(a)) == m.states[s].actions[a].reward);
      const MdpAction& act = m.states[s].actions[a];
      double gain = sol.v_star[std::size_t(act.succ)] - sol.v_star[s];
      REQUIRE(shaped_reward(m, sol, 2.0, int(s), int(a)) ==
              doctest::Approx(act.reward + 2.0 * gain).epsilon(1e-14));
    }

  // Worked number: reward 1.0 and a value gain of 0.25 under gamma = 2 shape
  // to 1.0 + 2 * 0.25 = 1.5.  A positive gain along a rewarding edge needs
  // that edge to carry little reference mass (otherwise V*(s) already absorbs
  // the reward); the sibling reward c is solved so the gain lands exactly on
  // 0.25:  V*(s) = log(0.05 e^{1+V(m)} + 0.95 e^c) = V*(m) - 0.25.
  StepMdp w;
  w.beta = 1.0;
  w.add_state("s", false);
  w.add_state("m", false);
  w.add_state("t", true);
  double c = std::log((std::exp(-0.5) - 0.05 * std::exp(0.75)) / 0.95);
  w.add_edge("s", "a", "m", 1.0, 0.05);
  w.add_edge("s", "b", "t", c, 0.95);
  w.add_edge("m", "x", "t", -0.25, 1.0);
  w.rho0[0] = 1.0;
  SoftSolution ws = solve_soft(w);
  REQUIRE(ws.v_star[1] - ws.v_star[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(shaped_reward(w, ws, 2.0, 0, 0) == doctest::Approx(1.5).epsilon(1e-12));

  // Telescoping: for two complete root-to-terminal trajectories, shaped and
  // raw return differences agree for every gamma (terminal V* = 0, shared s0).
  auto ret = [&](double gamma, const std::vector<std::pair<int, int>>& traj) {
    double r = 0.0;
    for (auto [s, a] : traj) r += shaped_reward(m, sol, gamma, s, a);
    return r;
  };
  std::vector<std::pair<int, int>> t1{{0, 0}, {1, 0}};  // Q -a-> Q|a -x->
  std::vector<std::pair<int, int>> t2{{0, 1}, {2, 1}};  // Q -b-> Q|b -y->
  double raw = ret(0.0, t1) - ret(0.0, t2);
  for (double gamma : {0.0, 0.1, 1.0, 5.0})
    CHECK(std::abs((ret(gamma, t1) - ret(gamma, t2)) - raw) <= 1e-10);
}

TEST_CASE("StepMdp structure is validated") {
  StepMdp m = chain_mdp(1.0);
  CHECK_NOTHROW(m.validate());
  CHECK(m.transition(0, "a") == 1);
  CHECK_THROWS_AS(m.transition(0, "zz"), error);
  CHECK_THROWS_AS(m.transition(3, "a"), error);  // terminal
  CHECK_THROWS_AS(m.state_of("nope"), error);
  CHECK_THROWS_AS(m.add_state("Q", false), error);        // duplicate id
  CHECK_THROWS_AS(m.add_edge("Q|a|x", "a", "Q", 0, 1), error);  // edge out of terminal

  StepMdp beta_bad = chain_mdp(1.0);
  beta_bad.beta = 0.0;
  try {
    beta_bad.validate();
    FAIL("beta 0 accepted");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::param);
  }

  StepMdp rho_bad = chain_mdp(1.0);
  rho_bad.rho0[0] = 0.25;
  CHECK_THROWS_AS(rho_bad.validate(), error);

  StepMdp ref_bad = chain_mdp(1.0);
  ref_bad.states[0].actions[0].ref_prob = 0.75;  // sums to 1.25
  CHECK_THROWS_AS(ref_bad.validate(), error);

  StepMdp neg_ref = chain_mdp(1.0);
  neg_ref.states[0].actions[0].ref_prob = -0.5;
  CHECK_THROWS_AS(neg_ref.validate(), error);

  // A cycle violates the states-strictly-grow contract.
  StepMdp cyc;
  cyc.add_state("a", false);
  cyc.add_state("b", false);
  cyc.add_edge("a", "x", "b", 0.0, 1.0);
  cyc.add_edge("b", "x", "a", 0.0, 1.0);
  cyc.rho0[0] = 1.0;
  try {
    cyc.validate();
    FAIL("cycle accepted");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::structural);
  }

  // Non-terminal leaf.
  StepMdp leaf;
  leaf.add_state("a", false);
  leaf.rho0[0] = 1.0;
  CHECK_THROWS_AS(leaf.validate(), error);
}

TEST_CASE("mdp text fixtures parse, solve, and round-trip") {
  std::string text =
      "# two-level fixture\n"
      "beta 0.5\n"
      "Q 0 a Q|a 1 0.5\n"
      "Q 0 b Q|b 0 0.5   # root edges\n"
      "Q|a 0 x T1 0.5 1\n"
      "Q|b 0 x T2 -0.25 1\n"
      "T1 1\n"
      "T2 1\n";
  StepMdp m = parse_mdp(text);
  CHECK(m.beta == 0.5);
  CHECK(m.states.size() == 5);
  // Default initial distribution: point mass on the first root.
  CHECK(m.rho0[std::size_t(m.state_of("Q"))] == 1.0);
  check_solution_against_iteration(m);

  // format -> parse -> format is a fixed point.
  std::string once = format_mdp(m);
  CHECK(format_mdp(parse_mdp(once)) == once);

  // Explicit rho0 lines survive the round trip.
  std::string split =
      "rho0 A 0.25\nrho0 B 0.75\n"
      "A 0 x T 1 1\n"
      "B 0 x T 2 1\n"
      "T 1\n";
  StepMdp s = parse_mdp(split);
  CHECK(s.rho0[std::size_t(s.state_of("B"))] == 0.75);
  CHECK(format_mdp(parse_mdp(format_mdp(s))) == format_mdp(s));
}

TEST_CASE("mdp parser rejects malformed fixtures with data errors") {
  auto expect_data = [](const std::string& text) {
    try {
      parse_mdp(text);
      FAIL("malformed fixture accepted: ", text);
    } catch (const error& e) {
      CHECK(e.kind() == errkind::data);
    }
  };
  expect_data("Q 2\n");                       // bad terminal flag
  expect_data("beta zero\nQ 1\n");            // unparsable beta
  expect_data("Q 0 a\n");                     // incomplete edge
  expect_data("rho0 Q\nQ 1\n");               // incomplete rho0
  expect_data("Q 1\nQ 0 a T 0 1\nT 1\n");     // terminal redeclared as non-terminal
  expect_data("Q 0 a T 0 0.5\nT 1\n");        // ref mass sums to 0.5
  expect_data("rho0 Q 0.5\nQ 0 a T 0 1\nT 1\n");  // rho0 sums to 0.5
}

TEST_CASE("state count cap keeps enumeration honest") {
  StepMdp m;
  m.add_state("t", true);
  for (std::size_t i = 0; i + 1 < max_mdp_states + 1; ++i) {
    m.add_state("s" + std::to_string(i), false);
    m.add_edge("s" + std::to_string(i), "a", "t", 0.0, 1.0);
  }
  m.rho0[1] = 1.0;
  REQUIRE(m.states.size() == max_mdp_states + 1);
  try {
    m.validate();
    FAIL("oversized MDP accepted");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::param);
  }
}
