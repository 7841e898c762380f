#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "sppd/tree.hpp"

using namespace sppd;

namespace {

// Tabular policy whose support at each listed context is exactly the given
// token set: every allowed token is pinned at the +30 clamp, so off-script
// tokens carry ~e^-30 relative mass and the allowed ones are equally likely.
TabularPolicy scripted_policy(const TokenVocab& v,
                              const std::vector<std::pair<std::vector<int>, std::vector<int>>>& script) {
  std::vector<std::vector<int>> ctxs;
  for (const auto& [ctx, _] : script) ctxs.push_back(ctx);
  TabularPolicy p(v, ctxs);
  for (const auto& [ctx, toks] : script)
    for (int t : toks) p.theta_mut()[p.block_of(ctx) + std::size_t(t)] = logit_clamp;
  return p;
}

// The standing fixture: prompt `1 + 2 |` (gold 3) with a two-way fork at the
// first step and a two-way answer fork on the correct branch:
//   step 1: `3 |` or `0 |`
//   after `3 |`: `ans 3 end` (correct) or `ans 1 end`
//   after `0 |`: `ans 0 end`
struct Fixture {
  TokenVocab v{5};
  ToyProblem p;
  TabularPolicy policy;

  Fixture() : policy(make_policy(v, make_problem(v))) { p = make_problem(v); }

  static ToyProblem make_problem(const TokenVocab& v) {
    ToyProblem p;
    p.id = 42;
    p.modulus = 5;
    p.start = 1;
    p.ops = {{v.op_add(), 2}};
    p.gold = 3;
    p.prompt = render_prompt(v, p.start, p.ops);
    return p;
  }

  static TabularPolicy make_policy(const TokenVocab& v, const ToyProblem& p) {
    auto cat = [](std::vector<int> a, const std::vector<int>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    std::vector<int> s3 = cat(p.prompt, {3, v.sep()});
    std::vector<int> s0 = cat(p.prompt, {0, v.sep()});
    return scripted_policy(
        v, {
               {p.prompt, {3, 0}},
               {cat(p.prompt, {3}), {v.sep()}},
               {cat(p.prompt, {0}), {v.sep()}},
               {s3, {v.ans()}},
               {cat(s3, {v.ans()}), {3, 1}},
               {cat(s3, {v.ans(), 3}), {v.end()}},
               {cat(s3, {v.ans(), 1}), {v.end()}},
               {s0, {v.ans()}},
               {cat(s0, {v.ans()}), {0}},
               {cat(s0, {v.ans(), 0}), {v.end()}},
           });
  }
};

TreeConfig small_cfg() {
  TreeConfig cfg;
  cfg.passes = 32;
  cfg.branch = 6;
  cfg.max_depth = 12;
  return cfg;
}

}  // namespace

TEST_CASE("child_score is the mean token log-probability") {
  Fixture f;
  std::vector<int> action{3, f.v.sep()};
  StepLogProb lp = f.policy.step_log_prob(f.p.prompt, action);
  CHECK(child_score(f.policy, f.p.prompt, action) ==
        doctest::Approx(lp.total / 2.0).epsilon(1e-15));
}

TEST_CASE("selection_weights normalize scores per the configured rule") {
  TreeNode node;
  node.expanded = true;
  node.children = {{{}, 1, -1.0}, {{}, 2, -2.0}, {{}, 3, -1.5}};

  // Softmax: weights are exp((score - max)/T); the best child gets weight 1.
  vecd w = selection_weights(node, 1.0, ScoreNorm::softmax);
  CHECK(w[0] == doctest::Approx(1.0));
  CHECK(w[1] == doctest::Approx(std::exp(-1.0)));
  CHECK(w[2] == doctest::Approx(std::exp(-0.5)));
  // Temperature flattens: T=2 halves the exponents.
  vecd wt = selection_weights(node, 2.0, ScoreNorm::softmax);
  CHECK(wt[1] == doctest::Approx(std::exp(-0.5)));

  // Min-max: affine to [0,1]; the worst child gets exactly zero.
  vecd m = selection_weights(node, 1.0, ScoreNorm::minmax);
  CHECK(m[0] == doctest::Approx(1.0));
  CHECK(m[1] == 0.0);
  CHECK(m[2] == doctest::Approx(0.5));

  // All-equal scores degrade to uniform instead of 0/0.
  node.children[1].score = node.children[2].score = -1.0;
  vecd u = selection_weights(node, 1.0, ScoreNorm::minmax);
  CHECK(u == vecd{1.0, 1.0, 1.0});

  TreeNode fresh;
  try {
    selection_weights(fresh, 1.0, ScoreNorm::softmax);
    FAIL("unexpanded node accepted");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::state);
  }
}

TEST_CASE("expand produces distinct children with inherited state") {
  Fixture f;
  PrefixTree tree;
  tree.question_id = f.p.id;
  TreeNode root;
  root.state = f.p.prompt;
  tree.nodes.push_back(root);

  Rng rng(3);
  expand(tree, 0, f.policy, 6, rng);
  const TreeNode& r = tree.at(0);
  CHECK(r.expanded);
  // Only two distinct steps exist at the root; 6 draws + retries collapse.
  REQUIRE(r.children.size() == 2);
  std::set<std::vector<int>> acts;
  for (const auto& c : r.children) {
    acts.insert(c.action);
    const TreeNode& ch = tree.at(c.node);
    CHECK(ch.parent == 0);
    CHECK(ch.depth == 1);
    CHECK_FALSE(ch.terminal);  // steps end with `|`, not `end`
    std::vector<int> expect = f.p.prompt;
    expect.insert(expect.end(), c.action.begin(), c.action.end());
    CHECK(ch.state == expect);
    CHECK(c.score == doctest::Approx(child_score(f.policy, f.p.prompt, c.action)));
  }
  CHECK(acts == std::set<std::vector<int>>{{3, f.v.sep()}, {0, f.v.sep()}});

  CHECK_THROWS_AS(expand(tree, 0, f.policy, 6, rng), error);  // re-expansion

  // Terminal children are flagged when the step ends with `end`.
  int s3 = -1;
  for (const auto& c : r.children)
    if (c.action[0] == 3) s3 = c.node;
  expand(tree, s3, f.policy, 6, rng);
  for (const auto& c : tree.at(s3).children) {
    CHECK(tree.at(c.node).terminal);
    CHECK(c.action.back() == f.v.end());
  }
  CHECK_THROWS_AS(expand(tree, tree.at(s3).children[0].node, f.policy, 6, rng), error);
}

TEST_CASE("run_tree collects every distinct complete path exactly once") {
  Fixture f;
  Rng rng(11);
  auto [tree, trajs] = run_tree(f.p, f.policy, small_cfg(), rng);

  // Exhaustive collection: all three script paths, not just walked ones.
  REQUIRE(trajs.size() == 3);
  std::map<std::string, bool> rendered;  // suffix text -> correct flag
  for (const auto& t : trajs) rendered[f.v.render(t.tokens)] = t.correct;
  REQUIRE(rendered.count("3 | ans 3 end"));
  REQUIRE(rendered.count("3 | ans 1 end"));
  REQUIRE(rendered.count("0 | ans 0 end"));
  CHECK(rendered["3 | ans 3 end"]);        // gold = 3
  CHECK_FALSE(rendered["3 | ans 1 end"]);
  CHECK_FALSE(rendered["0 | ans 0 end"]);

  for (const auto& t : trajs) {
    CHECK(t.question_id == f.p.id);
    // tokens is exactly the step concatenation.
    std::vector<int> cat;
    for (const auto& s : t.steps) cat.insert(cat.end(), s.begin(), s.end());
    CHECK(t.tokens == cat);
    CHECK(t.correct == check_answer(f.v, f.p, t.tokens));
  }
  // Ids are the DFS collection order: 0, 1, 2 with no gaps.
  for (std::size_t i = 0; i < trajs.size(); ++i) CHECK(trajs[i].traj_id == int(i));

  // An independent walk over the returned tree must find the same path set.
  std::set<std::string> walked;
  std::vector<int> stack;
  std::function<void(int)> dfs = [&](int idx) {
    const TreeNode& n = tree.at(idx);
    if (n.terminal) {
      walked.insert(f.v.render(stack));
      return;
    }
    for (const auto& c : n.children) {
      std::size_t before = stack.size();
      stack.insert(stack.end(), c.action.begin(), c.action.end());
      dfs(c.node);
      stack.resize(before);
    }
  };
  dfs(tree.root);
  std::set<std::string> collected;
  for (const auto& [k, _] : rendered) collected.insert(k);
  CHECK(walked == collected);

  CHECK(tree.at(tree.root).visits == small_cfg().passes);
}

TEST_CASE("run_tree is deterministic in (seed, question, policy)") {
  Fixture f;
  Rng r1(7), r2(7), r3(8);
  auto [t1, a] = run_tree(f.p, f.policy, small_cfg(), r1);
  auto [t2, b] = run_tree(f.p, f.policy, small_cfg(), r2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(a[i].traj_id == b[i].traj_id);
  }
  REQUIRE(t1.nodes.size() == t2.nodes.size());
  for (std::size_t i = 0; i < t1.nodes.size(); ++i)
    CHECK(t1.nodes[i].visits == t2.nodes[i].visits);

  // A different seed may reorder expansion; the collected path *set* is the
  // same because the script's support is exhausted either way.
  auto [t3, c] = run_tree(f.p, f.policy, small_cfg(), r3);
  std::set<std::string> sa, sc;
  for (const auto& t : a) sa.insert(f.v.render(t.tokens));
  for (const auto& t : c) sc.insert(f.v.render(t.tokens));
  CHECK(sa == sc);
}

TEST_CASE("max_depth truncates instead of collecting partial paths") {
  Fixture f;
  TreeConfig cfg = small_cfg();
  cfg.max_depth = 1;  // answer steps live at depth 2: nothing can complete
  Rng rng(5);
  auto [tree, trajs] = run_tree(f.p, f.policy, cfg, rng);
  CHECK(trajs.empty());
  bool saw_truncated = false;
  for (const auto& n : tree.nodes) saw_truncated = saw_truncated || n.truncated;
  CHECK(saw_truncated);
}

TEST_CASE("TreeConfig rejects out-of-range knobs") {
  auto expect_param = [](TreeConfig cfg) {
    try {
      cfg.validate();
      FAIL("bad config accepted");
    } catch (const error& e) {
      CHECK(e.kind() == errkind::param);
    }
  };
  TreeConfig cfg;
  cfg.passes = 0;
  expect_param(cfg);
  cfg = TreeConfig{};
  cfg.branch = 0;
  expect_param(cfg);
  cfg = TreeConfig{};
  cfg.max_depth = 0;
  expect_param(cfg);
  cfg = TreeConfig{};
  cfg.temperature = 0.0;
  expect_param(cfg);
}

TEST_CASE("score_dataset emits one record per step with full coordinates") {
  Fixture f;
  Rng rng(11);
  auto [tree, trajs] = run_tree(f.p, f.policy, small_cfg(), rng);
  REQUIRE(trajs.size() == 3);

  auto ds = score_dataset(f.p, trajs, [](const ToyProblem&, const std::vector<int>& suffix) {
    return double(suffix.size()) / 100.0;
  });
  // Every trajectory here is 2 steps long.
  REQUIRE(ds.records.size() == 6);
  for (const auto& rec : ds.records) {
    CHECK(rec.question_id == f.p.id);
    const Trajectory& t = trajs[std::size_t(rec.traj_id)];
    REQUIRE(rec.step_index >= 1);
    REQUIRE(rec.step_index <= int(t.steps.size()));
    // state = prompt + steps[0..step_index)
    std::vector<int> expect = f.p.prompt;
    for (int s = 0; s < rec.step_index; ++s)
      expect.insert(expect.end(), t.steps[std::size_t(s)].begin(), t.steps[std::size_t(s)].end());
    CHECK(rec.state == expect);
    CHECK(rec.score == double(expect.size() - f.p.prompt.size()) / 100.0);
    CHECK(rec.correct == t.correct);
  }
  // step_index is 1-based and contiguous per trajectory.
  std::map<int, std::vector<int>> by_traj;
  for (const auto& rec : ds.records) by_traj[rec.traj_id].push_back(rec.step_index);
  for (auto& [_, idxs] : by_traj) {
    std::sort(idxs.begin(), idxs.end());
    CHECK(idxs == std::vector<int>{1, 2});
  }
}

TEST_CASE("score_dataset wraps scorer failures with coordinates") {
  Fixture f;
  Rng rng(11);
  auto [tree, trajs] = run_tree(f.p, f.policy, small_cfg(), rng);

  try {
    score_dataset(f.p, trajs, [](const ToyProblem&, const std::vector<int>&) -> double {
      throw std::runtime_error("scorer exploded");
    });
    FAIL("scorer exception swallowed");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::data);
    std::string msg = e.what();
    CHECK(msg.find("question 42") != std::string::npos);
    CHECK(msg.find("scorer exploded") != std::string::npos);
  }

  // Out-of-range and non-finite scores are data errors, not silent records.
  CHECK_THROWS_AS(
      score_dataset(f.p, trajs, [](const ToyProblem&, const std::vector<int>&) { return 1.5; }),
      error);
  CHECK_THROWS_AS(score_dataset(f.p, trajs,
                                [](const ToyProblem&, const std::vector<int>&) {
                                  return std::numeric_limits<double>::quiet_NaN();
                                }),
                  error);
}
