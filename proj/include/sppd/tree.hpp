#pragma once
// Tree-based self-sampling.
//
// Per question we grow a prefix tree of reasoning steps by K root-to-leaf
// passes: each pass walks from the root, expanding a node on first visit into
// up to C distinct sampled steps, then descending by sampling a child in
// proportion to a normalized score distribution over the children's mean
// token log-probabilities.  After the K passes, *every* distinct complete
// root-to-terminal path in the tree is collected - not just the K walked ones
// - so sibling subtrees share their common prefix exactly, which is what
// makes step-level preference pairs well-defined later.
//
// The sampling policy is frozen for the whole build (pi_infer = pi_ref); all
// scores are computed against it once, at expansion time.

#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/policy.hpp"
#include "sppd/rng.hpp"
#include "sppd/toy.hpp"

namespace sppd {

struct TreeChild {
  std::vector<int> action;  // the step's tokens
  int node = -1;
  double score = 0.0;  // mean token log-probability under the sampling policy
};

struct TreeNode {
  std::vector<int> state;  // full token prefix including the prompt
  int parent = -1;
  int depth = 0;  // steps taken from the root
  bool terminal = false;
  bool truncated = false;  // overlong step or max-depth cutoff; never collected
  bool expanded = false;
  int visits = 0;
  std::vector<TreeChild> children;
};

struct PrefixTree {
  long question_id = 0;
  std::vector<TreeNode> nodes;
  int root = 0;

  TreeNode& at(int i) { return nodes[static_cast<std::size_t>(i)]; }
  const TreeNode& at(int i) const { return nodes[static_cast<std::size_t>(i)]; }
};

struct Trajectory {
  long question_id = 0;
  int traj_id = 0;
  std::vector<std::vector<int>> steps;
  std::vector<int> tokens;  // concatenation of steps (the suffix after the prompt)
  bool correct = false;
};

enum class ScoreNorm { softmax, minmax };

struct TreeConfig {
  int passes = 64;       // K
  int branch = 2;        // C
  int max_depth = 12;    // step budget per path
  double temperature = 1.0;
  ScoreNorm norm = ScoreNorm::softmax;

  void validate() const {
    if (passes < 1) fail(errkind::param, "TreeConfig: passes (K) must be >= 1");
    if (branch < 1) fail(errkind::param, "TreeConfig: branch (C) must be >= 1");
    if (max_depth < 1) fail(errkind::param, "TreeConfig: max_depth must be >= 1");
    if (temperature <= 0.0) fail(errkind::param, "TreeConfig: temperature must be positive");
  }
};

inline double child_score(const Policy& policy, const std::vector<int>& state,
                          const std::vector<int>& action) {
  StepLogProb lp = policy.step_log_prob(state, action);
  return lp.total / lp.token_count;
}

// Selection weights over an expanded node's children. Softmax over
// score/temperature is the default reading of "normalize the score
// distribution"; min-max renormalization is kept behind the switch for
// ablation (note it assigns the worst child weight zero).
inline vecd selection_weights(const TreeNode& node, double temperature, ScoreNorm norm) {
  if (!node.expanded || node.children.empty())
    fail(errkind::state, "select_child: node has not been expanded");
  vecd w(node.children.size());
  if (norm == ScoreNorm::softmax) {
    double mx = node.children[0].score;
    for (const auto& c : node.children) mx = std::max(mx, c.score);
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] = std::exp((node.children[i].score - mx) / temperature);
  } else {
    double mn = node.children[0].score, mx = node.children[0].score;
    for (const auto& c : node.children) {
      mn = std::min(mn, c.score);
      mx = std::max(mx, c.score);
    }
    if (mx - mn <= 0.0) {
      for (auto& x : w) x = 1.0;  // all scores equal: uniform
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = (node.children[i].score - mn) / (mx - mn);
    }
  }
  return w;
}

inline int select_child(const TreeNode& node, double temperature, ScoreNorm norm, Rng& rng) {
  vecd w = selection_weights(node, temperature, norm);
  return static_cast<int>(rng.pick(w));
}

// Expand a node into up to C distinct sampled steps.  Duplicates collapse;
// after the initial C draws, up to 4 extra single draws try to refill to C
// distinct actions, then the node accepts however many it has.
inline void expand(PrefixTree& tree, int node_idx, const Policy& policy, int C, Rng& rng) {
  TreeNode& node = tree.at(node_idx);
  if (node.terminal) fail(errkind::state, "expand: node is terminal");
  if (node.expanded) fail(errkind::state, "expand: node already expanded");
  node.expanded = true;

  std::vector<std::pair<std::vector<int>, bool>> actions;  // (tokens, truncated)
  std::unordered_set<std::string> seen;
  auto try_add = [&](const StepSample& s) {
    std::string key(s.tokens.size(), '\0');
    for (std::size_t i = 0; i < s.tokens.size(); ++i) key[i] = static_cast<char>(s.tokens[i] + 1);
    if (seen.insert(key).second) actions.emplace_back(s.tokens, s.truncated);
  };
  for (int i = 0; i < C; ++i) try_add(policy.sample_step(node.state, rng));
  for (int retry = 0; retry < 4 && static_cast<int>(actions.size()) < C; ++retry)
    try_add(policy.sample_step(node.state, rng));
  if (actions.empty())
    fail(errkind::state, "expand: degenerate node, no distinct actions after retries");

  const TokenVocab& v = policy.vocab();
  for (auto& [toks, trunc] : actions) {
    TreeNode child;
    child.state = tree.at(node_idx).state;
    child.state.insert(child.state.end(), toks.begin(), toks.end());
    child.parent = node_idx;
    child.depth = tree.at(node_idx).depth + 1;
    child.terminal = !trunc && toks.back() == v.end();
    child.truncated = trunc;
    int ci = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(std::move(child));
    double sc = child_score(policy, tree.at(node_idx).state, toks);
    tree.at(node_idx).children.push_back({toks, ci, sc});
  }
}

// K selection passes, then exhaustive collection of complete paths.
// (seed, question, policy) fully determine the result.
inline std::pair<PrefixTree, std::vector<Trajectory>> run_tree(const ToyProblem& problem,
                                                               const Policy& policy,
                                                               const TreeConfig& cfg, Rng& rng) {
  cfg.validate();
  PrefixTree tree;
  tree.question_id = problem.id;
  TreeNode root;
  root.state = problem.prompt;
  tree.nodes.push_back(std::move(root));

  for (int pass = 0; pass < cfg.passes; ++pass) {
    int cur = tree.root;
    while (true) {
      TreeNode& node = tree.at(cur);
      ++node.visits;
      if (node.terminal || node.truncated) break;
      if (node.depth >= cfg.max_depth) {
        node.truncated = true;  // path exceeded the step budget; never collected
        break;
      }
      if (!node.expanded) expand(tree, cur, policy, cfg.branch, rng);
      int c = select_child(tree.at(cur), cfg.temperature, cfg.norm, rng);
      cur = tree.at(cur).children[static_cast<std::size_t>(c)].node;
    }
  }

  // Depth-first collection in child-creation order; trajectory ids follow
  // that order, which later tie-breaks lean on.
  std::vector<Trajectory> out;
  std::unordered_set<std::string> dedup;
  const TokenVocab& v = policy.vocab();
  std::vector<std::vector<int>> step_stack;
  std::function<void(int)> walk = [&](int idx) {
    const TreeNode& node = tree.at(idx);
    if (node.terminal) {
      Trajectory t;
      t.question_id = problem.id;
      t.traj_id = static_cast<int>(out.size());
      t.steps = step_stack;
      for (const auto& s : step_stack) t.tokens.insert(t.tokens.end(), s.begin(), s.end());
      std::string key(t.tokens.size(), '\0');
      for (std::size_t i = 0; i < t.tokens.size(); ++i) key[i] = static_cast<char>(t.tokens[i] + 1);
      if (!dedup.insert(key).second) return;
      t.correct = check_answer(v, problem, t.tokens);
      out.push_back(std::move(t));
      return;
    }
    for (const auto& c : node.children) {
      step_stack.push_back(c.action);
      walk(c.node);
      step_stack.pop_back();
    }
  };
  walk(tree.root);
  return {std::move(tree), std::move(out)};
}

// ---------------------------------------------------------------------------
// Step dataset: one scored record per (trajectory, step).
// ---------------------------------------------------------------------------

struct StepRecord {
  long question_id = 0;
  int traj_id = 0;
  int step_index = 0;       // 1-based, contiguous within a trajectory
  std::vector<int> state;   // prompt + steps[0..step_index-1]
  double score = 0.0;
  bool correct = false;
};

struct StepDataset {
  std::vector<StepRecord> records;
};

// Scorer: double(const ToyProblem&, const std::vector<int>& suffix) where
// suffix is the trajectory's tokens after the prompt.  A scorer exception is
// wrapped with the (question, trajectory, step) coordinates and aborts the
// batch - silent partial datasets are worse than a loud failure.
template <class Scorer>
StepDataset score_dataset(const ToyProblem& problem, const std::vector<Trajectory>& trajs,
                          Scorer&& score) {
  StepDataset ds;
  for (const auto& t : trajs) {
    std::vector<int> suffix;
    int step_index = 0;
    for (const auto& s : t.steps) {
      suffix.insert(suffix.end(), s.begin(), s.end());
      ++step_index;
      StepRecord rec;
      rec.question_id = problem.id;
      rec.traj_id = t.traj_id;
      rec.step_index = step_index;
      rec.state = problem.prompt;
      rec.state.insert(rec.state.end(), suffix.begin(), suffix.end());
      try {
        rec.score = score(problem, suffix);
      } catch (const std::exception& e) {
        fail(errkind::data, "score_dataset: scorer failed at question " +
                                std::to_string(problem.id) + ", trajectory " +
                                std::to_string(t.traj_id) + ", step " + std::to_string(step_index) +
                                ": " + e.what());
      }
      if (rec.score < 0.0 || rec.score > 1.0 || !std::isfinite(rec.score))
        fail(errkind::data, "score_dataset: score outside [0,1] at question " +
                                std::to_string(problem.id) + ", trajectory " +
                                std::to_string(t.traj_id) + ", step " + std::to_string(step_index));
      rec.correct = t.correct;
      ds.records.push_back(std::move(rec));
    }
  }
  return ds;
}

}  // namespace sppd
