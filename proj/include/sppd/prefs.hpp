#pragma once
// Preference-set construction from scored step datasets.
//
// Sentence level: per question, the chosen trajectory tau+ is the *correct*
// trajectory whose worst step score is highest (max-min), and the rejected
// tau- is the *incorrect* trajectory whose worst step score is lowest
// (min-min).  Questions missing either class emit no pair, but a lone tau+
// still feeds SFT.  Ties break toward the lowest trajectory id.
//
// Step level: preference pairs live on tree siblings, so the common prefix
// s_t is structural rather than assumed.  Every unordered pair of children of
// an expanded node whose successor-state scores differ by more than `gap`
// yields one pair, higher score winning.  The two scores double as the value
// surrogates in the margin term of the step preference loss.

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/tree.hpp"

namespace sppd {

struct SentencePair {
  long question_id = 0;
  Trajectory chosen;    // correct by construction
  Trajectory rejected;  // incorrect by construction
};

struct SentenceSelection {
  std::vector<SentencePair> pairs;    // questions where both classes exist
  std::vector<Trajectory> sft_chosen; // tau+ of every question that has one
};

inline SentenceSelection select_sentence_pairs(const StepDataset& ds,
                                               const std::vector<Trajectory>& trajs) {
  // Worst (minimum) step score per trajectory, from the dataset.
  std::map<std::pair<long, int>, double> min_score;
  for (const auto& r : ds.records) {
    auto key = std::make_pair(r.question_id, r.traj_id);
    auto it = min_score.find(key);
    if (it == min_score.end())
      min_score.emplace(key, r.score);
    else
      it->second = std::min(it->second, r.score);
  }

  std::map<std::pair<long, int>, const Trajectory*> by_key;
  for (const auto& t : trajs) by_key[{t.question_id, t.traj_id}] = &t;

  // argmax over correct / argmin over incorrect, walking trajectory ids in
  // ascending order so the documented lowest-id tie-break is a strict `>` /
  // `<` comparison.
  struct Best {
    double score;
    const Trajectory* traj;
  };
  std::map<long, std::optional<Best>> best_pos, best_neg;
  for (const auto& [key, score] : min_score) {
    auto tit = by_key.find(key);
    if (tit == by_key.end())
      fail(errkind::data, "select_sentence_pairs: dataset references unknown trajectory (question " +
                              std::to_string(key.first) + ", id " + std::to_string(key.second) + ")");
    const Trajectory* t = tit->second;
    auto& slot = t->correct ? best_pos[key.first] : best_neg[key.first];
    if (!slot.has_value() || (t->correct ? score > slot->score : score < slot->score))
      slot = Best{score, t};
  }

  SentenceSelection out;
  for (const auto& [qid, pos] : best_pos) {
    if (!pos.has_value()) continue;
    out.sft_chosen.push_back(*pos->traj);
    auto nit = best_neg.find(qid);
    if (nit == best_neg.end() || !nit->second.has_value()) continue;
    SentencePair pair;
    pair.question_id = qid;
    pair.chosen = *pos->traj;
    pair.rejected = *nit->second->traj;
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Step-level sibling pairs.
// ---------------------------------------------------------------------------

struct StepPreferencePair {
  long question_id = 0;
  int node_id = 0;              // tree node holding the common prefix
  std::vector<int> state;      // s_t, full token prefix including the prompt
  std::vector<int> winner;     // a_w tokens
  std::vector<int> loser;      // a_l tokens
  double v_w = 0.0;            // score of the winner's successor state
  double v_l = 0.0;            // score of the loser's successor state
};

// Score lookup for successor states.  Built from a StepDataset and optionally
// extended with extra (state, score) entries so children whose subtrees never
// produced a complete trajectory can still be scored.
class StateScoreIndex {
public:
  static std::uint64_t key(const std::vector<int>& state) {
    std::uint64_t h = fnv1a("state-score");
    for (int t : state) h = fnv1a_pod(t, h);
    return h;
  }

  static StateScoreIndex from_dataset(const StepDataset& ds) {
    StateScoreIndex idx;
    for (const auto& r : ds.records) idx.table_[key(r.state)] = r.score;
    return idx;
  }

  void add(const std::vector<int>& state, double score) { table_[key(state)] = score; }

  std::optional<double> find(const std::vector<int>& state) const {
    auto it = table_.find(key(state));
    if (it == table_.end()) return std::nullopt;
    return it->second;
  }

private:
  std::unordered_map<std::uint64_t, double> table_;
};

struct PairConfig {
  double gap = 0.5;             // strict threshold on |v_w - v_l|
  long per_question_cap = 0;    // 0 = unlimited; first pairs in canonical order win

  void validate() const {
    if (gap < 0.0) fail(errkind::param, "PairConfig: gap must be >= 0");
    if (per_question_cap < 0) fail(errkind::param, "PairConfig: cap must be >= 0");
  }
};

// Canonical emission order is (node id, first-child index, second-child
// index); node ids follow creation order, so output is deterministic and
// sorted the way downstream files expect.
inline std::vector<StepPreferencePair> extract_step_pairs(const PrefixTree& tree,
                                                          const StateScoreIndex& scores,
                                                          const PairConfig& cfg = {}) {
  cfg.validate();
  std::vector<StepPreferencePair> out;
  long emitted = 0;
  for (std::size_t ni = 0; ni < tree.nodes.size(); ++ni) {
    const TreeNode& node = tree.nodes[ni];
    if (node.children.size() < 2) continue;
    std::vector<double> v(node.children.size());
    for (std::size_t c = 0; c < node.children.size(); ++c) {
      const TreeChild& ch = node.children[c];
      auto s = scores.find(tree.at(ch.node).state);
      if (!s.has_value())
        fail(errkind::data, "extract_step_pairs: no score for the successor of node " +
                                std::to_string(ni) + ", child " + std::to_string(c) +
                                " (question " + std::to_string(tree.question_id) + ")");
      v[c] = *s;
    }
    for (std::size_t i = 0; i < node.children.size(); ++i) {
      for (std::size_t j = i + 1; j < node.children.size(); ++j) {
        if (cfg.per_question_cap > 0 && emitted >= cfg.per_question_cap) return out;
        double vi = v[i], vj = v[j];
        if (std::abs(vi - vj) <= cfg.gap) continue;  // strict: equal scores never pair
        std::size_t w = vi > vj ? i : j;
        std::size_t l = vi > vj ? j : i;
        StepPreferencePair pair;
        pair.question_id = tree.question_id;
        pair.node_id = static_cast<int>(ni);
        pair.state = node.state;
        pair.winner = node.children[w].action;
        pair.loser = node.children[l].action;
        pair.v_w = v[w];
        pair.v_l = v[l];
        out.push_back(std::move(pair));
        ++emitted;
      }
    }
  }
  return out;
}

// Content key for cross-round deduplication of step pairs.
inline std::uint64_t pair_key(const StepPreferencePair& p) {
  std::uint64_t h = fnv1a("step-pair");
  h = fnv1a_pod(p.question_id, h);
  for (int t : p.state) h = fnv1a_pod(t, h);
  h = fnv1a_pod(int(-1), h);
  for (int t : p.winner) h = fnv1a_pod(t, h);
  h = fnv1a_pod(int(-2), h);
  for (int t : p.loser) h = fnv1a_pod(t, h);
  return h;
}

// Test/verify hook: every pair must name two distinct children of its node
// and carry their recorded successor scores in winning order.
inline void check_pair_invariants(const std::vector<StepPreferencePair>& pairs,
                                  const PrefixTree& tree, double gap) {
  for (const auto& p : pairs) {
    const TreeNode& node = tree.at(p.node_id);
    if (node.state != p.state)
      fail(errkind::data, "step pair: state does not match its node");
    bool w = false, l = false;
    for (const auto& c : node.children) {
      if (c.action == p.winner) w = true;
      if (c.action == p.loser) l = true;
    }
    if (!w || !l || p.winner == p.loser)
      fail(errkind::data, "step pair: actions are not distinct siblings");
    if (!(p.v_w - p.v_l > gap))
      fail(errkind::data, "step pair: score gap violates the threshold");
    if (p.v_w < 0 || p.v_w > 1 || p.v_l < 0 || p.v_l > 1)
      fail(errkind::data, "step pair: scores outside [0,1]");
  }
}

}  // namespace sppd
