#pragma once
// Artifact files.  Everything a run writes is plain line-delimited text or
// CSV so two runs can be diffed with standard tools; the only binary format
// is the policy checkpoint (policy.hpp).  Token sequences are stored as
// vocabulary symbol names, not integer ids, which keeps the files readable
// and ties them to the modulus via round-tripping.
//
// Formats (one record per line unless noted):
//   problems.txt   <id> <modulus> <start> <gold> (<op> <operand>)*
//   trajs.txt      <qid> <tid> <correct> : <suffix tokens>
//   dstep.txt      <qid> <tid> <step#> <score> <correct> : <state tokens>
//   sentence_pairs.txt  <qid> <chosen tid> <rejected tid> : <chosen> | <rejected>
//   step_pairs.txt  blocks of six "key: value" lines -
//                   question / prefix / chosen / chosen_score /
//                   rejected / rejected_score - preceded by a "# q <id>
//                   node <id>" comment and separated by blank lines.
//   *.csv          comma-separated with a header row
//
// File writes go through a temp file + rename so a crashed run never leaves
// a half-written artifact behind.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/prefs.hpp"
#include "sppd/toy.hpp"
#include "sppd/tree.hpp"
#include "sppd/vocab.hpp"

namespace sppd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Raw file helpers.
// ---------------------------------------------------------------------------

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(errkind::data, "cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(errkind::data, "cannot open '" + tmp.string() + "' for writing");
    out << content;
    if (!out) fail(errkind::data, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(errkind::data, "cannot move '" + tmp.string() + "' into place: " + ec.message());
}

inline std::uint64_t hash_file(const fs::path& path) { return fnv1a(read_file(path)); }

// ---------------------------------------------------------------------------
// Token rendering.
// ---------------------------------------------------------------------------

inline std::string render_tokens(const TokenVocab& v, const std::vector<int>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += v.name(toks[i]);
  }
  return out;
}

inline std::vector<int> parse_tokens(const TokenVocab& v, const std::string& text) {
  std::istringstream ss(text);
  std::vector<int> out;
  std::string sym;
  while (ss >> sym) out.push_back(v.from_name(sym));
  return out;
}

// ---------------------------------------------------------------------------
// Problems.
// ---------------------------------------------------------------------------

inline std::string format_problems(const std::vector<ToyProblem>& problems) {
  std::ostringstream out;
  out << "# problems v1: id modulus start gold (op operand)*\n";
  for (const auto& p : problems) {
    TokenVocab v(p.modulus);
    out << p.id << ' ' << p.modulus << ' ' << p.start << ' ' << p.gold;
    for (auto [op, operand] : p.ops) out << ' ' << v.name(op) << ' ' << operand;
    out << '\n';
  }
  return out.str();
}

inline std::vector<ToyProblem> parse_problems(const std::string& text) {
  std::vector<ToyProblem> out;
  std::istringstream lines(text);
  std::string line;
  long lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ToyProblem p;
    if (!(ss >> p.id >> p.modulus >> p.start >> p.gold))
      fail(errkind::data, "problems line " + std::to_string(lineno) + ": malformed header fields");
    TokenVocab v(p.modulus);
    std::string op;
    int operand;
    while (ss >> op >> operand) p.ops.emplace_back(v.from_name(op), operand);
    if (!ss.eof())
      fail(errkind::data, "problems line " + std::to_string(lineno) + ": dangling op without operand");
    if (p.ops.empty())
      fail(errkind::data, "problems line " + std::to_string(lineno) + ": no operations");
    p.prompt = render_prompt(v, p.start, p.ops);
    int val = evaluate(v, p.start, p.ops);
    if (val != p.gold)
      fail(errkind::data, "problems line " + std::to_string(lineno) + ": gold " +
                              std::to_string(p.gold) + " disagrees with evaluation " +
                              std::to_string(val));
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectories and the step dataset.
// ---------------------------------------------------------------------------

inline std::string format_trajectories(const TokenVocab& v, const std::vector<Trajectory>& trajs) {
  std::ostringstream out;
  out << "# trajectories v1: qid tid correct : suffix-tokens\n";
  for (const auto& t : trajs)
    out << t.question_id << ' ' << t.traj_id << ' ' << (t.correct ? 1 : 0) << " : "
        << render_tokens(v, t.tokens) << '\n';
  return out.str();
}

inline std::vector<Trajectory> parse_trajectories(const TokenVocab& v, const std::string& text) {
  std::vector<Trajectory> out;
  std::istringstream lines(text);
  std::string line;
  long lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto colon = line.find(" : ");
    if (colon == std::string::npos)
      fail(errkind::data, "trajectories line " + std::to_string(lineno) + ": missing ' : '");
    std::istringstream head(line.substr(0, colon));
    Trajectory t;
    int correct;
    if (!(head >> t.question_id >> t.traj_id >> correct))
      fail(errkind::data, "trajectories line " + std::to_string(lineno) + ": malformed fields");
    t.correct = correct != 0;
    t.tokens = parse_tokens(v, line.substr(colon + 3));
    // Re-split the suffix into steps at the separators so downstream
    // consumers see the same step boundaries the sampler produced.
    std::vector<int> step;
    for (int tok : t.tokens) {
      step.push_back(tok);
      if (tok == v.sep() || tok == v.end()) {
        t.steps.push_back(step);
        step.clear();
      }
    }
    if (!step.empty()) t.steps.push_back(step);
    out.push_back(std::move(t));
  }
  return out;
}

inline std::string format_dstep(const TokenVocab& v, const StepDataset& ds) {
  std::ostringstream out;
  out << "# dstep v1: qid tid step score correct : state-tokens\n";
  for (const auto& r : ds.records)
    out << r.question_id << ' ' << r.traj_id << ' ' << r.step_index << ' ' << fmt_g17(r.score)
        << ' ' << (r.correct ? 1 : 0) << " : " << render_tokens(v, r.state) << '\n';
  return out.str();
}

inline StepDataset parse_dstep(const TokenVocab& v, const std::string& text) {
  StepDataset ds;
  std::istringstream lines(text);
  std::string line;
  long lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto colon = line.find(" : ");
    if (colon == std::string::npos)
      fail(errkind::data, "dstep line " + std::to_string(lineno) + ": missing ' : '");
    std::istringstream head(line.substr(0, colon));
    StepRecord r;
    int correct;
    if (!(head >> r.question_id >> r.traj_id >> r.step_index >> r.score >> correct))
      fail(errkind::data, "dstep line " + std::to_string(lineno) + ": malformed fields");
    r.correct = correct != 0;
    r.state = parse_tokens(v, line.substr(colon + 3));
    ds.records.push_back(std::move(r));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Sentence pairs.
// ---------------------------------------------------------------------------

inline std::string format_sentence_pairs(const TokenVocab& v,
                                         const std::vector<SentencePair>& pairs) {
  std::ostringstream out;
  out << "# sentence-pairs v1: qid chosen-tid rejected-tid : chosen | rejected\n";
  for (const auto& p : pairs)
    out << p.question_id << ' ' << p.chosen.traj_id << ' ' << p.rejected.traj_id << " : "
        << render_tokens(v, p.chosen.tokens) << " | " << render_tokens(v, p.rejected.tokens)
        << '\n';
  return out.str();
}

inline std::vector<SentencePair> parse_sentence_pairs(const TokenVocab& v,
                                                      const std::string& text) {
  std::vector<SentencePair> out;
  std::istringstream lines(text);
  std::string line;
  long lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto colon = line.find(" : ");
    auto bar = line.find(" | ", colon == std::string::npos ? 0 : colon);
    if (colon == std::string::npos || bar == std::string::npos)
      fail(errkind::data, "sentence-pairs line " + std::to_string(lineno) + ": malformed record");
    std::istringstream head(line.substr(0, colon));
    SentencePair p;
    if (!(head >> p.question_id >> p.chosen.traj_id >> p.rejected.traj_id))
      fail(errkind::data, "sentence-pairs line " + std::to_string(lineno) + ": malformed ids");
    p.chosen.question_id = p.rejected.question_id = p.question_id;
    p.chosen.correct = true;
    p.chosen.tokens = parse_tokens(v, line.substr(colon + 3, bar - colon - 3));
    p.rejected.tokens = parse_tokens(v, line.substr(bar + 3));
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Step preference pairs: six-field blocks.
// ---------------------------------------------------------------------------

inline std::string format_step_pairs(const TokenVocab& v,
                                     const std::vector<StepPreferencePair>& pairs,
                                     const std::vector<ToyProblem>& problems) {
  // question text is looked up by id for the human-readable first field
  std::ostringstream out;
  out << "# step-pairs v1\n";
  for (const auto& p : pairs) {
    const ToyProblem* prob = nullptr;
    for (const auto& q : problems)
      if (q.id == p.question_id) prob = &q;
    if (!prob)
      fail(errkind::data,
           "format_step_pairs: pair references unknown question " + std::to_string(p.question_id));
    out << "\n# q " << p.question_id << " node " << p.node_id << '\n';
    out << "question: " << render_tokens(v, prob->prompt) << '\n';
    out << "prefix: " << render_tokens(v, p.state) << '\n';
    out << "chosen: " << render_tokens(v, p.winner) << '\n';
    out << "chosen_score: " << fmt_g17(p.v_w) << '\n';
    out << "rejected: " << render_tokens(v, p.loser) << '\n';
    out << "rejected_score: " << fmt_g17(p.v_l) << '\n';
  }
  return out.str();
}

inline std::vector<StepPreferencePair> parse_step_pairs(const TokenVocab& v,
                                                        const std::string& text) {
  std::vector<StepPreferencePair> out;
  std::istringstream lines(text);
  std::string line;
  long lineno = 0;
  StepPreferencePair cur;
  int fields = 0;
  bool has_ids = false;
  auto flush = [&](long at) {
    if (fields == 0) return;
    if (fields != 6)
      fail(errkind::data, "step-pairs: incomplete block ending near line " + std::to_string(at));
    out.push_back(cur);
    cur = StepPreferencePair{};
    fields = 0;
    has_ids = false;
  };
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) {
      flush(lineno);
      continue;
    }
    if (line.rfind("# q ", 0) == 0) {
      flush(lineno);
      std::istringstream ss(line.substr(4));
      std::string nodeword;
      if (!(ss >> cur.question_id >> nodeword >> cur.node_id) || nodeword != "node")
        fail(errkind::data, "step-pairs line " + std::to_string(lineno) + ": malformed id comment");
      has_ids = true;
      continue;
    }
    if (line[0] == '#') continue;
    auto colon = line.find(": ");
    if (colon == std::string::npos)
      fail(errkind::data, "step-pairs line " + std::to_string(lineno) + ": expected 'key: value'");
    std::string key = line.substr(0, colon);
    std::string val = line.substr(colon + 2);
    if (key == "question") {
      // informational; the prefix field already contains the prompt
    } else if (key == "prefix") {
      cur.state = parse_tokens(v, val);
    } else if (key == "chosen") {
      cur.winner = parse_tokens(v, val);
    } else if (key == "rejected") {
      cur.loser = parse_tokens(v, val);
    } else if (key == "chosen_score") {
      cur.v_w = std::stod(val);
    } else if (key == "rejected_score") {
      cur.v_l = std::stod(val);
    } else {
      fail(errkind::data, "step-pairs line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    ++fields;
    if (!has_ids)
      fail(errkind::data, "step-pairs line " + std::to_string(lineno) + ": block missing id comment");
  }
  flush(lineno + 1);
  return out;
}

// ---------------------------------------------------------------------------
// CSV snippets.
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string mode;
  int n = 1;
  double accuracy = 0.0;
  long count = 0;
};

inline std::string eval_report_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream out;
  out << "mode,N,accuracy,count\n";
  for (const auto& r : rows)
    out << r.mode << ',' << r.n << ',' << fmt_g17(r.accuracy) << ',' << r.count << '\n';
  return out.str();
}

struct TrainLogRow {
  std::string stage;
  int epoch = 0;
  long step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::ostringstream out;
  out << "stage,epoch,step,loss,grad_norm,lr\n";
  for (const auto& r : rows)
    out << r.stage << ',' << r.epoch << ',' << r.step << ',' << fmt_g17(r.loss) << ','
        << fmt_g17(r.grad_norm) << ',' << fmt_g17(r.lr) << '\n';
  return out.str();
}

}  // namespace sppd
