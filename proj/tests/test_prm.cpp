#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "sppd/prm.hpp"

using namespace sppd;

namespace {

// Independent oracle for success_prob: enumerate all binary outcome strings
// of the uniform rollout ((L-k) corruption bits plus one answer bit) and
// count the ones landing on gold.  Forward simulation, no memoization -
// nothing shared with the scorer's recursion.
double brute_success_prob(const TokenVocab& v, const ToyProblem& p, int value, int k) {
  int bits = p.length() - k + 1;
  long total = 1L << bits;
  long hits = 0;
  for (long mask = 0; mask < total; ++mask) {
    int val = value;
    for (int j = k; j < p.length(); ++j) {
      val = apply_op(v, p.ops[std::size_t(j)].first, p.ops[std::size_t(j)].second, val);
      if ((mask >> (j - k)) & 1) val = (val + 1) % p.modulus;
    }
    int ans = ((mask >> (p.length() - k)) & 1) ? (val + 1) % p.modulus : val;
    hits += ans == p.gold;
  }
  return double(hits) / double(total);
}

ToyProblem make_problem(const TokenVocab& v, int start, std::vector<std::pair<int, int>> ops,
                        long id = 1) {
  ToyProblem p;
  p.id = id;
  p.modulus = v.modulus;
  p.start = start;
  p.ops = std::move(ops);
  p.gold = evaluate(v, p.start, p.ops);
  p.prompt = render_prompt(v, p.start, p.ops);
  return p;
}

}  // namespace

TEST_CASE("success_prob matches brute-force outcome enumeration") {
  TokenVocab v(7);
  OraclePrm prm(v);
  Rng rng(19);
  for (int trial = 0; trial < 40; ++trial) {
    int L = 2 + int(rng.bounded(3));
    std::vector<std::pair<int, int>> ops;
    int op_set[3] = {v.op_add(), v.op_sub(), v.op_mul()};
    for (int i = 0; i < L; ++i)
      ops.emplace_back(op_set[rng.bounded(3)], int(rng.bounded(7)));
    ToyProblem p = make_problem(v, int(rng.bounded(7)), ops);
    for (int k = 0; k <= L; ++k)
      for (int value = 0; value < 7; ++value)
        REQUIRE(prm.success_prob(p, value, k) ==
                doctest::Approx(brute_success_prob(v, p, value, k)).epsilon(1e-15));
  }
}

TEST_CASE("a depth-2 uniform tree with one gold leaf scores 0.25 at the root") {
  // L = 1: one corruption bit and one answer bit span four equally likely
  // leaves; start 0 with `+1` reaches gold only on the faithful/faithful leaf.
  TokenVocab v(5);
  ToyProblem p = make_problem(v, 0, {{v.op_add(), 1}});
  REQUIRE(p.gold == 1);
  OraclePrm prm(v);
  CHECK(prm.success_prob(p, 0, 0) == 0.25);
  CHECK(prm.score_value(p, {}) == 0.25);  // empty suffix = the root state
}

TEST_CASE("terminal suffixes score exactly 1 or 0") {
  TokenVocab v(7);
  OraclePrm prm(v);
  ToyProblem p = make_problem(v, 3, {{v.op_add(), 5}, {v.op_mul(), 4}});  // gold 4
  REQUIRE(p.gold == 4);

  CHECK(prm.score_value(p, {1, v.sep(), 4, v.sep(), v.ans(), 4, v.end()}) == 1.0);
  CHECK(prm.score_value(p, {v.ans(), 4, v.end()}) == 1.0);  // shortcut answer still gold
  CHECK(prm.score_value(p, {1, v.sep(), v.ans(), 5, v.end()}) == 0.0);
  CHECK(prm.score_value(p, {v.ans(), v.sep(), v.end()}) == 0.0);  // malformed tail
}

TEST_CASE("non-terminal suffixes are scored from their claimed state") {
  TokenVocab v(7);
  OraclePrm prm(v);
  ToyProblem p = make_problem(v, 3, {{v.op_add(), 5}, {v.op_mul(), 4}});

  // The claims define the state, faithful or not: score follows the last
  // claim and the number of claims, nothing else.
  CHECK(prm.score_value(p, {1, v.sep()}) == prm.success_prob(p, 1, 1));
  CHECK(prm.score_value(p, {6, v.sep()}) == prm.success_prob(p, 6, 1));  // unfaithful claim
  CHECK(prm.score_value(p, {1, v.sep(), 4, v.sep()}) == prm.success_prob(p, 4, 2));

  // Unfinishable or ungrammatical states score zero.
  CHECK(prm.score_value(p, {v.ans(), 4}) == 0.0);            // stray answer marker
  CHECK(prm.score_value(p, {1}) == 0.0);                      // dangling digit
  CHECK(prm.score_value(p, {v.op_add(), v.sep()}) == 0.0);    // operator in claim slot
  CHECK(prm.score_value(p, {1, v.sep(), 4, v.sep(), 2, v.sep()}) == 0.0);  // claims > L
}

TEST_CASE("noisy_score preserves endpoints and sigma=0 is the identity") {
  Rng rng(101);
  PrmScore mid{0.73, PrmSource::oracle};

  PrmScore same = noisy_score(mid, 0.0, rng);
  CHECK(same.value == 0.73);
  CHECK(same.source == PrmSource::oracle);  // untouched, not relabeled

  // Scores of exactly 0 and 1 have infinite logits and must stay fixed.
  CHECK(noisy_score({0.0, PrmSource::oracle}, 2.0, rng).value == 0.0);
  CHECK(noisy_score({1.0, PrmSource::oracle}, 2.0, rng).value == 1.0);

  // Interior scores move but stay strictly inside (0,1) even at huge sigma.
  bool moved = false;
  for (int i = 0; i < 200; ++i) {
    PrmScore s = noisy_score(mid, 5.0, rng);
    CHECK(s.source == PrmSource::noisy);
    REQUIRE(s.value >= 0.0);
    REQUIRE(s.value <= 1.0);
    moved = moved || s.value != 0.73;
  }
  CHECK(moved);

  CHECK_THROWS_AS(noisy_score(mid, -0.1, rng), error);
}

TEST_CASE("NoisyPrm is seed-deterministic around its inner scorer") {
  TokenVocab v(7);
  ToyProblem p = make_problem(v, 3, {{v.op_add(), 5}, {v.op_mul(), 4}});
  std::vector<int> state{1, v.sep()};

  NoisyPrm<OraclePrm> a(OraclePrm(v), 0.5, 99);
  NoisyPrm<OraclePrm> b(OraclePrm(v), 0.5, 99);
  NoisyPrm<OraclePrm> c(OraclePrm(v), 0.5, 100);
  double a1 = a(p, state), a2 = a(p, state);
  CHECK(a1 == b(p, state));
  CHECK(a2 == b(p, state));
  CHECK(a1 != a2);  // the stream advances call to call
  CHECK(a(p, state) != c(p, state));

  CHECK_THROWS_AS((NoisyPrm<OraclePrm>(OraclePrm(v), -1.0, 1)), error);
}

TEST_CASE("state_key separates prompts and suffixes") {
  TokenVocab v(7);
  ToyProblem p1 = make_problem(v, 3, {{v.op_add(), 5}}, 1);
  ToyProblem p2 = make_problem(v, 4, {{v.op_add(), 5}}, 2);
  CHECK(state_key(p1, {1, v.sep()}) == state_key(p1, {1, v.sep()}));
  CHECK(state_key(p1, {1, v.sep()}) != state_key(p1, {2, v.sep()}));
  CHECK(state_key(p1, {1, v.sep()}) != state_key(p2, {1, v.sep()}));
}

TEST_CASE("ExternalPrm replays recorded scores and rejects gaps") {
  TokenVocab v(7);
  ToyProblem p = make_problem(v, 3, {{v.op_add(), 5}});
  std::vector<int> known{1, v.sep()}, unknown{2, v.sep()};

  std::string text = "# recorded scores\n" + hex64(state_key(p, known)) + " 0.625\n\n";
  ExternalPrm ext = ExternalPrm::parse(text);
  CHECK(ext.size() == 1);
  CHECK(ext(p, known) == 0.625);

  try {
    ext(p, unknown);
    FAIL("missing state accepted");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::data);
    CHECK(std::string(e.what()).find(hex64(state_key(p, unknown))) != std::string::npos);
  }

  CHECK_THROWS_AS(ExternalPrm::parse("0123 1.5\n"), error);      // score out of range
  CHECK_THROWS_AS(ExternalPrm::parse("0123 x\n"), error);        // unparsable score
  CHECK_THROWS_AS(ExternalPrm::parse("not-hex 0.5\n"), error);   // unparsable key
}

TEST_CASE("CachedPrm scores each unique state once") {
  TokenVocab v(7);
  ToyProblem p = make_problem(v, 3, {{v.op_add(), 5}});
  int calls = 0;
  auto counting = [&](const ToyProblem& q, const std::vector<int>& s) {
    ++calls;
    return OraclePrm(v)(q, s);
  };
  CachedPrm<decltype(counting)> cached(counting);
  std::vector<int> s1{1, v.sep()}, s2{2, v.sep()};
  double first = cached(p, s1);
  CHECK(cached(p, s1) == first);
  CHECK(calls == 1);
  cached(p, s2);
  cached(p, s2);
  CHECK(calls == 2);
  CHECK(cached.cache().size() == 2);
}

namespace {

// Four hand-scored trajectories; accuracies below are worked by hand.
//   T0 correct   {0.9, 0.8, 0.7}: orm 0.7>0.5 hit, mean 0.8 hit, min 0.7 hit
//   T1 correct   {0.6, 0.55}:     orm hit, mean 0.575 hit, min 0.55 hit
//   T2 incorrect {0.9, 0.1}:      orm 0.1<=0.5 hit, mean 0.5<=0.5 hit, min hit
//   T3 incorrect {0.8, 0.3}:      orm hit, mean 0.55>0.5 MISS, min 0.3 hit
// => correct class: orm 1, mean 1, min 1; incorrect: orm 1, mean 0.5, min 1.
StepDataset hand_dataset() {
  StepDataset ds;
  auto add = [&](int traj, std::vector<double> scores, bool correct) {
    int step = 0;
    for (double s : scores) {
      StepRecord r;
      r.question_id = 1;
      r.traj_id = traj;
      r.step_index = ++step;
      r.score = s;
      r.correct = correct;
      ds.records.push_back(r);
    }
  };
  add(0, {0.9, 0.8, 0.7}, true);
  add(1, {0.6, 0.55}, true);
  add(2, {0.9, 0.1}, false);
  add(3, {0.8, 0.3}, false);
  return ds;
}

}  // namespace

TEST_CASE("diagnostics match the hand-worked 4-trajectory fixture exactly") {
  PrmDiagnostics d = diagnostics(hand_dataset());
  CHECK(d.correct.count == 2);
  CHECK(d.incorrect.count == 2);
  CHECK(d.correct.orm_acc == 1.0);
  CHECK(d.correct.mean_acc == 1.0);
  CHECK(d.correct.min_acc == 1.0);
  CHECK(d.incorrect.orm_acc == 1.0);
  CHECK(d.incorrect.mean_acc == 0.5);  // T3's mean 0.55 leaks over the threshold
  CHECK(d.incorrect.min_acc == 1.0);   // the min catches what the mean hides

  std::string csv = diagnostics_csv(d);
  CHECK(csv.find("class,metric,accuracy,count") == 0);
  CHECK(csv.find("incorrect,mean_prm,0.5,2") != std::string::npos);
  CHECK(csv.find("incorrect,min_prm,1,2") != std::string::npos);
}

TEST_CASE("diagnostics are invariant to trajectory block order") {
  StepDataset ds = hand_dataset();
  // Move T3's block first, keeping intra-trajectory step order (records are
  // ordered within a trajectory by construction; only blocks may move).
  std::stable_sort(ds.records.begin(), ds.records.end(),
                   [](const StepRecord& a, const StepRecord& b) { return a.traj_id > b.traj_id; });
  PrmDiagnostics base = diagnostics(hand_dataset());
  PrmDiagnostics perm = diagnostics(ds);
  CHECK(base.correct.orm_acc == perm.correct.orm_acc);
  CHECK(base.incorrect.mean_acc == perm.incorrect.mean_acc);
  CHECK(base.incorrect.min_acc == perm.incorrect.min_acc);
  for (int cls = 0; cls < 2; ++cls)
    for (int seg = 0; seg < 5; ++seg) {
      CHECK(base.quintiles[cls][seg].mean == perm.quintiles[cls][seg].mean);
      CHECK(base.quintiles[cls][seg].count == perm.quintiles[cls][seg].count);
    }
}

TEST_CASE("quintile segments follow the proportional index map") {
  // Length 5: one score per segment, so segment means equal the raw scores
  // and one-element quartiles collapse onto them.
  StepDataset ds;
  double scores[5] = {0.1, 0.3, 0.5, 0.7, 0.9};
  for (int i = 0; i < 5; ++i) {
    StepRecord r;
    r.question_id = 1;
    r.traj_id = 0;
    r.step_index = i + 1;
    r.score = scores[i];
    r.correct = true;
    ds.records.push_back(r);
  }
  PrmDiagnostics d = diagnostics(ds);
  for (int seg = 0; seg < 5; ++seg) {
    CHECK(d.quintiles[0][seg].count == 1);
    CHECK(d.quintiles[0][seg].mean == scores[seg]);
    CHECK(d.quintiles[0][seg].q1 == scores[seg]);
    CHECK(d.quintiles[0][seg].q3 == scores[seg]);
    CHECK(d.quintiles[1][seg].count == 0);  // no incorrect trajectories at all
  }

  // Length 3 occupies segments floor(s*5/3) = {0, 1, 3}; 2 and 4 stay empty.
  StepDataset ds3;
  for (int i = 0; i < 3; ++i) {
    StepRecord r;
    r.question_id = 2;
    r.traj_id = 0;
    r.step_index = i + 1;
    r.score = 0.5;
    r.correct = false;
    ds3.records.push_back(r);
  }
  PrmDiagnostics d3 = diagnostics(ds3);
  int expect[5] = {1, 1, 0, 1, 0};
  for (int seg = 0; seg < 5; ++seg) CHECK(d3.quintiles[1][seg].count == expect[seg]);

  CHECK_THROWS_AS(diagnostics(StepDataset{}), error);
}

TEST_CASE("quantile interpolates linearly on the sorted sample") {
  CHECK(detail::quantile({1.0, 2.0, 3.0, 4.0}, 0.25) == doctest::Approx(1.75));
  CHECK(detail::quantile({1.0, 2.0, 3.0, 4.0}, 0.75) == doctest::Approx(3.25));
  CHECK(detail::quantile({5.0}, 0.25) == 5.0);
  CHECK(detail::quantile({1.0, 3.0}, 0.5) == doctest::Approx(2.0));
}
