#pragma once
// End-to-end runs.  `generate_and_mine` covers the gen-data command (data
// splits, one round of tree mining, scorer diagnostics); `run_pipeline`
// continues through the stage curriculum, checkpoints, eval reports and the
// manifest; `write_report` aggregates a finished run directory into
// plot-ready tables.
//
// Output layout under --out:
//   config.json                  effective config echo
//   data/problems_*.txt          four question splits
//   round1/ round2/              mining artifacts + scorer diagnostics
//   base_ref.ckpt                frozen reference policy (witness SFT)
//   checkpoints/*.ckpt           one per trained stage (4 in a 2-round run)
//   eval/*.csv                   per-stage evaluation reports
//   train_log.csv  manifest.json
//
// Everything is a pure function of (config, seed); rerunning into a fresh
// directory reproduces every file byte for byte (single-threaded sampling
// paths are seeded per question, so --threads only changes scheduling).

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sppd/config.hpp"
#include "sppd/io.hpp"
#include "sppd/prm.hpp"
#include "sppd/train.hpp"

namespace sppd {

using ScoreFn = std::function<double(const ToyProblem&, const std::vector<int>&)>;

// ---------------------------------------------------------------------------
// Scorers and policies from config.
// ---------------------------------------------------------------------------

inline ScoreFn make_scorer(const PrmConfig& cfg, const TokenVocab& v, std::uint64_t seed) {
  cfg.validate();
  if (cfg.source == "oracle") {
    OraclePrm oracle(v);
    return [oracle](const ToyProblem& p, const std::vector<int>& s) { return oracle(p, s); };
  }
  if (cfg.source == "noisy") {
    // Noise is keyed by the scored state, not by call order, so results are
    // identical across thread counts and caching layers.
    OraclePrm oracle(v);
    const double sigma = cfg.noise_sigma;
    return [oracle, sigma, seed](const ToyProblem& p, const std::vector<int>& s) {
      Rng rng(derive_seed(seed, state_key(p, s)));
      return noisy_score(oracle.score(p, s), sigma, rng).value;
    };
  }
  auto ext = std::make_shared<ExternalPrm>(ExternalPrm::parse(read_file(cfg.external_path)));
  return [ext](const ToyProblem& p, const std::vector<int>& s) { return (*ext)(p, s); };
}

// A tabular pipeline policy gets one context block per witness prefix of
// every known question (enough to memorize every gold path exactly); the
// neural policy needs no context enumeration.
inline std::unique_ptr<Policy> make_policy(const PolicyConfig& cfg, const TokenVocab& v,
                                           const std::vector<ToyProblem>& all_problems,
                                           std::uint64_t seed) {
  if (cfg.kind == "neural") {
    Rng rng(derive_seed(seed, fnv1a("policy-init")));
    return std::make_unique<NeuralPolicy>(v, cfg.neural, rng);
  }
  std::vector<std::vector<int>> contexts;
  for (const auto& p : all_problems) {
    std::vector<int> ctx = p.prompt;
    contexts.push_back(ctx);
    for (int t : witness(v, p)) {
      ctx.push_back(t);
      contexts.push_back(ctx);
    }
  }
  return std::make_unique<TabularPolicy>(v, contexts);
}

// ---------------------------------------------------------------------------
// Data splits.
// ---------------------------------------------------------------------------

struct DataBundle {
  std::vector<ToyProblem> base, train, held, base_val;
};

inline DataBundle make_data(const DataConfig& d, std::uint64_t seed) {
  d.validate();
  DataBundle db;
  db.base = generate(derive_seed(seed, fnv1a("split-base")), d.n_base, d.gen, 0);
  db.train = generate(derive_seed(seed, fnv1a("split-train")), d.n_train, d.gen, 1000000);
  db.held = generate(derive_seed(seed, fnv1a("split-held")), d.n_held, d.gen, 2000000);
  db.base_val = generate(derive_seed(seed, fnv1a("split-baseval")), d.n_base_val, d.gen, 3000000);
  return db;
}

// ---------------------------------------------------------------------------
// Output directory plumbing.
// ---------------------------------------------------------------------------

inline void prepare_out_dir(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_directory(out))
    fail(errkind::param, "output path '" + out.string() + "' exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out) && !force)
    fail(errkind::param,
         "output directory '" + out.string() + "' is not empty; pass --force to reuse it");
  fs::create_directories(out);
}

inline std::string write_named(const fs::path& out, const std::string& rel,
                               const std::string& content, njson& files) {
  fs::path p = out / rel;
  fs::create_directories(p.parent_path());
  write_file(p, content);
  std::string h = hex64(fnv1a(content));
  files[rel] = h;
  return h;
}

// ---------------------------------------------------------------------------
// Stage evaluation reports.
// ---------------------------------------------------------------------------

inline std::vector<EvalRow> full_eval(const Policy& policy, const std::vector<ToyProblem>& held,
                                      const ScoreFn& scorer, int n_samples, std::uint64_t seed,
                                      int threads) {
  std::vector<EvalRow> rows;
  auto add = [&](EvalMode mode, int n) {
    EvalResult r = evaluate(policy, held, mode, n, scorer, seed, threads);
    rows.push_back({eval_mode_name(mode), n, r.accuracy, r.count});
  };
  add(EvalMode::greedy, 1);
  add(EvalMode::maj, n_samples);
  add(EvalMode::orm_max, n_samples);
  add(EvalMode::orm_vote, n_samples);
  return rows;
}

// ---------------------------------------------------------------------------
// The run itself.
// ---------------------------------------------------------------------------

struct PipelineOutcome {
  njson manifest;
  double held_base = 0.0, held_sft = 0.0, held_dpo = 0.0;
  vecd held_sppd_rounds;      // one entry per step-stage round
  double held_reported = 0.0; // best round, ties to the later one
  int reported_round = 0;
  bool trained = false;
};

namespace detail {

inline njson mining_entry(const fs::path& out, const std::string& dir, const TokenVocab& v,
                          const MinedData& mined, const std::vector<ToyProblem>& problems,
                          const std::string& sampler_hash, njson& files) {
  njson entry;
  entry["sampler_checkpoint_hash"] = sampler_hash;
  entry["trajectories"] = write_named(out, dir + "/trajectories.txt",
                                      format_trajectories(v, mined.trajs), files);
  entry["dstep"] = write_named(out, dir + "/dstep.txt", format_dstep(v, mined.dstep), files);
  entry["sentence_pairs"] = write_named(out, dir + "/sentence_pairs.txt",
                                        format_sentence_pairs(v, mined.sel.pairs), files);
  entry["step_pairs"] = write_named(out, dir + "/step_pairs.txt",
                                    format_step_pairs(v, mined.step_pairs, problems), files);
  PrmDiagnostics diag = diagnostics(mined.dstep);
  entry["prm_accuracy"] =
      write_named(out, dir + "/prm_accuracy.csv", diagnostics_csv(diag), files);
  entry["prm_quintiles"] =
      write_named(out, dir + "/prm_quintiles.csv", quintiles_csv(diag), files);
  entry["trajectory_count"] = mined.trajs.size();
  entry["step_pair_count"] = mined.step_pairs.size();
  entry["sentence_pair_count"] = mined.sel.pairs.size();
  return entry;
}

inline njson stage_entry(const std::string& kind, const StageMetrics& m,
                         const std::string& ref_hash, const std::string& out_rel,
                         const std::string& out_hash, double held_greedy) {
  njson e;
  e["kind"] = kind;
  e["name"] = m.name;
  e["ref_checkpoint_hash"] = ref_hash;
  e["out_checkpoint"] = out_rel;
  e["out_checkpoint_hash"] = out_hash;
  e["start_metric"] = m.start_metric;
  e["best_metric"] = m.best_metric;
  e["best_epoch"] = m.best_epoch;
  e["epochs_run"] = m.epochs_run;
  e["stopped_early"] = m.stopped_early;
  e["nan_abort"] = m.nan_abort;
  e["held_greedy"] = held_greedy;
  return e;
}

}  // namespace detail

// full_train = false stops after round-1 mining (the gen-data command).
inline PipelineOutcome run_pipeline(const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                                    int threads, bool full_train, const njson& config_echo) {
  cfg.validate();
  TokenVocab v(cfg.data.gen.modulus);
  PipelineOutcome res;
  njson files = njson::object();  // rel path -> content hash

  write_named(out, "config.json", config_echo.dump(2) + "\n", files);

  DataBundle db = make_data(cfg.data, seed);
  write_named(out, "data/problems_base.txt", format_problems(db.base), files);
  write_named(out, "data/problems_train.txt", format_problems(db.train), files);
  write_named(out, "data/problems_held.txt", format_problems(db.held), files);
  write_named(out, "data/problems_base_val.txt", format_problems(db.base_val), files);

  ScoreFn scorer = make_scorer(cfg.prm, v, derive_seed(seed, fnv1a("prm")));

  std::vector<ToyProblem> all = db.base;
  all.insert(all.end(), db.train.begin(), db.train.end());
  all.insert(all.end(), db.held.begin(), db.held.end());
  all.insert(all.end(), db.base_val.begin(), db.base_val.end());
  std::unique_ptr<Policy> init = make_policy(cfg.policy, v, all, seed);

  auto held_greedy = [&](const Policy& p) {
    return evaluate(p, db.held, EvalMode::greedy, 1, scorer, 0, threads).accuracy;
  };
  auto baseval_greedy = [&](const Policy& p) {
    return evaluate(p, db.base_val, EvalMode::greedy, 1, scorer, 0, threads).accuracy;
  };

  std::vector<TrainLogRow> log;
  njson stages = njson::array();

  // Base: witness SFT with the stop-at-target rule; becomes the frozen
  // reference for everything downstream.
  StageResult base = run_sft_stage(cfg.base, "base", *init, witness_items(v, db.base), seed,
                                   baseval_greedy, /*best_restore=*/false);
  log.insert(log.end(), base.metrics.log.begin(), base.metrics.log.end());
  base.policy->freeze();
  base.policy->save((out / "base_ref.ckpt").string());
  std::string base_hash = hex64(hash_file(out / "base_ref.ckpt"));
  files["base_ref.ckpt"] = base_hash;
  res.held_base = held_greedy(*base.policy);
  stages.push_back(detail::stage_entry("sft", base.metrics, "", "base_ref.ckpt", base_hash,
                                       res.held_base));

  // Round-1 mining under the frozen base.
  MinedData mined = mine(db.train, *base.policy, cfg.tree, cfg.pairs, scorer,
                         derive_seed(seed, fnv1a("mine-1")), threads);
  njson mining = njson::object();
  mining["round1"] = detail::mining_entry(out, "round1", v, mined, db.train, base_hash, files);

  if (!full_train) {
    njson manifest;
    manifest["version"] = 1;
    manifest["seed"] = seed;
    manifest["command"] = "gen-data";
    manifest["stages"] = stages;
    manifest["mining"] = mining;
    manifest["files"] = files;
    write_file(out / "manifest.json", manifest.dump(2) + "\n");
    res.manifest = std::move(manifest);
    return res;
  }

  fs::create_directories(out / "checkpoints");
  fs::create_directories(out / "eval");
  njson sweep = njson::array();
  njson comparisons = njson::object();

  auto finish_stage = [&](StageResult& sr, const std::string& kind, const std::string& ref_hash,
                          const std::string& ckpt_rel) {
    log.insert(log.end(), sr.metrics.log.begin(), sr.metrics.log.end());
    sr.policy->freeze();
    sr.policy->save((out / ckpt_rel).string());
    std::string h = hex64(hash_file(out / ckpt_rel));
    files[ckpt_rel] = h;
    double acc = held_greedy(*sr.policy);
    stages.push_back(detail::stage_entry(kind, sr.metrics, ref_hash, ckpt_rel, h, acc));
    auto rows = full_eval(*sr.policy, db.held, scorer, cfg.eval.n_samples,
                          derive_seed(seed, fnv1a("eval:" + sr.metrics.name)), threads);
    write_named(out, "eval/" + sr.metrics.name + ".csv", eval_report_csv(rows), files);
    return std::make_pair(h, acc);
  };

  // SFT on tau+.
  StageResult sft = run_sft_stage(cfg.sft, "sft_prm", *base.policy,
                                  tau_plus_items(db.train, mined.sel.sft_chosen), seed,
                                  held_greedy, true);
  auto [sft_hash, sft_acc] = finish_stage(sft, "sft", base_hash, "checkpoints/sft_prm.ckpt");
  res.held_sft = sft_acc;

  // Sentence-level DPO against the frozen SFT output.
  StageResult dpo = run_dpo_stage(cfg.dpo, "dpo_prm", *sft.policy, *sft.policy,
                                  sentence_items(db.train, mined.sel.pairs), seed, held_greedy,
                                  true);
  auto [dpo_hash, dpo_acc] = finish_stage(dpo, "dpo", sft_hash, "checkpoints/dpo_prm.ckpt");
  res.held_dpo = dpo_acc;

  // Step-level preference rounds.  Round r trains against the frozen output
  // of round r-1 (round 1 against the DPO checkpoint) on pairs mined by that
  // same policy (round 1 uses the base-mined pairs).
  const Policy* prev_policy = dpo.policy.get();
  std::string prev_hash = dpo_hash;
  std::vector<StageResult> rounds;
  for (int r = 1; r <= cfg.sppd_rounds; ++r) {
    std::vector<StepPreferencePair> pairs;
    if (r == 1) {
      pairs = mined.step_pairs;
    } else {
      MinedData m2 = mine(db.train, *prev_policy, cfg.tree, cfg.pairs, scorer,
                          derive_seed(seed, fnv1a("mine-" + std::to_string(r))), threads);
      std::string dir = "round" + std::to_string(r);
      mining[dir] = detail::mining_entry(out, dir, v, m2, db.train, prev_hash, files);
      pairs = std::move(m2.step_pairs);
    }
    std::string name = r == 1 ? "sppd" : "sppd_stage" + std::to_string(r);
    StageConfig sc = cfg.sppd;
    if (r > 1 && cfg.sppd_epochs_round2 > 0) sc.epochs = cfg.sppd_epochs_round2;
    // Each round anneals over its own length.
    if (r > 1 && sc.cosine_horizon > 0) sc.cosine_horizon = sc.epochs;

    StageResult sr;
    if (pairs.empty()) {
      // A fully converged sampler can mine no acceptable pairs; carry the
      // previous policy forward rather than failing the run.
      sr.policy = prev_policy->clone();
      sr.metrics.name = name;
      sr.metrics.start_metric = held_greedy(*sr.policy);
      sr.metrics.best_metric = sr.metrics.start_metric;
    } else {
      sr = run_step_stage(sc, name, *prev_policy, *prev_policy, pairs, seed, held_greedy, true);
    }
    auto [h, acc] = finish_stage(sr, "sppd", prev_hash, "checkpoints/" + name + ".ckpt");
    res.held_sppd_rounds.push_back(acc);

    // Comparison arms ride on the round-1 data, reference and batch stream
    // (seed_tag pins the shuffle order of the main round-1 stage), so each
    // arm differs from the main run in the loss alone.
    if (r == 1) {
      for (double g : cfg.sweep_gammas) {
        StageConfig gc = cfg.sppd;
        gc.gamma = g;
        StageResult gs = run_step_stage(gc, "sppd_gamma_sweep", *prev_policy, *prev_policy, pairs,
                                        seed, held_greedy, true, name);
        njson row;
        row["gamma"] = g;
        row["held_greedy"] = held_greedy(*gs.policy);
        row["count"] = db.held.size();
        sweep.push_back(row);
      }
      if (cfg.compare_fixed_margin && !pairs.empty()) {
        StageConfig fc = cfg.sppd;
        fc.margin = "fixed";
        StageResult fixed = run_step_stage(fc, "sppd_fixed_margin", *prev_policy, *prev_policy,
                                           pairs, seed, held_greedy, true, name);
        comparisons["fixed_margin_held_greedy"] = held_greedy(*fixed.policy);
        comparisons["fixed_margin_value"] = fc.fixed_margin;
      }
    }

    rounds.push_back(std::move(sr));
    prev_policy = rounds.back().policy.get();
    prev_hash = h;
  }

  res.reported_round = 1;
  for (std::size_t i = 0; i < res.held_sppd_rounds.size(); ++i)
    if (res.held_sppd_rounds[i] >= res.held_sppd_rounds[static_cast<std::size_t>(res.reported_round - 1)])
      res.reported_round = static_cast<int>(i) + 1;
  res.held_reported = res.held_sppd_rounds[static_cast<std::size_t>(res.reported_round - 1)];

  write_named(out, "train_log.csv", train_log_csv(log), files);

  njson manifest;
  manifest["version"] = 1;
  manifest["seed"] = seed;
  manifest["command"] = "train";
  manifest["stages"] = stages;
  manifest["mining"] = mining;
  manifest["sweep"] = sweep;
  manifest["comparisons"] = comparisons;
  njson summary;
  summary["held_greedy_base"] = res.held_base;
  summary["held_greedy_sft_prm"] = res.held_sft;
  summary["held_greedy_dpo_prm"] = res.held_dpo;
  summary["held_greedy_sppd_rounds"] = res.held_sppd_rounds;
  summary["held_greedy_sppd_reported"] = res.held_reported;
  summary["reported_round"] = res.reported_round;
  manifest["summary"] = summary;
  manifest["files"] = files;
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  res.manifest = std::move(manifest);
  res.trained = true;
  return res;
}

// ---------------------------------------------------------------------------
// Report aggregation over a finished run directory.
// ---------------------------------------------------------------------------

inline void write_report(const fs::path& run_dir, const fs::path& report_dir) {
  fs::path mpath = run_dir / "manifest.json";
  if (!fs::exists(mpath))
    fail(errkind::data, "report: no manifest.json under '" + run_dir.string() + "'");
  njson manifest;
  try {
    manifest = njson::parse(read_file(mpath));
  } catch (const njson::exception& e) {
    fail(errkind::data, std::string("report: malformed manifest: ") + e.what());
  }
  fs::create_directories(report_dir);

  {
    std::ostringstream csv;
    csv << "stage,kind,held_greedy,best_epoch,epochs_run\n";
    for (const auto& s : manifest.value("stages", njson::array()))
      csv << s.value("name", "?") << ',' << s.value("kind", "?") << ','
          << fmt_g17(s.value("held_greedy", 0.0)) << ',' << s.value("best_epoch", 0) << ','
          << s.value("epochs_run", 0) << '\n';
    write_file(report_dir / "stage_metrics.csv", csv.str());
  }
  {
    std::ostringstream csv;
    csv << "gamma,held_greedy,count\n";
    for (const auto& row : manifest.value("sweep", njson::array()))
      csv << fmt_g17(row.value("gamma", 0.0)) << ',' << fmt_g17(row.value("held_greedy", 0.0))
          << ',' << row.value("count", 0L) << '\n';
    write_file(report_dir / "gamma_sweep.csv", csv.str());
  }
  for (const char* dir : {"round1", "round2"}) {
    fs::path q = run_dir / dir / "prm_quintiles.csv";
    if (fs::exists(q))
      write_file(report_dir / (std::string(dir) + "_prm_quintiles.csv"), read_file(q));
    fs::path a = run_dir / dir / "prm_accuracy.csv";
    if (fs::exists(a))
      write_file(report_dir / (std::string(dir) + "_prm_accuracy.csv"), read_file(a));
  }
}

}  // namespace sppd
