// Command-line entry point.  Five subcommands share one JSON config:
//
//   gen-data   question splits + tree mining + scorer diagnostics
//   train      gen-data plus the full stage curriculum and manifest
//   eval       score one checkpoint on a split under any aggregation mode
//   verify     numerical checks of the math the trainer relies on
//   report     aggregate a finished run directory into plot-ready tables
//
// Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
// All randomness flows from --seed; --threads 1 (the default) is fully
// serial.  Worker counts larger than 1 only change scheduling - sampling
// streams are keyed per question, so artifacts stay byte-identical.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sppd/config.hpp"
#include "sppd/pipeline.hpp"
#include "sppd/train.hpp"
#include "sppd/verify.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 7;
  std::string out;
  bool force = false;
  int threads = 0;  // 0 = resolve from env / default 1
  double tol = 1e-8;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool needs_out) {
  cmd->add_option("--config", a.config_path, "JSON config file (defaults apply when omitted)");
  cmd->add_option("--seed", a.seed, "master seed; every stream derives from it");
  auto* out = cmd->add_option("--out", a.out, "output directory");
  if (needs_out) out->required();
  cmd->add_flag("--force", a.force, "reuse a non-empty output directory");
  cmd->add_option("--threads", a.threads, "worker cap (1 = fully serial)");
  cmd->add_option("--tol", a.tol, "tolerance for verification checks");
  cmd->add_option("--set", a.overrides, "config override, section.key=value (repeatable)");
}

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("SPPD_LAB_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

// File (or {}) + overrides -> validated config plus the merged document that
// gets echoed into the run directory.
std::pair<sppd::RunConfig, sppd::njson> resolve_config(const CommonArgs& a) {
  sppd::njson doc = sppd::njson::object();
  if (!a.config_path.empty()) {
    try {
      doc = sppd::njson::parse(sppd::read_file(a.config_path), nullptr, true, true);
    } catch (const sppd::njson::exception& e) {
      sppd::fail(sppd::errkind::param,
                 "config '" + a.config_path + "': " + std::string(e.what()));
    }
  }
  for (const auto& kv : a.overrides) sppd::apply_override(doc, kv);
  return {sppd::parse_config(doc), doc};
}

int cmd_gen_data(const CommonArgs& a) {
  auto [cfg, echo] = resolve_config(a);
  sppd::prepare_out_dir(a.out, a.force);
  auto res = sppd::run_pipeline(cfg, a.seed, a.out, resolve_threads(a.threads),
                                /*full_train=*/false, echo);
  const auto& r1 = res.manifest["mining"]["round1"];
  std::cout << "gen-data: " << r1["trajectory_count"] << " trajectories, "
            << r1["sentence_pair_count"] << " sentence pairs, " << r1["step_pair_count"]
            << " step pairs -> " << a.out << "\n";
  return 0;
}

int cmd_train(const CommonArgs& a) {
  auto [cfg, echo] = resolve_config(a);
  sppd::prepare_out_dir(a.out, a.force);
  auto res =
      sppd::run_pipeline(cfg, a.seed, a.out, resolve_threads(a.threads), /*full_train=*/true, echo);
  std::cout << "held-out greedy accuracy by stage\n";
  std::cout << "  base      " << sppd::fmt_g17(res.held_base) << "\n";
  std::cout << "  sft_prm   " << sppd::fmt_g17(res.held_sft) << "\n";
  std::cout << "  dpo_prm   " << sppd::fmt_g17(res.held_dpo) << "\n";
  for (std::size_t i = 0; i < res.held_sppd_rounds.size(); ++i)
    std::cout << "  sppd r" << (i + 1) << "   " << sppd::fmt_g17(res.held_sppd_rounds[i]) << "\n";
  std::cout << "  reported  " << sppd::fmt_g17(res.held_reported) << " (round "
            << res.reported_round << ")\n";
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& ckpt, const std::string& mode_name,
             int n_samples, const std::string& split) {
  auto [cfg, echo] = resolve_config(a);
  (void)echo;
  sppd::TokenVocab vocab(cfg.data.gen.modulus);
  auto policy = sppd::Policy::load(ckpt, vocab);
  sppd::DataBundle db = sppd::make_data(cfg.data, a.seed);
  const std::vector<sppd::ToyProblem>* problems = nullptr;
  if (split == "held") problems = &db.held;
  else if (split == "train") problems = &db.train;
  else if (split == "base") problems = &db.base;
  else if (split == "base_val") problems = &db.base_val;
  else sppd::fail(sppd::errkind::param, "unknown split '" + split + "'");
  auto scorer = sppd::make_scorer(cfg.prm, vocab, sppd::derive_seed(a.seed, sppd::fnv1a("prm")));
  sppd::EvalMode mode = sppd::eval_mode_from(mode_name);
  auto r = sppd::evaluate(*policy, *problems, mode, n_samples, scorer,
                          sppd::derive_seed(a.seed, sppd::fnv1a("eval-cli")),
                          resolve_threads(a.threads));
  int n = mode == sppd::EvalMode::greedy ? 1 : n_samples;
  std::cout << mode_name << "@" << n << " on " << split << ": " << sppd::fmt_g17(r.accuracy)
            << " (" << r.n_correct << "/" << r.count << ")\n";
  if (!a.out.empty()) {
    sppd::fs::create_directories(a.out);
    sppd::write_file(sppd::fs::path(a.out) / "eval.csv",
                     sppd::eval_report_csv({{mode_name, n, r.accuracy, r.count}}));
  }
  return 0;
}

int cmd_verify(const CommonArgs& a) {
  sppd::VerifySuite suite = sppd::run_verify_suite(a.tol);
  std::cout << sppd::verify_table(suite);
  if (!a.out.empty()) {
    sppd::fs::create_directories(a.out);
    sppd::write_file(sppd::fs::path(a.out) / "verify.csv", sppd::verify_csv(suite));
  }
  return suite.all_pass ? 0 : 1;
}

int cmd_report(const std::string& run_dir, const std::string& out) {
  sppd::fs::path rd(run_dir);
  sppd::write_report(rd, out.empty() ? rd / "report" : sppd::fs::path(out));
  std::cout << "report written under " << (out.empty() ? (rd / "report").string() : out) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"step-preference training laboratory"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, verify_args, report_args;
  std::string eval_ckpt, eval_mode = "greedy", eval_split = "held";
  int eval_n = 16;
  std::string report_run, report_out;

  CLI::App* gen = app.add_subcommand("gen-data", "generate splits, mine trees, score steps");
  add_common(gen, gen_args, true);

  CLI::App* train = app.add_subcommand("train", "full multi-stage training run");
  add_common(train, train_args, true);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(ev, eval_args, false);
  ev->add_option("--ckpt", eval_ckpt, "policy checkpoint")->required();
  ev->add_option("--mode", eval_mode, "greedy | maj | orm_max | orm_vote");
  ev->add_option("--n", eval_n, "samples per question for aggregated modes");
  ev->add_option("--split", eval_split, "held | train | base | base_val");

  CLI::App* ver = app.add_subcommand("verify", "run the numerical verification suite");
  add_common(ver, verify_args, false);

  CLI::App* rep = app.add_subcommand("report", "aggregate a run directory");
  rep->add_option("run_dir", report_run, "directory written by train/gen-data")->required();
  rep->add_option("--out", report_out, "report output directory (default <run_dir>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (train->parsed()) return cmd_train(train_args);
    if (ev->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_mode, eval_n, eval_split);
    if (ver->parsed()) return cmd_verify(verify_args);
    if (rep->parsed()) return cmd_report(report_run, report_out);
  } catch (const sppd::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
