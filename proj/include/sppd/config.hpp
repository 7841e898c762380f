#pragma once
// Run configuration: one JSON file drives generation, training, evaluation
// and verification.  Parsing is strict - every key must be known, so typos
// fail loudly with the offending key name (a usage error, exit code 2)
// instead of silently training with a default.  Command-line overrides
// (`--set section.key=value`) are spliced into the JSON document before
// parsing and therefore go through the same validation.

#include <string>
#include <vector>

#include <json.hpp>

#include "sppd/common.hpp"
#include "sppd/losses.hpp"
#include "sppd/policy.hpp"
#include "sppd/prefs.hpp"
#include "sppd/prm.hpp"
#include "sppd/toy.hpp"
#include "sppd/tree.hpp"

namespace sppd {

using njson = nlohmann::json;

namespace detail {

// Wraps one JSON object; get() marks keys consumed, finish() rejects leftovers.
class StrictObject {
 public:
  StrictObject(const njson& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(errkind::param, "config: '" + path_ + "' must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& into) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;  // keep the compiled-in default
    try {
      into = it->template get<T>();
    } catch (const njson::exception&) {
      fail(errkind::param, "config: bad value type for '" + path_ + "." + key + "'");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const njson* sub(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const auto& s : seen_)
        if (s == it.key()) known = true;
      if (!known)
        fail(errkind::param, "config: unknown key '" + path_ + "." + it.key() + "'");
    }
  }

 private:
  const njson& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Sections.
// ---------------------------------------------------------------------------

struct DataConfig {
  GenConfig gen;
  long n_base = 300;      // questions for the base witness-training split
  long n_train = 500;     // questions mined into preference data
  long n_held = 200;      // held-out evaluation questions
  long n_base_val = 200;  // validation split steering the base stop rule

  void validate() const {
    gen.validate();
    if (n_base < 1 || n_train < 1 || n_held < 1 || n_base_val < 1)
      fail(errkind::param, "config: every data split size must be >= 1");
  }
};

struct PolicyConfig {
  std::string kind = "neural";  // neural | tabular
  NeuralConfig neural;

  void validate() const {
    if (kind != "neural" && kind != "tabular")
      fail(errkind::param, "config: policy.kind must be 'neural' or 'tabular'");
    neural.validate();
  }
};

struct PrmConfig {
  std::string source = "oracle";  // oracle | noisy | external
  double noise_sigma = 0.0;
  std::string external_path;

  void validate() const {
    if (source != "oracle" && source != "noisy" && source != "external")
      fail(errkind::param, "config: prm.source must be oracle, noisy or external");
    if (noise_sigma < 0.0) fail(errkind::param, "config: prm.noise_sigma must be >= 0");
    if (source == "external" && external_path.empty())
      fail(errkind::param, "config: prm.source = external needs prm.external_path");
  }
};

struct StageConfig {
  std::string kind;             // sft | dpo | sppd
  std::string optimizer = "adam";  // adam | sgd
  double lr = 1e-3;
  long cosine_horizon = 0;      // epochs to anneal over (lr held within an epoch); 0 = constant lr
  int epochs = 1;
  int batch = 32;
  double beta = 1.0;
  double gamma = 0.0;
  std::string margin = "dynamic";  // dynamic | fixed | none (sppd only)
  double fixed_margin = 0.5;
  // Base-stage early stop: from epoch `check_from`, every `check_every`
  // epochs, stop once validation greedy accuracy reaches `stop_at` (0 = off).
  double stop_at = 0.0;
  int check_every = 2;
  int check_from = 0;

  void validate() const {
    if (kind != "sft" && kind != "dpo" && kind != "sppd")
      fail(errkind::param, "config: stage kind must be sft, dpo or sppd");
    if (optimizer != "adam" && optimizer != "sgd")
      fail(errkind::param, "config: stage optimizer must be adam or sgd");
    if (lr <= 0.0) fail(errkind::param, "config: stage lr must be positive");
    if (epochs < 1) fail(errkind::param, "config: stage epochs must be >= 1");
    if (batch < 1) fail(errkind::param, "config: stage batch must be >= 1");
    if (beta <= 0.0) fail(errkind::param, "config: stage beta must be positive");
    if (gamma < 0.0) fail(errkind::param, "config: stage gamma must be >= 0");
    if (cosine_horizon < 0) fail(errkind::param, "config: cosine_horizon must be >= 0");
    if (stop_at < 0.0 || stop_at > 1.0)
      fail(errkind::param, "config: stop_at must lie in [0, 1]");
    margin_mode_from(margin);  // throws on unknown mode
  }
};

struct EvalConfig {
  int n_samples = 16;  // N for maj / orm modes
  int seeds = 3;       // sampling-seed replicas for the aggregation report

  void validate() const {
    if (n_samples < 1) fail(errkind::param, "config: eval.n_samples must be >= 1");
    if (seeds < 1) fail(errkind::param, "config: eval.seeds must be >= 1");
  }
};

struct RunConfig {
  DataConfig data;
  PolicyConfig policy;
  TreeConfig tree;
  PrmConfig prm;
  PairConfig pairs;
  StageConfig base;  // witness SFT producing the reference policy
  StageConfig sft;   // SFT on tau+ (SFT-PRM)
  StageConfig dpo;   // sentence-level DPO (DPO-PRM)
  StageConfig sppd;  // step-level preference stage
  int sppd_rounds = 2;
  int sppd_epochs_round2 = 0;  // 0 = same as sppd.epochs
  // Extra step-stage retrainings at these margin scales, recorded in the
  // manifest for the report command's sweep table.  Empty = skip.
  std::vector<double> sweep_gammas;
  // Also retrain round 1 with the constant margin (same pairs, same
  // reference, same batch stream) and record its held-out accuracy - the
  // fixed-vs-dynamic ablation arm.
  bool compare_fixed_margin = false;
  EvalConfig eval;

  RunConfig() {
    base.kind = sft.kind = "sft";
    dpo.kind = "dpo";
    sppd.kind = "sppd";
  }

  void validate() const {
    data.validate();
    policy.validate();
    prm.validate();
    pairs.validate();
    base.validate();
    sft.validate();
    dpo.validate();
    sppd.validate();
    eval.validate();
    if (tree.passes < 1 || tree.branch < 1)
      fail(errkind::param, "config: tree.passes and tree.branch must be >= 1");
    if (tree.max_depth < 1) fail(errkind::param, "config: tree.max_depth must be >= 1");
    if (tree.temperature <= 0.0) fail(errkind::param, "config: tree.temperature must be positive");
    if (sppd_rounds < 1 || sppd_rounds > 4)
      fail(errkind::param, "config: sppd_rounds must lie in [1, 4]");
    if (sppd_epochs_round2 < 0)
      fail(errkind::param, "config: sppd_epochs_round2 must be >= 0");
    for (double g : sweep_gammas)
      if (g < 0.0 || !std::isfinite(g))
        fail(errkind::param, "config: sweep_gammas entries must be finite and >= 0");
  }
};

// ---------------------------------------------------------------------------
// Parsing.
// ---------------------------------------------------------------------------

inline void parse_stage(const njson& j, const std::string& path, StageConfig& s) {
  detail::StrictObject o(j, path);
  o.get("optimizer", s.optimizer);
  o.get("lr", s.lr);
  o.get("cosine_horizon", s.cosine_horizon);
  o.get("epochs", s.epochs);
  o.get("batch", s.batch);
  o.get("beta", s.beta);
  o.get("gamma", s.gamma);
  o.get("margin", s.margin);
  o.get("fixed_margin", s.fixed_margin);
  o.get("stop_at", s.stop_at);
  o.get("check_every", s.check_every);
  o.get("check_from", s.check_from);
  o.finish();
}

inline RunConfig parse_config(const njson& j) {
  RunConfig cfg;
  detail::StrictObject root(j, "");

  if (const njson* d = root.sub("data")) {
    detail::StrictObject o(*d, "data");
    o.get("modulus", cfg.data.gen.modulus);
    o.get("len_min", cfg.data.gen.len_min);
    o.get("len_max", cfg.data.gen.len_max);
    o.get("use_add", cfg.data.gen.use_add);
    o.get("use_sub", cfg.data.gen.use_sub);
    o.get("use_mul", cfg.data.gen.use_mul);
    o.get("operand_max", cfg.data.gen.operand_max);
    o.get("n_base", cfg.data.n_base);
    o.get("n_train", cfg.data.n_train);
    o.get("n_held", cfg.data.n_held);
    o.get("n_base_val", cfg.data.n_base_val);
    o.finish();
  }
  if (const njson* p = root.sub("policy")) {
    detail::StrictObject o(*p, "policy");
    o.get("kind", cfg.policy.kind);
    o.get("embed", cfg.policy.neural.embed);
    o.get("hidden", cfg.policy.neural.hidden);
    o.get("window", cfg.policy.neural.window);
    std::string act = activation_name(cfg.policy.neural.act);
    o.get("activation", act);
    cfg.policy.neural.act = activation_from(act);
    o.get("init_scale", cfg.policy.neural.init_scale);
    o.finish();
  }
  if (const njson* t = root.sub("tree")) {
    detail::StrictObject o(*t, "tree");
    o.get("passes", cfg.tree.passes);
    o.get("branch", cfg.tree.branch);
    o.get("max_depth", cfg.tree.max_depth);
    o.get("temperature", cfg.tree.temperature);
    std::string norm = cfg.tree.norm == ScoreNorm::softmax ? "softmax" : "minmax";
    o.get("norm", norm);
    if (norm == "softmax") cfg.tree.norm = ScoreNorm::softmax;
    else if (norm == "minmax") cfg.tree.norm = ScoreNorm::minmax;
    else fail(errkind::param, "config: tree.norm must be 'softmax' or 'minmax'");
    o.finish();
  }
  if (const njson* p = root.sub("prm")) {
    detail::StrictObject o(*p, "prm");
    o.get("source", cfg.prm.source);
    o.get("noise_sigma", cfg.prm.noise_sigma);
    o.get("external_path", cfg.prm.external_path);
    o.finish();
  }
  if (const njson* p = root.sub("pairs")) {
    detail::StrictObject o(*p, "pairs");
    o.get("gap", cfg.pairs.gap);
    o.get("per_question_cap", cfg.pairs.per_question_cap);
    o.finish();
  }
  if (const njson* s = root.sub("base")) parse_stage(*s, "base", cfg.base);
  if (const njson* s = root.sub("sft")) parse_stage(*s, "sft", cfg.sft);
  if (const njson* s = root.sub("dpo")) parse_stage(*s, "dpo", cfg.dpo);
  if (const njson* s = root.sub("sppd")) parse_stage(*s, "sppd", cfg.sppd);
  root.get("sppd_rounds", cfg.sppd_rounds);
  root.get("sppd_epochs_round2", cfg.sppd_epochs_round2);
  root.get("sweep_gammas", cfg.sweep_gammas);
  root.get("compare_fixed_margin", cfg.compare_fixed_margin);
  if (const njson* e = root.sub("eval")) {
    detail::StrictObject o(*e, "eval");
    o.get("n_samples", cfg.eval.n_samples);
    o.get("seeds", cfg.eval.seeds);
    o.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& text) {
  njson j;
  try {
    j = njson::parse(text, nullptr, true, true);  // allow comments
  } catch (const njson::exception& e) {
    fail(errkind::param, std::string("config: JSON parse error: ") + e.what());
  }
  return parse_config(j);
}

// Splices `key=value` (dotted path) into the document; values parse as JSON
// scalars with a plain-string fallback so `--set prm.source=oracle` works
// without quoting.
inline void apply_override(njson& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    fail(errkind::param, "override '" + kv + "' must look like section.key=value");
  std::string path = kv.substr(0, eq);
  std::string value = kv.substr(eq + 1);
  njson parsed;
  try {
    parsed = njson::parse(value);
    if (parsed.is_object() || parsed.is_array()) parsed = value;
  } catch (const njson::exception&) {
    parsed = value;
  }
  njson* cur = &j;
  std::size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    std::string part = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) fail(errkind::param, "override '" + kv + "' has an empty path segment");
    if (dot == std::string::npos) {
      (*cur)[part] = parsed;
      break;
    }
    cur = &(*cur)[part];
    start = dot + 1;
  }
}

}  // namespace sppd
