#pragma once
// Autoregressive token policies over the toy vocabulary.
//
// Two parameterizations behind one interface:
//   - TabularPolicy: one logit block per known context (exact-prefix key,
//     uniform fallback bucket for everything unseen).  Gradients are the
//     closed-form softmax gradient, which is what the theory verifiers need.
//   - NeuralPolicy: embedding + one hidden layer over a fixed window of the
//     last W tokens.  Small enough to train in seconds, big enough to
//     generalize across problems, which is what the pipeline needs.
//
// Both expose log-probabilities, step sampling/greedy decoding, and gradient
// accumulation into a flat parameter vector.  Logits are clamped to +/-30
// before the softmax; the clamp participates in the chain rule (a saturated
// coordinate has exactly zero gradient), so finite differences and analytic
// gradients agree even at the boundary.

#include <algorithm>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "sppd/common.hpp"
#include "sppd/rng.hpp"
#include "sppd/vocab.hpp"

namespace sppd {

constexpr int max_step_tokens = 32;  // hard cap per reasoning step
constexpr double logit_clamp = 30.0;

struct StepLogProb {
  double total = 0.0;
  vecd per_token;
  int token_count = 0;
};

struct StepSample {
  std::vector<int> tokens;
  bool truncated = false;  // hit max_step_tokens without a separator/end
};

class Policy {
public:
  virtual ~Policy() = default;

  virtual std::string kind() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  const TokenVocab& vocab() const { return vocab_; }
  std::size_t dim() const { return theta_.size(); }
  const vecd& theta() const { return theta_; }

  // All mutation funnels through here so a frozen reference policy cannot be
  // changed by accident - the paper-level invariant that pi_ref stays fixed
  // within a stage is enforced structurally.
  vecd& theta_mut() {
    if (frozen_) fail(errkind::state, kind() + " policy: mutation attempted after freeze");
    return theta_;
  }
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // Log-probability vector over the full vocabulary given a prefix.
  virtual vecd log_probs(const std::vector<int>& prefix) const = 0;

  // Accumulate coeff * d(log p(token | prefix))/d(theta) into grad and return
  // log p(token | prefix).  One forward pass services both value and
  // gradient; every loss in the lab is a linear combination of these calls.
  virtual double logp_and_grad(const std::vector<int>& prefix, int token, double coeff,
                               vecd& grad) const = 0;

  double token_log_prob(const std::vector<int>& prefix, int token) const {
    if (!vocab_.in_vocab(token))
      fail(errkind::domain, "token_log_prob: token " + std::to_string(token) + " out of vocabulary");
    return log_probs(prefix)[static_cast<std::size_t>(token)];
  }

  StepLogProb step_log_prob(const std::vector<int>& prefix, const std::vector<int>& action) const {
    if (action.empty()) fail(errkind::domain, "step_log_prob: a step must contain >= 1 token");
    StepLogProb out;
    std::vector<int> ctx = prefix;
    for (int t : action) {
      double lp = token_log_prob(ctx, t);
      out.per_token.push_back(lp);
      out.total += lp;
      ctx.push_back(t);
    }
    out.token_count = static_cast<int>(action.size());
    return out;
  }

  // coeff * grad of step_log_prob(...).total, accumulated in place. Returns
  // the step's total log-probability.
  double step_logp_and_grad(const std::vector<int>& prefix, const std::vector<int>& action,
                            double coeff, vecd& grad) const {
    if (action.empty()) fail(errkind::domain, "step_logp_and_grad: empty action");
    double total = 0.0;
    std::vector<int> ctx = prefix;
    for (int t : action) {
      total += logp_and_grad(ctx, t, coeff, grad);
      ctx.push_back(t);
    }
    return total;
  }

  vecd grad_log_prob(const std::vector<int>& prefix, const std::vector<int>& action) const {
    vecd g(dim(), 0.0);
    step_logp_and_grad(prefix, action, 1.0, g);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        fail(errkind::numeric, "grad_log_prob: non-finite gradient at coordinate " + std::to_string(i));
    return g;
  }

  // Emit tokens until the step separator or the end marker closes the step
  // (both are included in the step), or the 32-token cap trips the truncation
  // flag.  The answer marker does not terminate emission by itself: the
  // final step is the whole `ans <digit> end` run.
  StepSample sample_step(const std::vector<int>& prefix, Rng& rng) const {
    StepSample out;
    std::vector<int> ctx = prefix;
    for (int i = 0; i < max_step_tokens; ++i) {
      vecd lp = log_probs(ctx);
      vecd w(lp.size());
      for (std::size_t k = 0; k < lp.size(); ++k) w[k] = std::exp(lp[k]);
      int tok = static_cast<int>(rng.pick(w));
      out.tokens.push_back(tok);
      ctx.push_back(tok);
      if (tok == vocab_.sep() || tok == vocab_.end()) return out;
    }
    out.truncated = true;
    return out;
  }

  StepSample greedy_step(const std::vector<int>& prefix) const {
    StepSample out;
    std::vector<int> ctx = prefix;
    for (int i = 0; i < max_step_tokens; ++i) {
      vecd lp = log_probs(ctx);
      int tok = 0;
      for (std::size_t k = 1; k < lp.size(); ++k)
        if (lp[k] > lp[tok]) tok = static_cast<int>(k);  // strict > keeps the lowest id on ties
      out.tokens.push_back(tok);
      ctx.push_back(tok);
      if (tok == vocab_.sep() || tok == vocab_.end()) return out;
    }
    out.truncated = true;
    return out;
  }

  void save(const std::string& path) const;
  static std::unique_ptr<Policy> load(const std::string& path, const TokenVocab& vocab);

protected:
  explicit Policy(const TokenVocab& v) : vocab_(v) {}
  Policy(const Policy&) = default;

  static vecd log_softmax_clamped(vecd logits) {
    for (double& x : logits) x = std::clamp(x, -logit_clamp, logit_clamp);
    double lse = log_sum_exp(logits);
    for (double& x : logits) x -= lse;
    return logits;
  }

  TokenVocab vocab_;
  vecd theta_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Tabular policy: exact-prefix contexts with a shared fallback bucket.
// ---------------------------------------------------------------------------

class TabularPolicy final : public Policy {
public:
  // Contexts must be enumerated up front so theta has a fixed dimension (the
  // finite-difference and optimizer machinery depend on that). Any prefix
  // not listed shares the single fallback block.
  TabularPolicy(const TokenVocab& v, const std::vector<std::vector<int>>& contexts)
      : Policy(v) {
    for (const auto& c : contexts) {
      auto key = pack(c);
      if (!index_.count(key)) {
        index_.emplace(key, static_cast<int>(contexts_.size()));
        contexts_.push_back(c);
      }
    }
    theta_.assign((contexts_.size() + 1) * static_cast<std::size_t>(v.size()), 0.0);
  }

  std::string kind() const override { return "tabular"; }

  std::unique_ptr<Policy> clone() const override {
    auto p = std::make_unique<TabularPolicy>(*this);
    p->frozen_ = false;
    return p;
  }

  std::size_t block_of(const std::vector<int>& prefix) const {
    auto it = index_.find(pack(prefix));
    std::size_t b = it == index_.end() ? contexts_.size() : static_cast<std::size_t>(it->second);
    return b * static_cast<std::size_t>(vocab_.size());
  }

  std::size_t context_count() const { return contexts_.size(); }
  const std::vector<std::vector<int>>& contexts() const { return contexts_; }

  vecd log_probs(const std::vector<int>& prefix) const override {
    std::size_t off = block_of(prefix);
    vecd logits(theta_.begin() + off, theta_.begin() + off + vocab_.size());
    return log_softmax_clamped(std::move(logits));
  }

  double logp_and_grad(const std::vector<int>& prefix, int token, double coeff,
                       vecd& grad) const override {
    std::size_t off = block_of(prefix);
    vecd lp = log_probs(prefix);
    for (int k = 0; k < vocab_.size(); ++k) {
      if (std::abs(theta_[off + k]) >= logit_clamp) continue;  // clamp saturates the chain rule
      double ind = (k == token) ? 1.0 : 0.0;
      grad[off + k] += coeff * (ind - std::exp(lp[static_cast<std::size_t>(k)]));
    }
    return lp[static_cast<std::size_t>(token)];
  }

private:
  static std::string pack(const std::vector<int>& toks) {
    std::string s;
    s.reserve(toks.size());
    for (int t : toks) s.push_back(static_cast<char>(t + 1));  // vocab <= 32, fits a byte
    return s;
  }

  std::vector<std::vector<int>> contexts_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Neural policy: window of last W token embeddings -> hidden layer -> logits.
// ---------------------------------------------------------------------------

enum class Activation { relu, tanh };

inline const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  fail(errkind::param, "unknown activation '" + s + "' (relu | tanh)");
}

struct NeuralConfig {
  int embed = 16;
  int hidden = 384;
  int window = 16;
  Activation act = Activation::relu;
  double init_scale = 0.1;

  void validate() const {
    if (embed < 1 || hidden < 1 || window < 1)
      fail(errkind::param, "NeuralConfig: embed, hidden, window must be positive");
  }
};

class NeuralPolicy final : public Policy {
public:
  NeuralPolicy(const TokenVocab& v, const NeuralConfig& cfg, Rng& init_rng)
      : Policy(v), cfg_(cfg) {
    cfg_.validate();
    theta_.assign(layout_dim(v, cfg_), 0.0);
    // Gaussian init on weights, zero biases; biases live at the tail of each
    // affine block.
    std::size_t i = 0;
    auto fill = [&](std::size_t count, double scale) {
      for (std::size_t k = 0; k < count; ++k) theta_[i++] = scale * init_rng.normal();
    };
    fill(emb_count(), cfg_.init_scale);
    fill(w1_count(), cfg_.init_scale);
    i += static_cast<std::size_t>(cfg_.hidden);  // b1 = 0
    fill(w2_count(), cfg_.init_scale);
    // b2 = 0 tail
  }

  // Used by the checkpoint loader: zero-initialized, theta filled in after.
  NeuralPolicy(const TokenVocab& v, const NeuralConfig& cfg) : Policy(v), cfg_(cfg) {
    cfg_.validate();
    theta_.assign(layout_dim(v, cfg_), 0.0);
  }

  std::string kind() const override { return "neural"; }
  const NeuralConfig& config() const { return cfg_; }

  std::unique_ptr<Policy> clone() const override {
    auto p = std::make_unique<NeuralPolicy>(*this);
    p->frozen_ = false;
    return p;
  }

  vecd log_probs(const std::vector<int>& prefix) const override {
    Forward f;
    run_forward(prefix, f);
    return f.logp;
  }

  double logp_and_grad(const std::vector<int>& prefix, int token, double coeff,
                       vecd& grad) const override {
    Forward f;
    run_forward(prefix, f);
    const int V = vocab_.size(), E = cfg_.embed, H = cfg_.hidden, W = cfg_.window;

    // dlogits = coeff * (one_hot(token) - softmax), masked where the clamp
    // saturated the logit.
    vecd dlogits(static_cast<std::size_t>(V));
    for (int k = 0; k < V; ++k) {
      double d = coeff * ((k == token ? 1.0 : 0.0) - std::exp(f.logp[static_cast<std::size_t>(k)]));
      dlogits[static_cast<std::size_t>(k)] = f.clamped[static_cast<std::size_t>(k)] ? 0.0 : d;
    }

    const double* W1 = theta_.data() + emb_count();
    const double* W2 = theta_.data() + emb_count() + w1_count() + H;
    double* gW1 = grad.data() + emb_count();
    double* gb1 = grad.data() + emb_count() + w1_count();
    double* gW2 = grad.data() + emb_count() + w1_count() + H;
    double* gb2 = grad.data() + emb_count() + w1_count() + H + w2_count();

    // Logits layer: logits = W2^T h + b2, W2 stored row-major [H][V].
    vecd dh(static_cast<std::size_t>(H), 0.0);
    for (int j = 0; j < H; ++j) {
      double hj = f.h[static_cast<std::size_t>(j)];
      const double* w2row = W2 + static_cast<std::size_t>(j) * V;
      double acc = 0.0;
      for (int k = 0; k < V; ++k) {
        double d = dlogits[static_cast<std::size_t>(k)];
        gW2[static_cast<std::size_t>(j) * V + k] += hj * d;
        acc += w2row[k] * d;
      }
      dh[static_cast<std::size_t>(j)] = acc;
    }
    for (int k = 0; k < V; ++k) gb2[k] += dlogits[static_cast<std::size_t>(k)];

    // Hidden layer: z = W1^T x + b1, W1 stored row-major [W*E][H].
    vecd dz(static_cast<std::size_t>(H));
    for (int j = 0; j < H; ++j) {
      double g = dh[static_cast<std::size_t>(j)];
      if (cfg_.act == Activation::tanh) {
        double hj = f.h[static_cast<std::size_t>(j)];
        dz[static_cast<std::size_t>(j)] = g * (1.0 - hj * hj);
      } else {
        dz[static_cast<std::size_t>(j)] = f.z[static_cast<std::size_t>(j)] > 0.0 ? g : 0.0;
      }
      gb1[j] += dz[static_cast<std::size_t>(j)];
    }
    const int D = W * E;
    vecd dx(static_cast<std::size_t>(D), 0.0);
    for (int i = 0; i < D; ++i) {
      double xi = f.x[static_cast<std::size_t>(i)];
      const double* w1row = W1 + static_cast<std::size_t>(i) * H;
      double acc = 0.0;
      for (int j = 0; j < H; ++j) {
        double d = dz[static_cast<std::size_t>(j)];
        gW1[static_cast<std::size_t>(i) * H + j] += xi * d;
        acc += w1row[j] * d;
      }
      dx[static_cast<std::size_t>(i)] = acc;
    }
    // Embedding rows only for the real (non-pad) window slots.
    for (int s = 0; s < W; ++s) {
      int tok = f.window[static_cast<std::size_t>(s)];
      if (tok < 0) continue;
      double* ge = grad.data() + static_cast<std::size_t>(tok) * E;
      const double* dxs = dx.data() + static_cast<std::size_t>(s) * E;
      for (int e = 0; e < E; ++e) ge[e] += dxs[e];
    }
    return f.logp[static_cast<std::size_t>(token)];
  }

private:
  struct Forward {
    std::vector<int> window;
    vecd x, z, h, logp;
    std::vector<char> clamped;
  };

  std::size_t emb_count() const {
    return static_cast<std::size_t>(vocab_.size()) * cfg_.embed;
  }
  std::size_t w1_count() const {
    return static_cast<std::size_t>(cfg_.window) * cfg_.embed * cfg_.hidden;
  }
  std::size_t w2_count() const {
    return static_cast<std::size_t>(cfg_.hidden) * vocab_.size();
  }
  static std::size_t layout_dim(const TokenVocab& v, const NeuralConfig& c) {
    std::size_t V = static_cast<std::size_t>(v.size());
    return V * c.embed + static_cast<std::size_t>(c.window) * c.embed * c.hidden + c.hidden +
           static_cast<std::size_t>(c.hidden) * V + V;
  }

  void run_forward(const std::vector<int>& prefix, Forward& f) const {
    const int V = vocab_.size(), E = cfg_.embed, H = cfg_.hidden, W = cfg_.window;
    f.window.assign(static_cast<std::size_t>(W), -1);
    std::size_t take = std::min<std::size_t>(prefix.size(), static_cast<std::size_t>(W));
    for (std::size_t i = 0; i < take; ++i)
      f.window[static_cast<std::size_t>(W) - take + i] = prefix[prefix.size() - take + i];

    const double* emb = theta_.data();
    const double* W1 = theta_.data() + emb_count();
    const double* b1 = theta_.data() + emb_count() + w1_count();
    const double* W2 = theta_.data() + emb_count() + w1_count() + H;
    const double* b2 = theta_.data() + emb_count() + w1_count() + H + w2_count();

    const int D = W * E;
    f.x.assign(static_cast<std::size_t>(D), 0.0);  // pad slots stay zero
    for (int s = 0; s < W; ++s) {
      int tok = f.window[static_cast<std::size_t>(s)];
      if (tok < 0) continue;
      const double* row = emb + static_cast<std::size_t>(tok) * E;
      double* xs = f.x.data() + static_cast<std::size_t>(s) * E;
      for (int e = 0; e < E; ++e) xs[e] = row[e];
    }
    f.z.assign(static_cast<std::size_t>(H), 0.0);
    for (int i = 0; i < D; ++i) {
      double xi = f.x[static_cast<std::size_t>(i)];
      if (xi == 0.0) continue;
      const double* w1row = W1 + static_cast<std::size_t>(i) * H;
      for (int j = 0; j < H; ++j) f.z[static_cast<std::size_t>(j)] += xi * w1row[j];
    }
    f.h.resize(static_cast<std::size_t>(H));
    for (int j = 0; j < H; ++j) {
      double zj = f.z[static_cast<std::size_t>(j)] + b1[j];
      f.z[static_cast<std::size_t>(j)] = zj;
      f.h[static_cast<std::size_t>(j)] =
          cfg_.act == Activation::tanh ? std::tanh(zj) : std::max(zj, 0.0);
    }
    vecd logits(static_cast<std::size_t>(V));
    for (int k = 0; k < V; ++k) logits[static_cast<std::size_t>(k)] = b2[k];
    for (int j = 0; j < H; ++j) {
      double hj = f.h[static_cast<std::size_t>(j)];
      if (hj == 0.0) continue;
      const double* w2row = W2 + static_cast<std::size_t>(j) * V;
      for (int k = 0; k < V; ++k) logits[static_cast<std::size_t>(k)] += hj * w2row[k];
    }
    f.clamped.assign(static_cast<std::size_t>(V), 0);
    for (int k = 0; k < V; ++k) {
      double& x = logits[static_cast<std::size_t>(k)];
      if (x <= -logit_clamp || x >= logit_clamp) {
        f.clamped[static_cast<std::size_t>(k)] = 1;
        x = std::clamp(x, -logit_clamp, logit_clamp);
      }
    }
    double lse = log_sum_exp(logits);
    f.logp.resize(static_cast<std::size_t>(V));
    for (int k = 0; k < V; ++k) f.logp[static_cast<std::size_t>(k)] = logits[static_cast<std::size_t>(k)] - lse;
  }

  NeuralConfig cfg_;
};

// ---------------------------------------------------------------------------
// Checkpoint container (binary; the one deliberately non-text artifact).
// Layout: magic, vocab hash, kind, kind-specific shape data, theta.  Loading
// against a different vocabulary is rejected outright.
// ---------------------------------------------------------------------------

namespace ckpt {

inline void put_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ofstream& f, std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t get_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t get_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

}  // namespace ckpt

inline void Policy::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(errkind::data, "checkpoint save: cannot open " + path);
  f.write("SPPDPOL1", 8);
  ckpt::put_u64(f, vocab_.hash());
  const bool tab = kind() == "tabular";
  ckpt::put_u32(f, tab ? 0u : 1u);
  if (tab) {
    const auto* tp = static_cast<const TabularPolicy*>(this);
    ckpt::put_u32(f, static_cast<std::uint32_t>(tp->context_count()));
    for (const auto& ctx : tp->contexts()) {
      ckpt::put_u32(f, static_cast<std::uint32_t>(ctx.size()));
      for (int t : ctx) ckpt::put_u32(f, static_cast<std::uint32_t>(t));
    }
  } else {
    const auto* np = static_cast<const NeuralPolicy*>(this);
    const auto& c = np->config();
    ckpt::put_u32(f, static_cast<std::uint32_t>(c.embed));
    ckpt::put_u32(f, static_cast<std::uint32_t>(c.hidden));
    ckpt::put_u32(f, static_cast<std::uint32_t>(c.window));
    ckpt::put_u32(f, c.act == Activation::relu ? 0u : 1u);
  }
  ckpt::put_u64(f, theta_.size());
  f.write(reinterpret_cast<const char*>(theta_.data()),
          static_cast<std::streamsize>(theta_.size() * sizeof(double)));
  if (!f) fail(errkind::data, "checkpoint save: write failed for " + path);
}

inline std::unique_ptr<Policy> Policy::load(const std::string& path, const TokenVocab& vocab) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(errkind::data, "checkpoint load: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "SPPDPOL1", 8) != 0)
    fail(errkind::data, "checkpoint load: bad magic in " + path);
  std::uint64_t vh = ckpt::get_u64(f);
  if (vh != vocab.hash())
    fail(errkind::data, "checkpoint load: vocabulary hash mismatch (file " + hex64(vh) +
                            ", expected " + hex64(vocab.hash()) + ")");
  std::uint32_t kind = ckpt::get_u32(f);
  std::unique_ptr<Policy> p;
  if (kind == 0) {
    std::uint32_t n = ckpt::get_u32(f);
    std::vector<std::vector<int>> ctxs(n);
    for (auto& ctx : ctxs) {
      std::uint32_t len = ckpt::get_u32(f);
      ctx.resize(len);
      for (auto& t : ctx) t = static_cast<int>(ckpt::get_u32(f));
    }
    p = std::make_unique<TabularPolicy>(vocab, ctxs);
  } else if (kind == 1) {
    NeuralConfig c;
    c.embed = static_cast<int>(ckpt::get_u32(f));
    c.hidden = static_cast<int>(ckpt::get_u32(f));
    c.window = static_cast<int>(ckpt::get_u32(f));
    c.act = ckpt::get_u32(f) == 0 ? Activation::relu : Activation::tanh;
    p = std::make_unique<NeuralPolicy>(vocab, c);
  } else {
    fail(errkind::data, "checkpoint load: unknown policy kind " + std::to_string(kind));
  }
  std::uint64_t dim = ckpt::get_u64(f);
  if (dim != p->dim())
    fail(errkind::data, "checkpoint load: parameter count mismatch in " + path);
  f.read(reinterpret_cast<char*>(p->theta_mut().data()),
         static_cast<std::streamsize>(dim * sizeof(double)));
  if (!f) fail(errkind::data, "checkpoint load: truncated file " + path);
  return p;
}

}  // namespace sppd
