#pragma once

// Dual-GRPO: clipped, KL-regularized surrogates for the rewriter (one
// advantage per branch) and the flow decoder (one advantage per leaf, over
// its stochastic steps), mixed by the reward scheduler and applied as two
// independent adaptive-moment updates.

#include <chrono>
#include <cmath>
#include <concepts>
#include <functional>
#include <random>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgrpo/adam.hpp"
#include "dualgrpo/autodiff.hpp"
#include "dualgrpo/flow_decoder.hpp"
#include "dualgrpo/parallel.hpp"
#include "dualgrpo/reward_env.hpp"
#include "dualgrpo/rewriter.hpp"
#include "dualgrpo/rollout.hpp"

namespace dualgrpo {

struct TrainerConfig {
  std::size_t branches = 5;   // J
  std::size_t leaves = 16;    // K
  std::size_t budget = 12;    // reasoning budget
  std::size_t steps = 10;     // m
  std::size_t window = 2;     // W
  double noise = 0.1;         // a
  double delta = 1e-3;
  double clip_llm = 0.2;
  double clip_dit = 1e-4;
  double kl_llm = 0.01;
  double kl_dit = 0.01;
  double lr_llm = 2e-4;  // 2e-6 x 100 for the toy rewriter
  double lr_dit = 3e-4;
  std::size_t prompts_per_iter = 8;
  long iterations = 2000;
  std::size_t epochs = 1;
  SchedulerConfig scheduler;

  RolloutSettings rollout() const {
    return {branches, leaves, budget, 1.0, TimeGrid{steps, delta}, SdeConfig{noise, window}};
  }

  void validate() const {
    if (branches < 2) throw std::invalid_argument("trainer.branches: must be >= 2");
    if (leaves < 2) throw std::invalid_argument("trainer.leaves: must be >= 2");
    if (budget < 3) throw std::invalid_argument("trainer.budget: must be >= 3");
    if (window > steps) throw std::invalid_argument("trainer.window: must be <= trainer.steps");
    if (!(clip_llm > 0.0)) throw std::invalid_argument("trainer.clip_llm: must be > 0");
    if (!(clip_dit > 0.0)) throw std::invalid_argument("trainer.clip_dit: must be > 0");
    if (kl_llm < 0.0) throw std::invalid_argument("trainer.kl_llm: must be >= 0");
    if (kl_dit < 0.0) throw std::invalid_argument("trainer.kl_dit: must be >= 0");
    if (!(lr_llm > 0.0)) throw std::invalid_argument("trainer.lr_llm: must be > 0");
    if (!(lr_dit > 0.0)) throw std::invalid_argument("trainer.lr_dit: must be > 0");
    if (prompts_per_iter == 0) throw std::invalid_argument("trainer.prompts_per_iter: must be > 0");
    if (iterations < 0) throw std::invalid_argument("trainer.iterations: must be >= 0");
    if (epochs == 0) throw std::invalid_argument("trainer.epochs: must be > 0");
    rollout().grid.validate();
    rollout().sde.validate(rollout().grid);
    scheduler.validate();
  }
};

struct StageLoss {
  Var value;
  double kl = 0.0;             // term-weighted mean KL
  double clip_fraction = 0.0;  // fraction of terms with |r - 1| > eps
  std::size_t terms = 0;
};

// ---------------------------------------------------------------------------
// Rewriter stage

/// Mean over branches of the per-token mean of
///   -min(r A_j, clip(r) A_j) + beta_kl * KL(p_phi || p_ref)
/// with r = p_phi / p_old per token; `phi` lives on the caller's tape.
inline StageLoss llm_loss(const RewriterVars& phi, const RolloutTree& tree, std::span<const double> adv,
                          const RewriterParams& phi_ref, double eps, double beta_kl, const Vocab& vocab) {
  Tape& t = *phi.embed.tape;
  const std::size_t j = tree.branches.size();
  if (adv.size() != j) throw std::invalid_argument("llm_loss: one advantage per branch required");
  std::vector<const ReasoningTrace*> traces;
  for (std::size_t b = 0; b < j; ++b) {
    const auto& tr = tree.branches[b].trace;
    if (tr.log_probs.size() != tr.tokens.size()) {
      throw std::invalid_argument("llm_loss: branch " + std::to_string(b) + " is missing stored log-probs");
    }
    traces.push_back(&tr);
  }
  const TraceReplay cur = replay_traces(phi, traces, vocab);

  Tape ref_tape;
  const TraceReplay ref = replay_traces(RewriterVars::constants(ref_tape, phi_ref), traces, vocab);

  StageLoss out;
  out.value = t.constant(Tensor::scalar(0.0));
  double kl_acc = 0.0;
  std::size_t clipped = 0;
  for (std::size_t pos = 0; pos < cur.max_len; ++pos) {
    Tensor old_lp({j, 1}), a({j, 1}), w({j, 1});
    for (std::size_t b = 0; b < j; ++b) {
      if (!cur.active[pos][b]) continue;
      old_lp[b] = traces[b]->log_probs[pos];
      a[b] = adv[b];
      w[b] = 1.0 / (static_cast<double>(j) * static_cast<double>(traces[b]->tokens.size()));
    }
    Var log_ratio = sub(cur.token_log_prob[pos], t.constant(old_lp));
    Var surr = ppo_surrogate(log_ratio, a, eps);
    Var kl = categorical_kl(cur.logits[pos], ref_tape.value(ref.log_probs[pos]));
    Var term = add(surr, scale(kl, beta_kl));
    out.value = add(out.value, sum(mul(term, t.constant(w))));

    const Tensor& lr = t.value(log_ratio);
    const Tensor& klv = t.value(kl);
    for (std::size_t b = 0; b < j; ++b) {
      if (!cur.active[pos][b]) continue;
      kl_acc += w[b] * klv[b];
      if (std::abs(std::exp(lr[b]) - 1.0) > eps) ++clipped;
      ++out.terms;
    }
  }
  out.kl = kl_acc;
  out.clip_fraction = out.terms ? static_cast<double>(clipped) / static_cast<double>(out.terms) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Decoder stage

/// Mean over branches, leaves and stochastic steps of
///   -min(r A_jk, clip(r) A_jk) + beta_kl * KL(N(mu_lambda) || N(mu_ref))
/// with r the Gaussian transition-density ratio against the stored
/// sampling-time log-prob. Diverged leaves contribute no terms.
inline StageLoss dit_loss(const DecoderVars& lambda, const RolloutTree& tree,
                          const std::vector<std::vector<double>>& adv, const VelocityFieldParams& lambda_ref,
                          double noise, double eps, double beta_kl) {
  Tape& t = *lambda.w1.tape;
  const std::size_t nb = tree.branches.size();
  if (adv.size() != nb) throw std::invalid_argument("dit_loss: one advantage row per branch required");
  std::vector<double> xs, ts, nexts, sds, olds, as, ws;
  std::vector<std::size_t> cond_index;
  double dt = 0.0;
  for (std::size_t j = 0; j < nb; ++j) {
    const Branch& b = tree.branches[j];
    const std::size_t nk = b.leaves.size();
    if (adv[j].size() != nk) throw std::invalid_argument("dit_loss: one advantage per leaf required");
    for (std::size_t k = 0; k < nk; ++k) {
      const Leaf& leaf = b.leaves[k];
      if (leaf.diverged) continue;
      std::size_t n = 0;
      for (const auto& r : leaf.records) n += r.stochastic;
      for (const auto& r : leaf.records) {
        if (!r.stochastic) continue;
        if (!std::isfinite(r.log_prob)) {
          throw std::invalid_argument("dit_loss: stochastic step without a stored log-prob");
        }
        xs.insert(xs.end(), {r.x[0], r.x[1]});
        nexts.insert(nexts.end(), {r.next[0], r.next[1]});
        ts.push_back(r.t);
        sds.push_back(r.std);
        olds.push_back(r.log_prob);
        as.push_back(adv[j][k]);
        ws.push_back(1.0 / (static_cast<double>(nb) * static_cast<double>(nk) * static_cast<double>(n)));
        cond_index.push_back(j);
        dt = r.dt;
      }
    }
  }
  StageLoss out;
  const std::size_t rows = ts.size();
  if (rows == 0) {
    out.value = t.constant(Tensor::scalar(0.0));
    return out;
  }
  // One condition row per branch, shared by its leaves and steps.
  const std::size_t hc = tree.branches[0].cond.value.cols();
  Tensor cond({nb, hc});
  for (std::size_t j = 0; j < nb; ++j)
    std::copy_n(tree.branches[j].cond.value.data().begin(), hc,
                cond.data().begin() + static_cast<std::ptrdiff_t>(j * hc));
  const Tensor x({rows, kDim}, std::move(xs));
  const Tensor next({rows, kDim}, std::move(nexts));
  const DecoderInputs inputs = decoder_inputs(x, ts, cond, std::move(cond_index));

  Tensor mu_ref;
  {
    Tape rt;
    Var v = velocity_net(DecoderVars::constants(rt, lambda_ref), inputs);
    mu_ref = rt.value(drift_mean_batch(v, x, ts, dt, noise));
  }
  Var v = velocity_net(lambda, inputs);
  Var mu = drift_mean_batch(v, x, ts, dt, noise);
  Var lp = gaussian_log_density(mu, next, sds);
  Var log_ratio = sub(lp, t.constant(Tensor({rows, 1}, std::move(olds))));
  Var surr = ppo_surrogate(log_ratio, Tensor({rows, 1}, std::move(as)), eps);
  Var kl = gaussian_kl_batch(mu, mu_ref, sds);
  const Tensor w({rows, 1}, ws);
  out.value = sum(mul(add(surr, scale(kl, beta_kl)), t.constant(w)));

  const Tensor& lr = t.value(log_ratio);
  const Tensor& klv = t.value(kl);
  std::size_t clipped = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    out.kl += w[r] * klv[r];
    if (std::abs(std::exp(lr[r]) - 1.0) > eps) ++clipped;
  }
  out.terms = rows;
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(rows);
  return out;
}

// ---------------------------------------------------------------------------
// Training state and step

struct ReferenceParams {
  RewriterParams phi;
  VelocityFieldParams lambda;
};

struct TrainerState {
  RewriterParams phi;
  VelocityFieldParams lambda;
  RewriterParams phi_old;
  VelocityFieldParams lambda_old;
  ReferenceParams ref;
  Adam opt_llm;
  Adam opt_dit;

  /// Current, old and reference parameters all start from the given snapshots.
  static TrainerState start(const RewriterParams& phi, const VelocityFieldParams& lambda, const TrainerConfig& cfg) {
    return {phi, lambda, phi, lambda, ReferenceParams{phi, lambda}, Adam({cfg.lr_llm}), Adam({cfg.lr_dit})};
  }
};

struct MetricsRow {
  long iteration = 0;
  double r_sem = 0.0;
  double r_aes = 0.0;
  double r_con = 0.0;
  double r2 = 0.0;
  double accuracy = 0.0;  // branches whose refined segment names the right concept
  double kl_llm = 0.0;
  double kl_dit = 0.0;
  double clip_llm = 0.0;
  double clip_dit = 0.0;
  double loss_llm = 0.0;
  double loss_dit = 0.0;
  double beta1 = 0.0;
  double beta2 = 0.0;
  std::size_t diverged = 0;
  bool skipped = false;
  double wall_clock = 0.0;  // seconds; kept out of the deterministic metrics file
};

struct StageGrad {
  double loss = 0.0;
  double kl = 0.0;
  double clip = 0.0;
  std::vector<Tensor> grads;
};

inline StageGrad llm_grad(const RewriterParams& phi, const RolloutTree& tree, std::span<const double> adv,
                          const RewriterParams& phi_ref, const TrainerConfig& cfg, const Vocab& vocab) {
  Tape t;
  const RewriterVars vars = RewriterVars::leaves(t, phi);
  StageLoss l = llm_loss(vars, tree, adv, phi_ref, cfg.clip_llm, cfg.kl_llm, vocab);
  Gradients g = t.backward(l.value);
  StageGrad out{t.value(l.value).item(), l.kl, l.clip_fraction, {}};
  for (Var v : vars.list()) out.grads.push_back(g[v]);
  return out;
}

inline StageGrad dit_grad(const VelocityFieldParams& lambda, const RolloutTree& tree,
                          const std::vector<std::vector<double>>& adv, const VelocityFieldParams& lambda_ref,
                          const TrainerConfig& cfg) {
  Tape t;
  const DecoderVars vars = DecoderVars::leaves(t, lambda);
  StageLoss l = dit_loss(vars, tree, adv, lambda_ref, cfg.noise, cfg.clip_dit, cfg.kl_dit);
  Gradients g = t.backward(l.value);
  StageGrad out{t.value(l.value).item(), l.kl, l.clip_fraction, {}};
  for (Var v : vars.list()) out.grads.push_back(g[v]);
  return out;
}

/// Averages per-tree results in tree order.
inline StageGrad average(const std::vector<StageGrad>& parts) {
  StageGrad out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    out.loss += parts[i].loss;
    out.kl += parts[i].kl;
    out.clip += parts[i].clip;
    for (std::size_t k = 0; k < out.grads.size(); ++k)
      for (std::size_t e = 0; e < out.grads[k].size(); ++e) out.grads[k][e] += parts[i].grads[k][e];
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  out.loss *= inv;
  out.kl *= inv;
  out.clip *= inv;
  for (auto& g : out.grads)
    for (auto& e : g.data()) e *= inv;
  return out;
}

inline bool grads_finite(const StageGrad& g) {
  if (!std::isfinite(g.loss)) return false;
  for (const auto& t : g.grads)
    if (!t.all_finite()) return false;
  return true;
}

/// Prompts for iteration tau, uniform over the raw-prompt symbols.
inline std::vector<std::size_t> iteration_prompts(std::uint64_t seed, long tau, std::size_t count,
                                                  std::size_t num_prompts) {
  Rng rng = make_rng(seed, {stream_tag("prompts"), static_cast<std::uint64_t>(tau)});
  std::uniform_int_distribution<std::size_t> pick(0, num_prompts - 1);
  std::vector<std::size_t> out(count);
  for (auto& q : out) q = pick(rng);
  return out;
}

struct StepOptions {
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  /// Called with every collected tree before the update (e.g. for dumping).
  std::function<void(long, std::size_t, const RolloutTree&)> on_tree;
};

/// One Dual-GRPO iteration: collect trees under the old parameters, build
/// beta1 * L_llm + beta2 * L_dit, update each stage whose factor is non-zero,
/// then old <- current.
inline MetricsRow train_step(long tau, TrainerState& st, const TrainerConfig& cfg, const Environment& env,
                             const StepOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const RolloutSettings rs = cfg.rollout();
  const auto prompts = iteration_prompts(opt.seed, tau, cfg.prompts_per_iter, env.task.prompts);
  const std::size_t n = prompts.size();

  std::vector<RolloutTree> trees(n);
  parallel_for(n, opt.workers, [&](std::size_t i) {
    const std::uint64_t tree_seed =
        derive_seed(opt.seed, {stream_tag("tree"), static_cast<std::uint64_t>(tau), i});
    trees[i] = collect(prompts[i], rs, st.phi_old, st.lambda_old, env, tree_seed);
  });
  if (opt.on_tree)
    for (std::size_t i = 0; i < n; ++i) opt.on_tree(tau, i, trees[i]);

  std::vector<std::vector<double>> llm_adv(n);
  std::vector<std::vector<std::vector<double>>> dit_adv(n);
  MetricsRow row;
  row.iteration = tau;
  std::size_t leaves = 0, branches = 0, correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    llm_adv[i] = llm_advantages(trees[i]);
    dit_adv[i] = dit_advantages(trees[i]);
    row.diverged += trees[i].diverged;
    for (const auto& b : trees[i].branches) {
      ++branches;
      const auto m = named_mode(b.trace, env.vocab);
      correct += m && *m == env.task.correct_mode(trees[i].prompt);
      for (const auto& l : b.leaves) {
        ++leaves;
        row.r_sem += l.reward.sem;
        row.r_aes += l.reward.aes;
        row.r_con += l.reward.con;
        row.r2 += l.reward.r2_raw;
      }
    }
  }
  row.r_sem /= static_cast<double>(leaves);
  row.r_aes /= static_cast<double>(leaves);
  row.r_con /= static_cast<double>(leaves);
  row.r2 /= static_cast<double>(leaves);
  row.accuracy = static_cast<double>(correct) / static_cast<double>(branches);
  const auto [beta1, beta2] = cfg.scheduler.factors(tau);
  row.beta1 = beta1;
  row.beta2 = beta2;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<StageGrad> lg(n), dg(n);
    parallel_for(n, opt.workers, [&](std::size_t i) {
      lg[i] = llm_grad(st.phi, trees[i], llm_adv[i], st.ref.phi, cfg, env.vocab);
      dg[i] = dit_grad(st.lambda, trees[i], dit_adv[i], st.ref.lambda, cfg);
    });
    StageGrad l = average(lg);
    StageGrad d = average(dg);
    if (epoch == 0) {
      row.loss_llm = l.loss;
      row.loss_dit = d.loss;
      row.kl_llm = l.kl;
      row.kl_dit = d.kl;
      row.clip_llm = l.clip;
      row.clip_dit = d.clip;
    }
    if (!grads_finite(l) || !grads_finite(d)) {
      row.skipped = true;
      break;
    }
    if (beta1 != 0.0) {
      for (auto& g : l.grads)
        for (auto& e : g.data()) e *= beta1;
      st.opt_llm.step(st.phi.tensors(), l.grads);
    }
    if (beta2 != 0.0) {
      for (auto& g : d.grads)
        for (auto& e : g.data()) e *= beta2;
      st.opt_dit.step(st.lambda.tensors(), d.grads);
    }
  }
  st.phi_old = st.phi;
  st.lambda_old = st.lambda;
  row.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

// ---------------------------------------------------------------------------
// Evaluation

template <class R>
concept GreedyRewriter = requires(const R& r, std::size_t q, const ReasoningTrace& tr) {
  { r.decode(q) } -> std::same_as<ReasoningTrace>;
  { r.encode(tr) } -> std::same_as<ConditioningVector>;
};

template <class D>
concept ConditionalSampler = requires(const D& d, const Tensor& cond, Rng& rng) {
  { d.sample(cond, rng) } -> std::convertible_to<Point>;
};

/// Greedy decoding with the trained rewriter.
struct RewriterPolicy {
  const RewriterParams& params;
  const Vocab& vocab;
  std::size_t budget = 12;

  ReasoningTrace decode(std::size_t q) const {
    Rng unused(0);
    return sample_sequence(vocab.prompt(q), budget, 0.0, params, vocab, unused);
  }
  ConditioningVector encode(const ReasoningTrace& tr) const { return encode_condition(tr, params, vocab); }
};

/// Deterministic ODE sampling (a = 0) from a standard-normal start.
struct OdeSampler {
  const VelocityFieldParams& params;
  TimeGrid grid;

  Point sample(const Tensor& cond, Rng& rng) const {
    return sample_trajectory(cond, grid, SdeConfig{0.0, 0}, params, rng).final;
  }
};

struct EvalResult {
  double r_sem = 0.0;
  double r_aes = 0.0;
  double r_con = 0.0;
  double r2 = 0.0;
  double accuracy = 0.0;
  std::size_t prompts = 0;
};

/// Side-effect free: prompts are drawn uniformly from stream (seed,
/// "eval-prompts"), sample i uses stream (seed, "eval-sample", i).
template <GreedyRewriter R, ConditionalSampler D>
EvalResult evaluate(const R& rewriter, const D& decoder, std::size_t n, const Environment& env, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("evaluate: need at least one prompt");
  Rng prompts = make_rng(seed, {stream_tag("eval-prompts")});
  std::uniform_int_distribution<std::size_t> pick(0, env.task.prompts - 1);
  EvalResult out;
  out.prompts = n;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t q = pick(prompts);
    const ReasoningTrace tr = rewriter.decode(q);
    const ConditioningVector c = rewriter.encode(tr);
    Rng rng = make_rng(seed, {stream_tag("eval-sample"), i});
    const Point x = decoder.sample(c.value, rng);
    RewardBreakdown r = score_sample(x, q, env.task, env.layout, env.weights);
    if (c.null) {
      r.sem = 0.0;
      r.r2_raw = env.weights.aes * r.aes + env.weights.con * r.con;
    }
    out.r_sem += r.sem;
    out.r_aes += r.aes;
    out.r_con += r.con;
    out.r2 += r.r2_raw;
    const auto m = named_mode(tr, env.vocab);
    correct += m && *m == env.task.correct_mode(q);
  }
  const double dn = static_cast<double>(n);
  out.r_sem /= dn;
  out.r_aes /= dn;
  out.r_con /= dn;
  out.r2 /= dn;
  out.accuracy = static_cast<double>(correct) / dn;
  return out;
}

}  // namespace dualgrpo
