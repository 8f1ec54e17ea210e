#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "test_util.hpp"

using namespace dualgrpo;

namespace {

template <class Params>
Params perturbed(Params p, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (Tensor* t : p.tensors())
    for (auto& v : t->data()) v += scale * standard_normal(rng);
  return p;
}

template <class Params>
bool bit_identical(const Params& a, const Params& b) {
  const auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->shape() != tb[i]->shape()) return false;
    if (std::memcmp(ta[i]->data().data(), tb[i]->data().data(), ta[i]->size() * sizeof(double)) != 0) return false;
  }
  return true;
}

template <class Params>
std::vector<Tensor> points_of(const Params& p) {
  std::vector<Tensor> out;
  for (const Tensor* t : p.tensors()) out.push_back(*t);
  return out;
}

bool same_row(const MetricsRow& a, const MetricsRow& b) {
  auto bits = [](const MetricsRow& r) {
    return std::vector<double>{r.r_sem, r.r_aes, r.r_con, r.r2, r.accuracy, r.kl_llm, r.kl_dit,
                               r.clip_llm, r.clip_dit, r.loss_llm, r.loss_dit, r.beta1, r.beta2};
  };
  const auto x = bits(a), y = bits(b);
  return a.iteration == b.iteration && a.diverged == b.diverged && a.skipped == b.skipped &&
         std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

TrainerConfig micro_config() {
  TrainerConfig c;
  c.branches = 2;
  c.leaves = 2;
  c.steps = 4;
  c.window = 2;
  c.budget = 8;
  c.noise = 0.5;
  c.prompts_per_iter = 2;
  return c;
}

/// More branches per tree, so some tree has at least two well-formed ones.
TrainerConfig wider(TrainerConfig c) {
  c.branches = 4;
  c.prompts_per_iter = 4;
  return c;
}

struct Micro {
  Environment env = testutil::small_env();
  TrainerConfig cfg = micro_config();
  RewriterParams phi_old;
  VelocityFieldParams lambda_old;
  RolloutTree tree;

  explicit Micro(std::uint64_t seed = 1) {
    Rng rng(seed);
    phi_old = RewriterParams::init(24, 4, rng);
    // A short clone of a half-wrong corpus: traces are mostly well-formed
    // and name different modes, so advantages are non-trivial.
    const auto corpus = make_sft_corpus(env.task, env.vocab, 8, 0.5, rng);
    Adam opt({0.05});
    for (std::size_t s = 0; s < 200; ++s) {
      std::vector<SftRecord> batch;
      for (std::size_t i = 0; i < 16; ++i) batch.push_back(corpus[(s * 16 + i) % corpus.size()]);
      sft_step(batch, phi_old, opt, env.vocab);
    }
    lambda_old = VelocityFieldParams::init(4, 6, rng);
    tree = collect(2, cfg.rollout(), phi_old, lambda_old, env, seed);
  }
};

/// Greedy rewriter stub that names a fixed mode per prompt.
struct TableRewriter {
  const Environment& env;
  std::vector<std::size_t> names;  // prompt -> named mode

  ReasoningTrace decode(std::size_t q) const {
    ReasoningTrace tr;
    tr.prompt = env.vocab.prompt(q);
    tr.tokens = {env.vocab.filler(0), env.vocab.sep(), env.vocab.mode(names[q]), env.vocab.eos()};
    tr.log_probs.assign(tr.tokens.size(), 0.0);
    finalize_trace(tr, env.vocab);
    return tr;
  }
  ConditioningVector encode(const ReasoningTrace& tr) const {
    Tensor v = Tensor::zeros(1, env.task.modes);
    v[*named_mode(tr, env.vocab)] = 1.0;
    return {v, false};
  }
};

/// Rewriter stub naming a uniformly random mode on every call.
struct RandomRewriter {
  const Environment& env;
  mutable Rng rng{99};

  ReasoningTrace decode(std::size_t q) const {
    const std::size_t m = std::uniform_int_distribution<std::size_t>(0, env.task.modes - 1)(rng);
    return TableRewriter{env, std::vector<std::size_t>(env.task.prompts, m)}.decode(q);
  }
  ConditioningVector encode(const ReasoningTrace& tr) const { return TableRewriter{env, {}}.encode(tr); }
};

/// Decoder stub that lands exactly on the center of the one-hot mode.
struct CenterDecoder {
  const Environment& env;
  Point sample(const Tensor& cond, Rng&) const {
    for (std::size_t k = 0; k < cond.size(); ++k)
      if (cond[k] == 1.0) return env.layout.centers[k];
    return {0.0, 0.0};
  }
};

}  // namespace

TEST(LlmLoss, ZeroWhenAllPoliciesCoincide) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    Micro mm(10 + s);
    Tape t;
    const auto adv = llm_advantages(mm.tree);
    const StageLoss l = llm_loss(RewriterVars::leaves(t, mm.phi_old), mm.tree, adv, mm.phi_old, 0.2, 0.01, mm.env.vocab);
    EXPECT_NEAR(t.value(l.value).item(), 0.0, 1e-12);
    EXPECT_NEAR(l.kl, 0.0, 1e-15);
    EXPECT_EQ(l.clip_fraction, 0.0);
  }
}

TEST(LlmLoss, MissingStoredLogProbRejected) {
  Micro m;
  m.tree.branches[1].trace.log_probs.pop_back();
  Tape t;
  const std::vector<double> adv = {1.0, -1.0};
  EXPECT_THROW(llm_loss(RewriterVars::leaves(t, m.phi_old), m.tree, adv, m.phi_old, 0.2, 0.01, m.env.vocab),
               std::invalid_argument);
}

TEST(LlmLoss, MatchesHandComputedSurrogate) {
  Micro m;
  const RewriterParams phi = perturbed(m.phi_old, 3, 0.05);
  const RewriterParams ref = perturbed(m.phi_old, 4, 0.05);
  const std::vector<double> adv = {0.8, -0.8};
  const double eps = 0.2, beta = 0.1;
  Tape t;
  const StageLoss l = llm_loss(RewriterVars::leaves(t, phi), m.tree, adv, ref, eps, beta, m.env.vocab);
  double expected = 0.0;
  for (std::size_t j = 0; j < 2; ++j) {
    const auto& tr = m.tree.branches[j].trace;
    const auto lp_new = sequence_log_prob(tr, phi, m.env.vocab);
    std::vector<Token> prefix;
    for (std::size_t p = 0; p < tr.tokens.size(); ++p) {
      const double r = std::exp(lp_new[p] - tr.log_probs[p]);
      const double surr = -std::min(r * adv[j], std::clamp(r, 1 - eps, 1 + eps) * adv[j]);
      const Tensor a = forward_logits(prefix, tr.prompt, phi, m.env.vocab);
      const Tensor b = forward_logits(prefix, tr.prompt, ref, m.env.vocab);
      double kl = 0.0;
      for (std::size_t v = 0; v < a.size(); ++v) kl += std::exp(a[v]) * (a[v] - b[v]);
      expected += (surr + beta * kl) / (2.0 * tr.tokens.size());
      prefix.push_back(tr.tokens[p]);
    }
  }
  EXPECT_NEAR(t.value(l.value).item(), expected, 1e-12);
}

TEST(DitLoss, ZeroWhenAllPoliciesCoincide) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    Micro m(20 + s);
    Tape t;
    const auto adv = dit_advantages(m.tree);
    const StageLoss l =
        dit_loss(DecoderVars::leaves(t, m.lambda_old), m.tree, adv, m.lambda_old, m.cfg.noise, 1e-4, 0.01);
    EXPECT_NEAR(t.value(l.value).item(), 0.0, 1e-12);
    EXPECT_EQ(l.kl, 0.0);
    EXPECT_EQ(l.clip_fraction, 0.0);
  }
}

TEST(DitLoss, OnlyWindowStepsContribute) {
  Environment env = testutil::small_env();
  TrainerConfig c;  // m = 10, W = 2
  c.branches = 3;
  c.leaves = 4;
  Rng rng(5);
  const auto phi = RewriterParams::init(24, 4, rng);
  const auto lambda = VelocityFieldParams::init(4, 6, rng);
  const auto tree = collect(1, c.rollout(), phi, lambda, env, 6);
  Tape t;
  const StageLoss l = dit_loss(DecoderVars::leaves(t, lambda), tree, dit_advantages(tree), lambda, c.noise, 1e-4, 0.01);
  EXPECT_EQ(l.terms, 3u * 4u * 2u);
}

TEST(DitLoss, ClipFractionCountsRatiosOutsideWidth) {
  Micro m;
  const auto lambda = perturbed(m.lambda_old, 7, 0.01);
  Tape t;
  const auto adv = dit_advantages(m.tree);
  const StageLoss l = dit_loss(DecoderVars::leaves(t, lambda), m.tree, adv, m.lambda_old, m.cfg.noise, 1e-4, 0.0);
  std::size_t outside = 0, total = 0;
  for (const auto& b : m.tree.branches)
    for (const auto& leaf : b.leaves)
      for (const auto& r : leaf.records) {
        if (!r.stochastic) continue;
        const double ratio = std::exp(transition_log_prob(r, b.cond.value, lambda, m.cfg.noise) - r.log_prob);
        outside += std::abs(ratio - 1.0) > 1e-4;
        ++total;
      }
  EXPECT_EQ(l.terms, total);
  EXPECT_NEAR(l.clip_fraction, static_cast<double>(outside) / total, 1e-15);
}

TEST(Surrogate, UnclippedInsideTrustRegion) {
  Rng rng(8);
  for (int i = 0; i < 2000; ++i) {
    const double eps = 0.01 + 0.5 * uniform01(rng);
    const double r = 1.0 + (2 * uniform01(rng) - 1) * eps;
    const double a = 4 * (uniform01(rng) - 0.5);
    Tape t;
    const double s = t.value(ppo_surrogate(t.constant(Tensor::scalar(std::log(r))), Tensor::scalar(a), eps)).item();
    EXPECT_NEAR(s, -r * a, 1e-12);
  }
}

TEST(GradCheck, StageLossesOnMicroInstance) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Micro m(seed);
    const RewriterParams phi = perturbed(m.phi_old, 100 + seed, 0.02);
    const RewriterParams phi_ref = perturbed(m.phi_old, 200 + seed, 0.05);
    const VelocityFieldParams lambda = perturbed(m.lambda_old, 300 + seed, 0.002);
    const VelocityFieldParams lambda_ref = perturbed(m.lambda_old, 400 + seed, 0.01);
    const std::vector<double> adv = {0.7, -0.7};
    const std::vector<std::vector<double>> dadv = {{1.0, -1.0}, {-0.5, 0.5}};
    // Wide clip widths keep every ratio off the surrogate's kinks.
    auto fl = [&](Tape&, std::span<const Var> v) {
      return llm_loss(RewriterVars{v[0], v[1], v[2], v[3], v[4]}, m.tree, adv, phi_ref, 10.0, 0.3, m.env.vocab).value;
    };
    auto fd = [&](Tape&, std::span<const Var> v) {
      return dit_loss(DecoderVars{v[0], v[1], v[2], v[3], v[4], v[5], v[6]}, m.tree, dadv, lambda_ref, m.cfg.noise, 10.0,
                      0.3)
          .value;
    };
    EXPECT_LT(grad_check(fl, points_of(phi), 1e-6), 1e-3) << seed;
    EXPECT_LT(grad_check(fd, points_of(lambda), 1e-6), 1e-3) << seed;
  }
}

TEST(TrainStep, ZeroAdvantagesWithMatchingReferenceGiveZeroGradients) {
  Micro m;
  const std::vector<double> adv(2, 0.0);
  const std::vector<std::vector<double>> dadv(2, std::vector<double>(2, 0.0));
  const StageGrad l = llm_grad(m.phi_old, m.tree, adv, m.phi_old, m.cfg, m.env.vocab);
  const StageGrad d = dit_grad(m.lambda_old, m.tree, dadv, m.lambda_old, m.cfg);
  for (const auto& g : l.grads)
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
  for (const auto& g : d.grads)
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
  RewriterParams phi = m.phi_old;
  Adam opt({1e-2});
  opt.step(phi.tensors(), l.grads);
  EXPECT_TRUE(bit_identical(phi, m.phi_old));
}

TEST(TrainStep, ZeroAdvantagesLeaveOnlyKlGradient) {
  Micro m;
  const RewriterParams ref = perturbed(m.phi_old, 9, 0.05);
  const std::vector<double> adv(2, 0.0);
  TrainerConfig c = m.cfg;
  c.kl_llm = 0.0;
  const StageGrad none = llm_grad(m.phi_old, m.tree, adv, ref, c, m.env.vocab);
  for (const auto& g : none.grads)
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
  c.kl_llm = 0.5;
  const StageGrad with_kl = llm_grad(m.phi_old, m.tree, adv, ref, c, m.env.vocab);
  double norm = 0.0;
  for (const auto& g : with_kl.grads)
    for (double v : g.data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(TrainStep, BalancedUpdatesBothStages) {
  Micro m;
  const TrainerConfig c = wider(m.cfg);
  TrainerState st = TrainerState::start(m.phi_old, m.lambda_old, c);
  const MetricsRow row = train_step(0, st, c, m.env, {1, 77, {}});
  EXPECT_EQ(row.beta1, 0.5);
  EXPECT_EQ(row.beta2, 0.5);
  EXPECT_FALSE(bit_identical(st.phi, m.phi_old));
  EXPECT_FALSE(bit_identical(st.lambda, m.lambda_old));
  EXPECT_TRUE(bit_identical(st.phi_old, st.phi));
  EXPECT_TRUE(bit_identical(st.lambda_old, st.lambda));
  EXPECT_TRUE(bit_identical(st.ref.phi, m.phi_old));
  EXPECT_TRUE(bit_identical(st.ref.lambda, m.lambda_old));
}

TEST(TrainStep, StagedSchedulerGatesEachStage) {
  Micro m;
  TrainerConfig c = wider(m.cfg);
  c.scheduler = {SchedulerKind::staged, 3};
  TrainerState st = TrainerState::start(m.phi_old, m.lambda_old, c);
  for (long tau = 0; tau < 6; ++tau) {
    const RewriterParams phi_before = st.phi;
    const VelocityFieldParams lambda_before = st.lambda;
    const MetricsRow row = train_step(tau, st, c, m.env, {1, 78, {}});
    if (tau < 3) {
      EXPECT_EQ(row.beta2, 0.0);
      EXPECT_TRUE(bit_identical(st.lambda, lambda_before)) << tau;
      EXPECT_FALSE(bit_identical(st.phi, phi_before)) << tau;
    } else {
      EXPECT_EQ(row.beta1, 0.0);
      EXPECT_TRUE(bit_identical(st.phi, phi_before)) << tau;
      EXPECT_FALSE(bit_identical(st.lambda, lambda_before)) << tau;
    }
  }
}

TEST(TrainStep, NonFiniteLossSkipsIteration) {
  Micro m;
  RewriterParams broken = m.phi_old;
  broken.w_out[3] = std::numeric_limits<double>::quiet_NaN();
  TrainerState st = TrainerState::start(broken, m.lambda_old, m.cfg);
  const MetricsRow row = train_step(0, st, m.cfg, m.env, {1, 79, {}});
  EXPECT_TRUE(row.skipped);
  EXPECT_TRUE(bit_identical(st.phi, broken));
  EXPECT_TRUE(bit_identical(st.lambda, m.lambda_old));
  EXPECT_EQ(st.opt_llm.steps(), 0);
  EXPECT_EQ(st.opt_dit.steps(), 0);
}

TEST(TrainStep, WorkerCountDoesNotChangeResults) {
  Micro m;
  TrainerConfig c = m.cfg;
  c.prompts_per_iter = 5;
  TrainerState a = TrainerState::start(m.phi_old, m.lambda_old, c);
  TrainerState b = TrainerState::start(m.phi_old, m.lambda_old, c);
  for (long tau = 0; tau < 3; ++tau) {
    MetricsRow ra = train_step(tau, a, c, m.env, {1, 80, {}});
    MetricsRow rb = train_step(tau, b, c, m.env, {4, 80, {}});
    EXPECT_TRUE(same_row(ra, rb)) << tau;
  }
  EXPECT_TRUE(bit_identical(a.phi, b.phi));
  EXPECT_TRUE(bit_identical(a.lambda, b.lambda));
}

TEST(TrainStep, MetricsAreMeansOverTheBatch) {
  Micro m;
  TrainerState st = TrainerState::start(m.phi_old, m.lambda_old, m.cfg);
  std::vector<RolloutTree> trees;
  StepOptions opt{1, 81, [&](long, std::size_t, const RolloutTree& t) { trees.push_back(t); }};
  const MetricsRow row = train_step(0, st, m.cfg, m.env, opt);
  ASSERT_EQ(trees.size(), m.cfg.prompts_per_iter);
  double sem = 0.0, n = 0.0, correct = 0.0, branches = 0.0;
  for (const auto& t : trees)
    for (const auto& b : t.branches) {
      const auto named = named_mode(b.trace, m.env.vocab);
      correct += named && *named == m.env.task.correct_mode(t.prompt);
      ++branches;
      for (const auto& l : b.leaves) {
        sem += l.reward.sem;
        ++n;
      }
    }
  EXPECT_NEAR(row.r_sem, sem / n, 1e-15);
  EXPECT_NEAR(row.accuracy, correct / branches, 1e-15);
}

TEST(Evaluate, OracleStubsArePerfect) {
  const Environment env = testutil::small_env();
  TableRewriter oracle{env, env.task.kappa};
  const EvalResult e = evaluate(oracle, CenterDecoder{env}, 200, env, 1);
  EXPECT_EQ(e.accuracy, 1.0);
  EXPECT_EQ(e.r_sem, 1.0);
  EXPECT_EQ(e.r2, 1.0);
}

TEST(Evaluate, RandomRewriterNearChance) {
  const Environment env = testutil::small_env();
  RandomRewriter random{env};
  const std::size_t n = 4000;
  const EvalResult e = evaluate(random, CenterDecoder{env}, n, env, 2);
  const double p = 1.0 / 8.0;
  EXPECT_NEAR(e.accuracy, p, 4 * std::sqrt(p * (1 - p) / n));
  EXPECT_NEAR(e.r_sem, e.accuracy, 1e-8);  // stub decoder lands on the named center
}

TEST(Evaluate, SideEffectFreeAndRepeatable) {
  Micro m;
  const RewriterParams phi = m.phi_old;
  const VelocityFieldParams lambda = m.lambda_old;
  const RewriterPolicy pol{phi, m.env.vocab, 12};
  const OdeSampler ode{lambda, TimeGrid{10, 1e-3}};
  const EvalResult a = evaluate(pol, ode, 50, m.env, 3);
  const EvalResult b = evaluate(pol, ode, 50, m.env, 3);
  EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0);
  EXPECT_TRUE(bit_identical(phi, m.phi_old));
  EXPECT_TRUE(bit_identical(lambda, m.lambda_old));
}

TEST(TrainerConfig, ValidationNamesField) {
  TrainerConfig c;
  c.window = 11;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.branches = 1;
  try {
    c.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("trainer.branches"), std::string::npos);
  }
}
