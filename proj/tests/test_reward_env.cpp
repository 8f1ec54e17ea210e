#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace dualgrpo;

namespace {

const Environment kEnv = testutil::small_env();

Point offset(const Point& c, double r, double angle) { return {c[0] + r * std::cos(angle), c[1] + r * std::sin(angle)}; }

}  // namespace

TEST(ConceptTask, TotalAndInRange) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto task = ConceptTask::make(8, 8, seed);
    EXPECT_NO_THROW(task.validate());
    std::vector<int> hits(8, 0);
    for (std::size_t q = 0; q < 8; ++q) ++hits[task.correct_mode(q)];
    for (int h : hits) EXPECT_EQ(h, 1);  // bijection when C == M
  }
  EXPECT_THROW(ConceptTask::make(8, 8, 0).correct_mode(8), std::out_of_range);
  EXPECT_EQ(ConceptTask::make(8, 8, 3).kappa, ConceptTask::make(8, 8, 3).kappa);
}

TEST(ModeLayout, SeparableDefaults) {
  const auto l = ModeLayout::make(8);
  EXPECT_EQ(l.centers.size(), 8u);
  for (const auto& c : l.centers) EXPECT_NEAR(std::sqrt(norm2(c)), 3.0, 1e-12);
  EXPECT_GT(l.min_separation(), 4 * l.width);
  EXPECT_THROW(ModeLayout::make(8, 3.0, 0.7), std::invalid_argument);
}

TEST(SemanticReward, Examples) {
  const auto& mu = kEnv.layout.centers[kEnv.task.correct_mode(2)];
  EXPECT_EQ(semantic_reward(mu, 2, kEnv.task, kEnv.layout), 1.0);
  EXPECT_NEAR(semantic_reward(offset(mu, kEnv.layout.width, 0.7), 2, kEnv.task, kEnv.layout), 0.606531, 1e-6);
  const auto& wrong = kEnv.layout.centers[(kEnv.task.correct_mode(2) + 1) % 8];
  EXPECT_LT(semantic_reward(wrong, 2, kEnv.task, kEnv.layout), std::exp(-8.0));
}

TEST(AestheticReward, Examples) {
  for (const auto& c : kEnv.layout.centers) EXPECT_EQ(aesthetic_reward(c, kEnv.layout), 1.0);
  EXPECT_NEAR(aesthetic_reward(offset(kEnv.layout.centers[5], kEnv.layout.width, 2.0), kEnv.layout), 0.606531, 1e-6);
}

TEST(ConsistencyReward, Examples) {
  EXPECT_EQ(consistency_reward({0, 0}, kEnv.layout), 1.0);
  EXPECT_EQ(consistency_reward({6, 0}, kEnv.layout), 1.0);
  EXPECT_NEAR(consistency_reward({0, -7}, kEnv.layout), 0.606531, 1e-6);
}

TEST(Rewards, BoundedAndOrderedEverywhere) {
  Rng rng(1);
  for (int i = 0; i < 20000; ++i) {
    const Point x = {8 * standard_normal(rng), 8 * standard_normal(rng)};
    const std::size_t q = static_cast<std::size_t>(i % 8);
    const auto r = score_sample(x, q, kEnv.task, kEnv.layout, kEnv.weights);
    for (double v : {r.sem, r.aes, r.con, r.r1_raw, r.r2_raw}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LE(r.sem, r.aes);
  }
}

TEST(StageRewards, SchedulerFactors) {
  const Point x = {0.5, 2.0};
  const SchedulerConfig balanced{};
  for (long tau : {0L, 1L, 500L, 100000L}) {
    const auto s = stage_rewards(x, 1, kEnv.task, kEnv.layout, kEnv.weights, tau, balanced);
    EXPECT_EQ(s.beta1, 0.5);
    EXPECT_EQ(s.beta2, 0.5);
  }
  const SchedulerConfig staged{SchedulerKind::staged, 10};
  for (long tau = 0; tau < 20; ++tau) {
    const auto s = stage_rewards(x, 1, kEnv.task, kEnv.layout, kEnv.weights, tau, staged);
    EXPECT_EQ(s.beta1, tau < 10 ? 1.0 : 0.0);
    EXPECT_EQ(s.beta2, tau < 10 ? 0.0 : 1.0);
    EXPECT_EQ((s.beta1 != 0.0) + (s.beta2 != 0.0), 1);
  }
  EXPECT_THROW(stage_rewards(x, 1, kEnv.task, kEnv.layout, kEnv.weights, 0, {SchedulerKind::staged, 0}),
               std::invalid_argument);
}

TEST(StageRewards, SemanticOnlyWeightsCollapse) {
  Rng rng(2);
  const RewardWeights w{0, 0, 1};
  for (int i = 0; i < 1000; ++i) {
    const Point x = {3 * standard_normal(rng), 3 * standard_normal(rng)};
    const auto s = stage_rewards(x, i % 8, kEnv.task, kEnv.layout, w, 0, {});
    EXPECT_EQ(s.r2_raw, s.r1_raw);
  }
}

TEST(SchedulerConfig, ParseAndPrint) {
  EXPECT_EQ(SchedulerConfig::parse("balanced"), (SchedulerConfig{SchedulerKind::balanced, 0}));
  EXPECT_EQ(SchedulerConfig::parse("staged:250"), (SchedulerConfig{SchedulerKind::staged, 250}));
  EXPECT_EQ(SchedulerConfig::parse("staged:250").to_string(), "staged:250");
  for (const char* bad : {"staged", "staged:", "staged:0", "staged:-3", "staged:12x", "greedy"})
    EXPECT_THROW(SchedulerConfig::parse(bad), std::invalid_argument) << bad;
}

TEST(SftCorpus, NoiselessIsAllCorrect) {
  Rng rng(3);
  const auto corpus = make_sft_corpus(kEnv.task, kEnv.vocab, 50, 0.0, rng);
  EXPECT_EQ(corpus.size(), 400u);
  for (const auto& r : corpus) {
    ASSERT_EQ(r.refined.size(), 1u);
    EXPECT_EQ(r.refined[0], kEnv.vocab.mode(kEnv.task.correct_mode(r.symbol)));
    EXPECT_EQ(r.cot.back(), r.refined[0]);  // the CoT ends on the named mode
  }
}

TEST(SftCorpus, UniformNoiseRate) {
  Rng rng(4);
  const auto corpus = make_sft_corpus(kEnv.task, kEnv.vocab, 1000, 0.2, rng);
  std::size_t wrong = 0;
  for (const auto& r : corpus) wrong += r.refined[0] != kEnv.vocab.mode(kEnv.task.correct_mode(r.symbol));
  EXPECT_NEAR(static_cast<double>(wrong) / corpus.size(), 0.2, 0.03);
}

TEST(SftCorpus, NoiseRateConvergesAtTenThousand) {
  Rng rng(5);
  const std::size_t per = 10000 / 8;
  const auto corpus = make_sft_corpus(kEnv.task, kEnv.vocab, per, 0.2, rng);
  std::size_t wrong = 0;
  for (const auto& r : corpus) wrong += r.refined[0] != kEnv.vocab.mode(kEnv.task.correct_mode(r.symbol));
  const double n = static_cast<double>(corpus.size());
  EXPECT_NEAR(wrong / n, 0.2, 3 * std::sqrt(0.2 * 0.8 / n));
}

TEST(SftCorpus, SymbolBiasedNoiseConcentratesOnFewPrompts) {
  Rng rng(6);
  const auto corpus = make_sft_corpus(kEnv.task, kEnv.vocab, 1000, 0.2, rng, NoiseModel::symbol_biased);
  std::vector<std::size_t> wrong(8, 0);
  std::size_t total = 0;
  for (const auto& r : corpus) {
    const bool bad = r.refined[0] != kEnv.vocab.mode(kEnv.task.correct_mode(r.symbol));
    wrong[r.symbol] += bad;
    total += bad;
  }
  EXPECT_NEAR(static_cast<double>(total) / corpus.size(), 0.2, 0.03);
  std::size_t corrupted = 0;
  for (auto w : wrong) corrupted += w > 0;
  EXPECT_EQ(corrupted, 2u);
  for (auto w : wrong)
    if (w > 0) { EXPECT_GT(w, 500u); }  // majority wrong on the corrupted prompts
}

TEST(SftCorpus, SameSeedSameCorpus) {
  Rng a(7), b(7);
  EXPECT_EQ(make_sft_corpus(kEnv.task, kEnv.vocab, 30, 0.2, a), make_sft_corpus(kEnv.task, kEnv.vocab, 30, 0.2, b));
  EXPECT_THROW(make_sft_corpus(kEnv.task, kEnv.vocab, 30, 1.0, a), std::invalid_argument);
}

TEST(OracleBound, ZeroScatterIsOne) {
  EXPECT_EQ(oracle_upper_bound(kEnv.task, kEnv.layout, kEnv.weights, 0.0, 1000), 1.0);
}

TEST(OracleBound, ScatterEqualToWidth) {
  // With sigma_x = s: E[r_sem] = E exp(-|eta|^2 / 2) = 1/2 in two dimensions.
  // Points within 3 + 6s of the origin stay inside the support, so r_con ~ 1,
  // and r_aes = r_sem unless a neighbouring center is closer (negligible mass).
  const double s = kEnv.layout.width;
  Rng rng(8);
  double sem = 0.0, aes = 0.0, con = 0.0;
  const std::size_t n = 1'000'000;
  for (std::size_t i = 0; i < n; ++i) {
    const Point x = {kEnv.layout.centers[0][0] + s * standard_normal(rng), kEnv.layout.centers[0][1] + s * standard_normal(rng)};
    sem += std::exp(-dist2(x, kEnv.layout.centers[0]) / (2 * s * s));
    aes += aesthetic_reward(x, kEnv.layout);
    con += consistency_reward(x, kEnv.layout);
  }
  EXPECT_NEAR(sem / n, 0.5, 0.002);
  const auto& w = kEnv.weights;
  const double expected = w.aes * aes / n + w.con * con / n + w.sem * 0.5;
  const double bound = oracle_upper_bound(kEnv.task, kEnv.layout, kEnv.weights, s);
  EXPECT_NEAR(bound, expected, 0.003);
  EXPECT_NEAR(bound, 0.2 * 0.5 + 0.2 * 1.0 + 0.6 * 0.5, 0.005);
}

TEST(OracleBound, MonotoneInScatter) {
  double prev = 2.0;
  for (double sigma : {0.0, 0.05, 0.1, 0.2, 0.35, 0.6, 1.0}) {
    const double b = oracle_upper_bound(kEnv.task, kEnv.layout, kEnv.weights, sigma, 200'000);
    EXPECT_LE(b, prev + 1e-12);
    prev = b;
  }
  EXPECT_THROW(oracle_upper_bound(kEnv.task, kEnv.layout, kEnv.weights, -0.1), std::invalid_argument);
}
