#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace dualgrpo;

namespace {

const Environment kEnv = testutil::small_env();

double loss_at(const RewriterParams& phi, const std::vector<SftRecord>& batch) {
  Tape t;
  return t.value(sft_loss(RewriterVars::constants(t, phi), batch, kEnv.vocab)).item();
}

ExperimentConfig sft_config(double rho, NoiseModel model) {
  ExperimentConfig c;
  c.run.seed = 3;
  c.corpus.noise = rho;
  c.corpus.model = model;
  return c;
}

}  // namespace

TEST(SftLoss, UniformPolicyCostsLogVocab) {
  Rng rng(1);
  const auto corpus = make_sft_corpus(kEnv.task, kEnv.vocab, 4, 0.0, rng);
  EXPECT_NEAR(loss_at(RewriterParams::zeros(24, 16), corpus), std::log(24.0), 1e-12);
  const double init = loss_at(RewriterParams::init(24, 32, rng), corpus);
  EXPECT_LT(std::abs(init - std::log(24.0)) / std::log(24.0), 0.05);
}

TEST(SftLoss, NonNegativeAndDifferentiable) {
  Rng rng(2);
  const auto corpus = make_sft_corpus(kEnv.task, kEnv.vocab, 2, 0.2, rng);
  for (int i = 0; i < 20; ++i) {
    RewriterParams phi = RewriterParams::init(24, 6, rng);
    for (auto& v : phi.w_out.data()) v = 3 * standard_normal(rng);
    EXPECT_GE(loss_at(phi, corpus), 0.0);
  }
  const RewriterParams phi = RewriterParams::init(24, 4, rng);
  const std::vector<SftRecord> batch(corpus.begin(), corpus.begin() + 3);
  auto f = [&](Tape&, std::span<const Var> v) {
    return sft_loss(RewriterVars{v[0], v[1], v[2], v[3], v[4]}, batch, kEnv.vocab);
  };
  std::vector<Tensor> points;
  for (const Tensor* t : phi.tensors()) points.push_back(*t);
  EXPECT_LT(grad_check(f, points, 1e-6), 1e-4);
}

TEST(SftStep, MemorizesSingleRecordMonotonically) {
  Rng rng(3);
  RewriterParams phi = RewriterParams::init(24, 16, rng);
  const std::vector<SftRecord> one = {make_record(5, kEnv.task.correct_mode(5), kEnv.vocab)};
  Adam opt({1e-2});
  double prev = sft_step(one, phi, opt, kEnv.vocab);
  for (int s = 0; s < 150; ++s) {
    const double l = sft_step(one, phi, opt, kEnv.vocab);
    EXPECT_LT(l, prev) << s;
    prev = l;
  }
  EXPECT_LT(loss_at(phi, one), 0.05);
}

TEST(SftStep, MalformedRecordIsReportedByIndex) {
  Rng rng(4);
  RewriterParams phi = RewriterParams::init(24, 4, rng);
  const RewriterParams before = phi;
  auto batch = make_sft_corpus(kEnv.task, kEnv.vocab, 1, 0.0, rng);
  batch[2].refined.clear();
  Adam opt;
  try {
    sft_step(batch, phi, opt, kEnv.vocab);
    FAIL();
  } catch (const MalformedRecord& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  EXPECT_EQ(phi, before);
  batch[2] = make_record(0, 0, kEnv.vocab);
  batch[5].cot.push_back(kEnv.vocab.sep());
  try {
    sft_step(batch, phi, opt, kEnv.vocab);
    FAIL();
  } catch (const MalformedRecord& e) {
    EXPECT_EQ(e.index(), 5u);
  }
  batch[5] = make_record(0, 0, kEnv.vocab);
  batch[6].symbol = 8;
  EXPECT_THROW(sft_step(batch, phi, opt, kEnv.vocab), MalformedRecord);
  EXPECT_THROW(sft_step(std::vector<SftRecord>{}, phi, opt, kEnv.vocab), std::invalid_argument);
}

TEST(Drift, CosineIdentities) {
  const Tensor a = Tensor::row({1.0, 2.0, -0.5});
  EXPECT_NEAR(cosine_distance(a, a), 0.0, 1e-15);
  EXPECT_NEAR(cosine_distance(Tensor::row({1, 0, 0}), Tensor::row({0, 3, 0})), 1.0, 1e-15);
  EXPECT_NEAR(cosine_distance(a, Tensor::row({-1.0, -2.0, 0.5})), 2.0, 1e-15);
  EXPECT_THROW(cosine_distance(a, Tensor::row({1.0})), ShapeError);
}

TEST(Drift, ZeroForIdenticalParams) {
  Rng rng(5);
  const RewriterParams phi = RewriterParams::init(24, 8, rng);
  std::vector<SftRecord> probes;
  for (std::size_t q = 0; q < 8; ++q) probes.push_back(make_record(q, kEnv.task.correct_mode(q), kEnv.vocab));
  EXPECT_EQ(embedding_drift(phi, phi, probes, kEnv.vocab), 0.0);
  const RewriterParams other = RewriterParams::init(24, 8, rng);
  const double d = embedding_drift(phi, other, probes, kEnv.vocab);
  EXPECT_GT(d, 0.0);
  EXPECT_LE(d, 2.0);
}

TEST(SftActivation, NoiselessCorpusReachesPerfectAccuracy) {
  const ExperimentConfig c = sft_config(0.0, NoiseModel::uniform);
  ASSERT_LE(c.sft.steps, 3000u);
  const Environment env = make_environment(c);
  const SftResult r = run_sft(c, env, generate_corpus(c, env));
  EXPECT_LT(std::abs(r.report.initial_loss - std::log(24.0)) / std::log(24.0), 0.05);
  for (std::size_t q = 0; q < env.task.prompts; ++q) EXPECT_EQ(r.report.accuracy_by_symbol[q], 1.0) << q;
  EXPECT_EQ(r.report.accuracy, 1.0);
}

TEST(SftActivation, SymbolBiasedNoiseLeavesHeadroom) {
  const ExperimentConfig c = sft_config(0.2, NoiseModel::symbol_biased);
  const Environment env = make_environment(c);
  const SftResult r = run_sft(c, env, generate_corpus(c, env));
  EXPECT_LT(r.report.accuracy, 1.0);
  std::size_t wrong = 0;
  for (double a : r.report.accuracy_by_symbol) wrong += a < 1.0;
  EXPECT_GE(wrong, 1u);
}

TEST(Pretrain, ConditionTableRows) {
  Rng rng(6);
  const RewriterParams phi = RewriterParams::init(24, 5, rng);
  const Tensor table = condition_table(phi, kEnv);
  ASSERT_EQ(table.shape(), (Shape{64, 5}));
  for (std::size_t q : {0u, 3u, 7u})
    for (std::size_t k : {1u, 6u}) {
      const auto cv = encode_condition(record_trace(make_record(q, k, kEnv.vocab), kEnv.vocab), phi, kEnv.vocab);
      for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(table.at(q * 8 + k, j), cv.value[j]);
    }
}

TEST(Pretrain, FlowMatchingLossDecreases) {
  Rng rng(7);
  const RewriterParams phi = RewriterParams::init(24, 8, rng);
  const Tensor table = condition_table(phi, kEnv);
  VelocityFieldParams lambda = VelocityFieldParams::init(8, 32, rng);
  Adam opt({3e-3});
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 400; ++s) {
    const double l = pretrain_step(lambda, opt, table, kEnv, 128, 1e-3, rng);
    if (s < 20) first += l / 20;
    if (s >= 380) last += l / 20;
  }
  EXPECT_LT(last, 0.5 * first);
}
