#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "test_util.hpp"

using namespace dualgrpo;

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

double sample_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

struct Fixture {
  Environment env = testutil::small_env();
  RewriterParams phi;
  VelocityFieldParams lambda;
  Fixture() {
    Rng rng(1);
    phi = RewriterParams::init(24, 8, rng);
    lambda = VelocityFieldParams::init(8, 16, rng);
  }
};

RolloutTree tree_with(const std::vector<std::vector<double>>& r1, const std::vector<std::vector<double>>& r2) {
  RolloutTree t;
  for (std::size_t j = 0; j < r1.size(); ++j) {
    Branch b;
    for (std::size_t k = 0; k < r1[j].size(); ++k) {
      Leaf l;
      l.reward.sem = l.reward.r1_raw = r1[j][k];
      l.reward.r2_raw = r2[j][k];
      b.leaves.push_back(l);
    }
    t.branches.push_back(b);
  }
  return t;
}

}  // namespace

TEST(NormalizeGroup, HandExamples) {
  const auto a = normalize_group({1, 2, 3});
  EXPECT_NEAR(a[0], -1.0, 1e-15);
  EXPECT_NEAR(a[1], 0.0, 1e-15);
  EXPECT_NEAR(a[2], 1.0, 1e-15);
  for (double v : normalize_group({0.4, 0.4, 0.4})) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(normalize_group({1.0}), std::invalid_argument);
  EXPECT_THROW(normalize_group({1.0, 2.0}, 0.0), std::invalid_argument);
}

TEST(NormalizeGroup, StandardizedOnRandomGroups) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 30);
    std::vector<double> v(n);
    for (auto& x : v) x = uniform01(rng);
    const auto a = normalize_group(v);
    EXPECT_LT(std::abs(mean_of(a)), 1e-9);
    EXPECT_LT(std::abs(sample_std(a) - 1.0), 1e-9);
  }
}

TEST(NormalizeGroup, PositiveScalingInvariant) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(8);
    for (auto& x : v) x = uniform01(rng);
    const double c = 0.01 + 10 * uniform01(rng);
    std::vector<double> w = v;
    for (auto& x : w) x *= c;
    const auto a = normalize_group(v), b = normalize_group(w);
    for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(Advantages, LlmTwoBranches) {
  const auto t = tree_with({{0.1, 0.3}, {0.7, 0.9}}, {{0, 0}, {0, 0}});
  const auto a = llm_advantages(t);
  EXPECT_NEAR(a[0], -0.707107, 1e-6);
  EXPECT_NEAR(a[1], 0.707107, 1e-6);
}

TEST(Advantages, LlmEqualBranchesAreZero) {
  const auto t = tree_with({{0.2, 0.4}, {0.4, 0.2}, {0.3, 0.3}}, {{0, 0}, {0, 0}, {0, 0}});
  for (double a : llm_advantages(t)) EXPECT_NEAR(a, 0.0, 1e-9);
}

TEST(Advantages, LlmPermutationEquivariant) {
  const auto t = tree_with({{0.1, 0.2}, {0.9, 0.8}, {0.5, 0.3}}, {{0, 0}, {0, 0}, {0, 0}});
  const auto p = tree_with({{0.5, 0.3}, {0.1, 0.2}, {0.9, 0.8}}, {{0, 0}, {0, 0}, {0, 0}});
  const auto a = llm_advantages(t), b = llm_advantages(p);
  EXPECT_NEAR(b[0], a[2], 1e-12);
  EXPECT_NEAR(b[1], a[0], 1e-12);
  EXPECT_NEAR(b[2], a[1], 1e-12);
}

TEST(Advantages, DitTwoLeaves) {
  const auto t = tree_with({{0, 0}, {0, 0}}, {{0.1, 0.9}, {0.5, 0.5}});
  const auto a = dit_advantages(t);
  EXPECT_NEAR(a[0][0], -0.707107, 1e-6);
  EXPECT_NEAR(a[0][1], 0.707107, 1e-6);
  EXPECT_EQ(a[1][0], 0.0);
  EXPECT_EQ(a[1][1], 0.0);
}

TEST(Advantages, DitGroupsAreLocal) {
  const auto t = tree_with({{0, 0, 0}, {0, 0, 0}}, {{0.1, 0.4, 0.9}, {0.5, 0.2, 0.3}});
  const auto u = tree_with({{0, 0, 0}, {0, 0, 0}}, {{0.1, 0.4, 0.9}, {0.0, 0.8, 0.1}});
  EXPECT_EQ(dit_advantages(t)[0], dit_advantages(u)[0]);
}

TEST(Collect, DefaultShape) {
  Fixture f;
  const RolloutSettings s;
  const auto t = collect(3, s, f.phi, f.lambda, f.env, 11);
  EXPECT_EQ(t.prompt, 3u);
  ASSERT_EQ(t.branches.size(), 5u);
  std::size_t leaves = 0;
  for (const auto& b : t.branches) {
    EXPECT_EQ(b.leaves.size(), 16u);
    EXPECT_EQ(b.trace.log_probs.size(), b.trace.tokens.size());
    for (const auto& l : b.leaves) {
      ++leaves;
      EXPECT_EQ(l.records.size(), s.grid.steps);
      for (const auto& r : l.records)
        if (r.stochastic) { EXPECT_TRUE(std::isfinite(r.log_prob)); }
      // Outcome-based: rewards are a function of the final sample only.
      if (!b.cond.null) { EXPECT_EQ(l.reward, score_sample(l.final, 3, f.env.task, f.env.layout, f.env.weights)); }
    }
  }
  EXPECT_EQ(leaves, 80u);
}

TEST(Collect, DeterministicTree) {
  Fixture f;
  RolloutSettings s;
  s.branches = 2;
  s.leaves = 2;
  auto dump = [](const RolloutTree& t) {
    std::string out;
    for (const auto& b : t.branches) {
      for (auto z : b.trace.tokens) out += std::to_string(z) + ",";
      for (const auto& l : b.leaves)
        for (const auto& r : l.records) out.append(reinterpret_cast<const char*>(&r.next), sizeof r.next);
    }
    return out;
  };
  EXPECT_EQ(dump(collect(1, s, f.phi, f.lambda, f.env, 5)), dump(collect(1, s, f.phi, f.lambda, f.env, 5)));
  EXPECT_NE(dump(collect(1, s, f.phi, f.lambda, f.env, 5)), dump(collect(1, s, f.phi, f.lambda, f.env, 6)));
  s.branches = 1;
  EXPECT_THROW(collect(1, s, f.phi, f.lambda, f.env, 5), std::invalid_argument);
}

TEST(Collect, IllFormedBranchGetsNullSemanticReward) {
  Fixture f;
  // A policy that always emits the same filler never reaches EOS.
  RewriterParams stuck = RewriterParams::zeros(24, 8);
  stuck.bias.data().assign(8, 1.0);
  for (std::size_t i = 0; i < 8; ++i) stuck.w_out.at(i, f.env.vocab.filler(0)) = 50.0;
  const auto t = collect(0, RolloutSettings{}, stuck, f.lambda, f.env, 3);
  for (const auto& b : t.branches) {
    EXPECT_TRUE(b.cond.null);
    for (const auto& l : b.leaves) {
      EXPECT_EQ(l.reward.sem, 0.0);
      EXPECT_EQ(l.reward.r1_raw, 0.0);
    }
  }
  for (double a : llm_advantages(t)) EXPECT_EQ(a, 0.0);
}

TEST(Collect, DivergedLeafScoresZero) {
  Fixture f;
  VelocityFieldParams bad = VelocityFieldParams::zeros(8, 4);
  bad.b3[0] = std::numeric_limits<double>::infinity();
  RolloutSettings s;
  s.branches = 2;
  s.leaves = 2;
  const auto t = collect(0, s, f.phi, bad, f.env, 4);
  EXPECT_EQ(t.diverged, 4u);
  for (const auto& b : t.branches)
    for (const auto& l : b.leaves) {
      EXPECT_TRUE(l.diverged);
      EXPECT_EQ(l.reward.r2_raw, 0.0);
      EXPECT_EQ(l.reward.r1_raw, 0.0);
    }
}
