#pragma once

// Tree-structured experience collection: J reasoning traces per prompt, K
// decoder trajectories per trace. Rewards are outcome-based (final samples
// only); advantages are group-standardized per stage.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgrpo/flow_decoder.hpp"
#include "dualgrpo/random.hpp"
#include "dualgrpo/reward_env.hpp"
#include "dualgrpo/rewriter.hpp"

namespace dualgrpo {

struct RolloutSettings {
  std::size_t branches = 5;   // J
  std::size_t leaves = 16;    // K
  std::size_t budget = 12;    // reasoning budget
  double temperature = 1.0;
  TimeGrid grid;
  SdeConfig sde;
};

struct Leaf {
  std::vector<TransitionRecord> records;
  Point final{};
  RewardBreakdown reward;
  bool diverged = false;
};

struct Branch {
  ReasoningTrace trace;
  ConditioningVector cond;
  std::vector<Leaf> leaves;
};

struct RolloutTree {
  std::size_t prompt = 0;
  std::vector<Branch> branches;
  std::size_t diverged = 0;
};

/// Samples one tree under frozen (old) parameters. Branch j draws from
/// stream (seed, j); leaf (j, k) from stream (seed, j, k).
inline RolloutTree collect(std::size_t q, const RolloutSettings& s, const RewriterParams& phi_old,
                           const VelocityFieldParams& lambda_old, const Environment& env, std::uint64_t seed) {
  if (s.branches < 2 || s.leaves < 2) throw std::invalid_argument("collect: need J >= 2 and K >= 2");
  RolloutTree tree;
  tree.prompt = q;
  const Token q_tok = env.vocab.prompt(q);
  const std::size_t h = phi_old.hidden();
  const std::size_t rows = s.branches * s.leaves;
  Tensor cond({rows, h});
  std::vector<Rng> rngs;
  rngs.reserve(rows);
  for (std::size_t j = 0; j < s.branches; ++j) {
    Rng br = make_rng(seed, {stream_tag("branch"), j});
    Branch b;
    b.trace = sample_sequence(q_tok, s.budget, s.temperature, phi_old, env.vocab, br);
    b.cond = encode_condition(b.trace, phi_old, env.vocab);
    for (std::size_t k = 0; k < s.leaves; ++k) {
      std::copy_n(b.cond.value.data().begin(), h, cond.data().begin() + static_cast<std::ptrdiff_t>((j * s.leaves + k) * h));
      rngs.push_back(make_rng(seed, {stream_tag("leaf"), j, k}));
    }
    tree.branches.push_back(std::move(b));
  }
  auto trajectories = sample_trajectories(cond, s.grid, s.sde, lambda_old, rngs);
  for (std::size_t j = 0; j < s.branches; ++j) {
    Branch& b = tree.branches[j];
    for (std::size_t k = 0; k < s.leaves; ++k) {
      Trajectory& tr = trajectories[j * s.leaves + k];
      Leaf leaf;
      leaf.records = std::move(tr.records);
      if (!tr.finite) {
        leaf.diverged = true;
        ++tree.diverged;
      } else {
        leaf.final = tr.final;
        leaf.reward = score_sample(leaf.final, q, env.task, env.layout, env.weights);
        if (b.cond.null) {
          leaf.reward.sem = 0.0;
          leaf.reward.r1_raw = 0.0;
          leaf.reward.r2_raw = env.weights.aes * leaf.reward.aes + env.weights.con * leaf.reward.con;
        }
      }
      b.leaves.push_back(std::move(leaf));
    }
  }
  return tree;
}

inline constexpr double kStdFloor = 1e-6;

/// (v - mean) / max(std, eps) with the n-1 sample standard deviation.
inline std::vector<double> normalize_group(const std::vector<double>& values, double eps = kStdFloor) {
  if (values.size() < 2) throw std::invalid_argument("normalize_group: need at least two values");
  if (!(eps > 0.0)) throw std::invalid_argument("normalize_group: eps must be positive");
  // Exact zeros for a constant group; the mean of equal doubles can be off by an ulp.
  if (std::ranges::all_of(values, [&](double v) { return v == values.front(); })) {
    return std::vector<double>(values.size(), 0.0);
  }
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(ss / (n - 1.0)), eps);
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back((v - mean) / sd);
  return out;
}

inline double branch_semantic_score(const Branch& b) {
  double s = 0.0;
  for (const auto& l : b.leaves) s += l.reward.r1_raw;
  return s / static_cast<double>(b.leaves.size());
}

/// One advantage per branch, shared by all of that branch's tokens.
inline std::vector<double> llm_advantages(const RolloutTree& tree, double eps = kStdFloor) {
  std::vector<double> scores;
  for (const auto& b : tree.branches) scores.push_back(branch_semantic_score(b));
  return normalize_group(scores, eps);
}

/// One advantage per leaf, standardized among the K siblings of a branch.
inline std::vector<std::vector<double>> dit_advantages(const RolloutTree& tree, double eps = kStdFloor) {
  std::vector<std::vector<double>> out;
  for (const auto& b : tree.branches) {
    std::vector<double> r;
    for (const auto& l : b.leaves) r.push_back(l.reward.r2_raw);
    out.push_back(normalize_group(r, eps));
  }
  return out;
}

}  // namespace dualgrpo
