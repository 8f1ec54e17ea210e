#pragma once

// Synthetic reward world. A hidden knowledge table maps each raw prompt to a
// concept (mode); concepts are Gaussian bumps on a circle in R^2 and the
// three reward components are analytic functions of the final sample.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dualgrpo/random.hpp"
#include "dualgrpo/vocab.hpp"

namespace dualgrpo {

using Point = std::array<double, 2>;

inline double norm2(const Point& p) { return p[0] * p[0] + p[1] * p[1]; }
inline double dist2(const Point& a, const Point& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1];
  return dx * dx + dy * dy;
}

struct ConceptTask {
  std::size_t prompts = 8;
  std::size_t modes = 8;
  std::vector<std::size_t> kappa;  // prompt -> mode

  /// Seeded map: a shuffled cycle over the modes, so a bijection when
  /// prompts == modes.
  static ConceptTask make(std::size_t prompts, std::size_t modes, std::uint64_t seed) {
    if (prompts == 0 || modes == 0) throw std::invalid_argument("ConceptTask: prompts and modes must be positive");
    std::vector<std::size_t> perm(modes);
    for (std::size_t k = 0; k < modes; ++k) perm[k] = k;
    Rng rng = make_rng(seed, {stream_tag("knowledge-table")});
    std::shuffle(perm.begin(), perm.end(), rng);
    ConceptTask t{prompts, modes, {}};
    for (std::size_t q = 0; q < prompts; ++q) t.kappa.push_back(perm[q % modes]);
    return t;
  }

  std::size_t correct_mode(std::size_t q) const {
    if (q >= kappa.size()) throw std::out_of_range("ConceptTask: prompt " + std::to_string(q) + " has no concept");
    return kappa[q];
  }

  void validate() const {
    if (kappa.size() != prompts) throw std::invalid_argument("ConceptTask: knowledge table must cover every prompt");
    for (auto k : kappa)
      if (k >= modes) throw std::invalid_argument("ConceptTask: mode index out of range");
  }
};

struct ModeLayout {
  std::vector<Point> centers;
  double width = 0.35;    // s
  double support = 6.0;   // B
  double data_std = 0.2;  // scatter of the decoder's pretraining data around a center

  static ModeLayout make(std::size_t modes, double radius = 3.0, double width = 0.35, double support = 6.0,
                         double data_std = 0.2) {
    ModeLayout l;
    l.width = width;
    l.support = support;
    l.data_std = data_std;
    for (std::size_t k = 0; k < modes; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(modes);
      l.centers.push_back({radius * std::cos(a), radius * std::sin(a)});
    }
    l.validate();
    return l;
  }

  double min_separation() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < centers.size(); ++i)
      for (std::size_t j = i + 1; j < centers.size(); ++j) best = std::min(best, std::sqrt(dist2(centers[i], centers[j])));
    return best;
  }

  void validate() const {
    if (centers.empty()) throw std::invalid_argument("ModeLayout: no centers");
    if (!(width > 0.0)) throw std::invalid_argument("ModeLayout: width must be positive");
    if (!(support > 0.0)) throw std::invalid_argument("ModeLayout: support radius must be positive");
    if (!(data_std >= 0.0)) throw std::invalid_argument("ModeLayout: data_std must be >= 0");
    if (centers.size() > 1 && !(min_separation() > 4.0 * width)) {
      throw std::invalid_argument("ModeLayout: modes are not separable (min center distance <= 4 * width)");
    }
  }
};

struct RewardWeights {
  double aes = 0.2;
  double con = 0.2;
  double sem = 0.6;

  void validate() const {
    if (aes < 0 || con < 0 || sem < 0) throw std::invalid_argument("RewardWeights: weights must be >= 0");
    if (std::abs(aes + con + sem - 1.0) > 1e-9) throw std::invalid_argument("RewardWeights: weights must sum to 1");
  }
};

enum class SchedulerKind { balanced, staged };

struct SchedulerConfig {
  SchedulerKind kind = SchedulerKind::balanced;
  long switch_step = 0;

  /// (beta1, beta2) at training step tau.
  std::pair<double, double> factors(long tau) const {
    if (kind == SchedulerKind::balanced) return {0.5, 0.5};
    return tau < switch_step ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
  }

  void validate() const {
    if (kind == SchedulerKind::staged && switch_step <= 0) {
      throw std::invalid_argument("SchedulerConfig: staged scheduler needs switch step > 0");
    }
  }

  std::string to_string() const {
    return kind == SchedulerKind::balanced ? "balanced" : "staged:" + std::to_string(switch_step);
  }

  static SchedulerConfig parse(const std::string& s) {
    if (s == "balanced") return {SchedulerKind::balanced, 0};
    if (s.rfind("staged:", 0) == 0) {
      std::size_t used = 0;
      long step = 0;
      try {
        step = std::stol(s.substr(7), &used);
      } catch (const std::exception&) {
        throw std::invalid_argument("scheduler: bad switch step in '" + s + "'");
      }
      if (used != s.size() - 7) throw std::invalid_argument("scheduler: bad switch step in '" + s + "'");
      SchedulerConfig c{SchedulerKind::staged, step};
      c.validate();
      return c;
    }
    throw std::invalid_argument("scheduler: expected 'balanced' or 'staged:<step>', got '" + s + "'");
  }

  friend bool operator==(const SchedulerConfig&, const SchedulerConfig&) = default;
};

/// Everything the reward side needs, bundled.
struct Environment {
  Vocab vocab{24, 8, 8};
  ConceptTask task;
  ModeLayout layout;
  RewardWeights weights;
};

// ---------------------------------------------------------------------------
// Rewards

inline double semantic_reward(const Point& x, std::size_t q, const ConceptTask& task, const ModeLayout& layout) {
  const double s = layout.width;
  return std::exp(-dist2(x, layout.centers.at(task.correct_mode(q))) / (2.0 * s * s));
}

inline double aesthetic_reward(const Point& x, const ModeLayout& layout) {
  double d2 = std::numeric_limits<double>::infinity();
  for (const auto& c : layout.centers) d2 = std::min(d2, dist2(x, c));
  const double s = layout.width;
  return std::exp(-d2 / (2.0 * s * s));
}

inline double consistency_reward(const Point& x, const ModeLayout& layout) {
  const double r = std::sqrt(norm2(x));
  if (r <= layout.support) return 1.0;
  const double e = r - layout.support;
  return std::exp(-e * e / 2.0);
}

struct RewardBreakdown {
  double sem = 0.0;
  double aes = 0.0;
  double con = 0.0;
  double r1_raw = 0.0;  // stage-one score: semantic only
  double r2_raw = 0.0;  // stage-two score: weighted aes/con/sem

  friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

struct StageRewards {
  double r1_raw = 0.0;
  double r2_raw = 0.0;
  double beta1 = 0.0;
  double beta2 = 0.0;
};

inline RewardBreakdown score_sample(const Point& x, std::size_t q, const ConceptTask& task, const ModeLayout& layout,
                                    const RewardWeights& w) {
  RewardBreakdown r;
  r.sem = semantic_reward(x, q, task, layout);
  r.aes = aesthetic_reward(x, layout);
  r.con = consistency_reward(x, layout);
  r.r1_raw = r.sem;
  r.r2_raw = w.aes * r.aes + w.con * r.con + w.sem * r.sem;
  return r;
}

/// Raw stage rewards plus the scheduler factors; the factors are applied to
/// the stage losses, not folded into the rewards.
inline StageRewards stage_rewards(const Point& x, std::size_t q, const ConceptTask& task, const ModeLayout& layout,
                                  const RewardWeights& w, long tau, const SchedulerConfig& sched) {
  sched.validate();
  const RewardBreakdown b = score_sample(x, q, task, layout, w);
  const auto [b1, b2] = sched.factors(tau);
  return {b.r1_raw, b.r2_raw, b1, b2};
}

// ---------------------------------------------------------------------------
// Behaviour-cloning corpus

struct SftRecord {
  std::size_t symbol = 0;
  std::vector<Token> cot;
  std::vector<Token> refined;
  friend bool operator==(const SftRecord&, const SftRecord&) = default;
};

enum class NoiseModel { uniform, symbol_biased };

/// Filler thoughts for prompt q followed by the named mode token.
inline std::vector<Token> cot_template(std::size_t q, std::size_t mode, const Vocab& vocab) {
  std::vector<Token> cot;
  const std::size_t f = vocab.fillers();
  for (std::size_t i = 0; i < std::min<std::size_t>(2, f); ++i) cot.push_back(vocab.filler((q + 3 * i) % f));
  cot.push_back(vocab.mode(mode));
  return cot;
}

inline SftRecord make_record(std::size_t q, std::size_t mode, const Vocab& vocab) {
  return {q, cot_template(q, mode, vocab), {vocab.mode(mode)}};
}

/// Which prompts a symbol-biased corpus corrupts, and toward which mode.
struct BiasPlan {
  std::vector<std::optional<std::size_t>> confusion;  // per prompt
  double rate = 0.0;                                  // error rate on corrupted prompts
};

/// Concentrates an overall error rate rho on few prompts, each with a fixed
/// wrong mode and a per-prompt error rate of about 0.8, so greedy decoding of
/// a cloned policy is wrong on those prompts.
inline BiasPlan make_bias_plan(const ConceptTask& task, double rho, Rng& rng) {
  BiasPlan plan;
  plan.confusion.assign(task.prompts, std::nullopt);
  if (rho <= 0.0 || task.modes < 2) return plan;
  const double total = rho * static_cast<double>(task.prompts);
  const auto n = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(total / 0.8)), 1, task.prompts);
  plan.rate = std::min(1.0, total / static_cast<double>(n));
  std::vector<std::size_t> order(task.prompts);
  for (std::size_t q = 0; q < task.prompts; ++q) order[q] = q;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t q = order[i];
    const std::size_t shift = 1 + std::uniform_int_distribution<std::size_t>(0, task.modes - 2)(rng);
    plan.confusion[q] = (task.correct_mode(q) + shift) % task.modes;
  }
  return plan;
}

inline std::vector<SftRecord> make_sft_corpus(const ConceptTask& task, const Vocab& vocab, std::size_t per_symbol,
                                              double rho, Rng& rng, NoiseModel noise = NoiseModel::uniform) {
  if (!(rho >= 0.0 && rho < 1.0)) throw std::invalid_argument("make_sft_corpus: noise must lie in [0, 1)");
  const BiasPlan plan = noise == NoiseModel::symbol_biased ? make_bias_plan(task, rho, rng) : BiasPlan{};
  std::vector<SftRecord> out;
  out.reserve(per_symbol * task.prompts);
  for (std::size_t q = 0; q < task.prompts; ++q) {
    const std::size_t good = task.correct_mode(q);
    for (std::size_t i = 0; i < per_symbol; ++i) {
      std::size_t mode = good;
      if (noise == NoiseModel::uniform) {
        if (task.modes > 1 && uniform01(rng) < rho) {
          const std::size_t shift = 1 + std::uniform_int_distribution<std::size_t>(0, task.modes - 2)(rng);
          mode = (good + shift) % task.modes;
        }
      } else if (plan.confusion[q] && uniform01(rng) < plan.rate) {
        mode = *plan.confusion[q];
      }
      out.push_back(make_record(q, mode, vocab));
    }
  }
  return out;
}

/// Expected stage-two reward of a policy that always names the right concept
/// and a decoder scattering N(center, sigma_x^2 I) around it (Monte Carlo,
/// prompts cycled uniformly).
inline double oracle_upper_bound(const ConceptTask& task, const ModeLayout& layout, const RewardWeights& w,
                                 double sigma_x, std::size_t samples = 1'000'000, std::uint64_t seed = 0) {
  if (sigma_x < 0.0) throw std::invalid_argument("oracle_upper_bound: sigma_x must be >= 0");
  Rng rng = make_rng(seed, {stream_tag("oracle-bound")});
  double acc = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t q = i % task.prompts;
    const Point& c = layout.centers.at(task.correct_mode(q));
    Point x = c;
    if (sigma_x > 0.0) {
      x[0] += sigma_x * standard_normal(rng);
      x[1] += sigma_x * standard_normal(rng);
    }
    acc += score_sample(x, q, task, layout, w).r2_raw;
  }
  return acc / static_cast<double>(samples);
}

}  // namespace dualgrpo
