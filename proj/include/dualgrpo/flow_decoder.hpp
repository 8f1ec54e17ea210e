#pragma once

// Stage-two policy: a conditional velocity field over R^2, sampled from
// t = 1 - delta (noise) down to t = delta (data) with a signed step dt < 0.
// The first `window` steps are Euler-Maruyama steps of the equivalent SDE
//
//   x' = x + [v + g^2/(2t) (x + (1-t) v)] dt + g sqrt(|dt|) eta,
//   g  = a sqrt(t / (1-t)),
//
// which makes them Gaussian transitions with tractable likelihoods; the
// remaining steps are plain Euler ODE steps.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgrpo/autodiff.hpp"
#include "dualgrpo/random.hpp"
#include "dualgrpo/reward_env.hpp"
#include "dualgrpo/tensor.hpp"

namespace dualgrpo {

inline constexpr std::size_t kDim = 2;
inline constexpr std::size_t kTimeFeatures = 8;

struct VelocityFieldParams {
  Tensor w1;      // (d + time features) x H
  Tensor wc;      // h x H, conditioning part of the first layer
  Tensor b1;      // 1 x H
  Tensor w2, b2;  // H x H, 1 x H
  Tensor w3, b3;  // H x d, 1 x d

  std::size_t input_dim() const { return w1.rows() + wc.rows(); }
  std::size_t cond_dim() const { return wc.rows(); }
  std::size_t width() const { return w1.cols(); }

  std::vector<Tensor*> tensors() { return {&w1, &wc, &b1, &w2, &b2, &w3, &b3}; }
  std::vector<const Tensor*> tensors() const { return {&w1, &wc, &b1, &w2, &b2, &w3, &b3}; }
  static std::vector<std::string> names() { return {"w1", "wc", "b1", "w2", "b2", "w3", "b3"}; }

  bool all_finite() const {
    return std::ranges::all_of(tensors(), [](const Tensor* t) { return t->all_finite(); });
  }

  static VelocityFieldParams zeros(std::size_t cond_dim, std::size_t width) {
    return {Tensor::zeros(kDim + kTimeFeatures, width),
            Tensor::zeros(cond_dim, width),
            Tensor::zeros(1, width),
            Tensor::zeros(width, width),
            Tensor::zeros(1, width),
            Tensor::zeros(width, kDim),
            Tensor::zeros(1, kDim)};
  }

  static VelocityFieldParams init(std::size_t cond_dim, std::size_t width, Rng& rng) {
    VelocityFieldParams p = zeros(cond_dim, width);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(p.input_dim()));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(width));
    for (auto& v : p.w1.data()) v = s1 * standard_normal(rng);
    for (auto& v : p.wc.data()) v = s1 * standard_normal(rng);
    for (auto& v : p.w2.data()) v = s2 * standard_normal(rng);
    for (auto& v : p.w3.data()) v = s2 * standard_normal(rng);
    return p;
  }

  friend bool operator==(const VelocityFieldParams&, const VelocityFieldParams&) = default;
};

struct DecoderVars {
  Var w1, wc, b1, w2, b2, w3, b3;

  static DecoderVars leaves(Tape& t, const VelocityFieldParams& p) {
    return {t.leaf(p.w1), t.leaf(p.wc), t.leaf(p.b1), t.leaf(p.w2), t.leaf(p.b2), t.leaf(p.w3), t.leaf(p.b3)};
  }
  static DecoderVars constants(Tape& t, const VelocityFieldParams& p) {
    return {t.constant(p.w1), t.constant(p.wc), t.constant(p.b1), t.constant(p.w2),
            t.constant(p.b2), t.constant(p.w3), t.constant(p.b3)};
  }
  std::vector<Var> list() const { return {w1, wc, b1, w2, b2, w3, b3}; }
};

struct TimeGrid {
  std::size_t steps = 10;
  double delta = 1e-3;

  double start() const { return 1.0 - delta; }
  double end() const { return delta; }
  double dt() const { return -(start() - end()) / static_cast<double>(steps); }
  /// Time at grid index i (0 = start, steps = end).
  double time(std::size_t i) const {
    if (i > steps) throw std::out_of_range("TimeGrid: index " + std::to_string(i) + " past the last step");
    return i == steps ? end() : start() + static_cast<double>(i) * dt();
  }

  void validate() const {
    if (steps == 0) throw std::invalid_argument("TimeGrid: steps must be positive");
    if (!(delta > 0.0 && delta < 0.5)) throw std::invalid_argument("TimeGrid: delta must lie in (0, 0.5)");
  }
};

struct SdeConfig {
  double noise = 0.1;      // a
  std::size_t window = 2;  // W earliest steps are stochastic

  void validate(const TimeGrid& grid) const {
    if (!(noise >= 0.0)) throw std::invalid_argument("SdeConfig: noise scale must be >= 0");
    if (window > grid.steps) throw std::invalid_argument("SdeConfig: window exceeds the number of steps");
  }
};

inline double noise_level(double a, double t) { return a * std::sqrt(t / (1.0 - t)); }

struct TransitionRecord {
  std::size_t step = 0;
  double t = 0.0;
  double dt = 0.0;
  Point x{};     // x_t
  Point next{};  // x_{t-1}
  Point mean{};
  double std = 0.0;  // per coordinate, g_t sqrt(|dt|)
  bool stochastic = false;
  double log_prob = 0.0;  // under the sampling parameters; 0 for deterministic steps

  friend bool operator==(const TransitionRecord&, const TransitionRecord&) = default;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::size_t step)
      : std::runtime_error("flow decoder: non-finite state at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// ---------------------------------------------------------------------------
// Velocity field

inline void time_features(double t, double* out) {
  for (std::size_t k = 0; k < kTimeFeatures / 2; ++k) {
    const double w = std::numbers::pi * static_cast<double>(k + 1) * t;
    out[2 * k] = std::sin(w);
    out[2 * k + 1] = std::cos(w);
  }
}

inline void check_time(double t) {
  if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("velocity: t = " + std::to_string(t) + " outside (0, 1)");
}

/// Network inputs. The conditioning part is kept as distinct rows plus a
/// row index, so a condition shared by many samples is projected once.
struct DecoderInputs {
  Tensor state;                    // B x (d + time features): [x, time features]
  Tensor cond;                     // U x h
  std::vector<std::size_t> index;  // sample row -> cond row; empty means identity
};

inline Tensor state_inputs(const Tensor& x, std::span<const double> t) {
  const std::size_t b = x.rows();
  if (x.cols() != kDim || t.size() != b) {
    throw ShapeError("decoder_inputs: x " + shape_str(x.shape()) + " with " + std::to_string(t.size()) + " times");
  }
  Tensor out({b, kDim + kTimeFeatures});
  for (std::size_t r = 0; r < b; ++r) {
    check_time(t[r]);
    double* row = out.data().data() + r * (kDim + kTimeFeatures);
    row[0] = x.at(r, 0);
    row[1] = x.at(r, 1);
    time_features(t[r], row + kDim);
  }
  return out;
}

/// One condition row per sample.
inline DecoderInputs decoder_inputs(const Tensor& x, std::span<const double> t, const Tensor& cond) {
  if (cond.rows() != x.rows()) {
    throw ShapeError("decoder_inputs: x " + shape_str(x.shape()) + ", cond " + shape_str(cond.shape()));
  }
  return {state_inputs(x, t), cond, {}};
}

/// Distinct condition rows shared through `index`.
inline DecoderInputs decoder_inputs(const Tensor& x, std::span<const double> t, const Tensor& cond,
                                    std::vector<std::size_t> index) {
  if (index.size() != x.rows()) throw ShapeError("decoder_inputs: one cond index per row required");
  for (auto i : index)
    if (i >= cond.rows()) throw ShapeError("decoder_inputs: cond index out of range");
  return {state_inputs(x, t), cond, std::move(index)};
}

/// cond * wc for the distinct condition rows.
inline Var condition_projection(const DecoderVars& p, const Tensor& cond) {
  Tape& t = *p.wc.tape;
  if (cond.cols() != t.value(p.wc).rows()) {
    throw ShapeError("velocity: cond " + shape_str(cond.shape()) + " vs conditioning weights " +
                     shape_str(t.value(p.wc).shape()));
  }
  return matmul(t.constant(cond), p.wc);
}

/// tanh MLP on [x, time features] with the first-layer conditioning term
/// supplied as a projected (B x H) input.
inline Var velocity_net(const DecoderVars& p, Var state, Var cond_proj) {
  Tape& t = *state.tape;
  const std::size_t b = t.value(state).rows();
  Var ones = t.constant(Tensor({b, 1}, 1.0));
  if (t.value(state).cols() != t.value(p.w1).rows()) {
    throw ShapeError("velocity: inputs " + shape_str(t.value(state).shape()) + " vs first layer " +
                     shape_str(t.value(p.w1).shape()));
  }
  Var h1 = tanh(add(add(matmul(state, p.w1), cond_proj), matmul(ones, p.b1)));
  Var h2 = tanh(add(matmul(h1, p.w2), matmul(ones, p.b2)));
  return add(matmul(h2, p.w3), matmul(ones, p.b3));
}

inline Var velocity_net(const DecoderVars& p, const DecoderInputs& in) {
  Tape& t = *p.w1.tape;
  Var proj = condition_projection(p, in.cond);
  if (!in.index.empty()) proj = gather_rows(proj, in.index);
  return velocity_net(p, t.constant(in.state), proj);
}

inline Tensor row_tensor(const Point& x) { return Tensor({1, kDim}, std::vector<double>{x[0], x[1]}); }
inline Point point_of(const Tensor& x, std::size_t r = 0) { return {x.at(r, 0), x.at(r, 1)}; }

inline Point velocity(const Point& x, double t, const Tensor& cond, const VelocityFieldParams& params) {
  check_time(t);
  Tape tape;
  const DecoderVars p = DecoderVars::constants(tape, params);
  const double ts[] = {t};
  Var v = velocity_net(p, decoder_inputs(row_tensor(x), ts, cond));
  return point_of(tape.value(v));
}

/// Batched velocity for rows of x at a common time t; `cond` has one row per sample.
inline Tensor velocity_batch(const Tensor& x, double t, const Tensor& cond, const VelocityFieldParams& params) {
  Tape tape;
  const DecoderVars p = DecoderVars::constants(tape, params);
  const std::vector<double> ts(x.rows(), t);
  return tape.value(velocity_net(p, decoder_inputs(x, ts, cond)));
}

// ---------------------------------------------------------------------------
// Transition kernel

/// mu = x + dt * (v + c * (x + (1 - t) v)), c = g^2 / (2t), rowwise.
/// Every code path builds the mean through this function so sampled and
/// re-evaluated means agree bit for bit.
inline Var drift_mean_batch(Var v, const Tensor& x, std::span<const double> t, double dt, double a) {
  Tape& tape = *v.tape;
  const std::size_t b = x.rows();
  Tensor one_minus_t({b, kDim}), c({b, kDim});
  for (std::size_t r = 0; r < b; ++r) {
    const double g = noise_level(a, t[r]);
    for (std::size_t j = 0; j < kDim; ++j) {
      one_minus_t.at(r, j) = 1.0 - t[r];
      c.at(r, j) = g * g / (2.0 * t[r]);
    }
  }
  Var xv = tape.constant(x);
  Var inner = add(xv, mul(v, tape.constant(std::move(one_minus_t))));
  Var drift = add(v, mul(tape.constant(std::move(c)), inner));
  return add(xv, scale(drift, dt));
}

inline Point drift_mean(const Point& x, double t, double dt, double a, const Tensor& cond,
                        const VelocityFieldParams& params) {
  check_time(t);
  Tape tape;
  const DecoderVars p = DecoderVars::constants(tape, params);
  const double ts[] = {t};
  const Tensor xt = row_tensor(x);
  Var v = velocity_net(p, decoder_inputs(xt, ts, cond));
  return point_of(tape.value(drift_mean_batch(v, xt, ts, dt, a)));
}

/// Rowwise isotropic Gaussian log-density of `next` under N(mu, sigma^2 I); (B x 1).
inline Var gaussian_log_density(Var mu, const Tensor& next, std::span<const double> sigma) {
  Tape& tape = *mu.tape;
  const std::size_t b = next.rows();
  Tensor inv({b, 1}), norm({b, 1});
  for (std::size_t r = 0; r < b; ++r) {
    const double s2 = sigma[r] * sigma[r];
    inv[r] = -1.0 / (2.0 * s2);
    norm[r] = -0.5 * static_cast<double>(kDim) * std::log(2.0 * std::numbers::pi * s2);
  }
  Var sq = matmul(square(sub(tape.constant(next), mu)), tape.constant(Tensor({kDim, 1}, 1.0)));
  return add(tape.constant(std::move(norm)), mul(sq, tape.constant(std::move(inv))));
}

/// Rowwise ||mu_new - mu_ref||^2 / (2 sigma^2); (B x 1).
inline Var gaussian_kl_batch(Var mu_new, const Tensor& mu_ref, std::span<const double> sigma) {
  Tape& tape = *mu_new.tape;
  const std::size_t b = mu_ref.rows();
  Tensor inv({b, 1});
  for (std::size_t r = 0; r < b; ++r) {
    if (!(sigma[r] > 0.0)) throw std::invalid_argument("gaussian_kl: sigma must be positive");
    inv[r] = 1.0 / (2.0 * sigma[r] * sigma[r]);
  }
  Var sq = matmul(square(sub(mu_new, tape.constant(mu_ref))), tape.constant(Tensor({kDim, 1}, 1.0)));
  return mul(sq, tape.constant(std::move(inv)));
}

/// KL between N(mu_new, sigma^2 I) and N(mu_ref, sigma^2 I).
inline double gaussian_kl(const Point& mu_new, const Point& mu_ref, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kl: sigma must be positive");
  return dist2(mu_new, mu_ref) / (2.0 * sigma * sigma);
}

/// Log-density of a stochastic record with the mean recomputed under `params`.
inline double transition_log_prob(const TransitionRecord& rec, const Tensor& cond, const VelocityFieldParams& params,
                                  double a) {
  if (!rec.stochastic) throw std::invalid_argument("transition_log_prob: deterministic step has no density");
  Tape tape;
  const DecoderVars p = DecoderVars::constants(tape, params);
  const double ts[] = {rec.t};
  const double sd[] = {rec.std};
  const Tensor xt = row_tensor(rec.x);
  Var v = velocity_net(p, decoder_inputs(xt, ts, cond));
  Var mu = drift_mean_batch(v, xt, ts, rec.dt, a);
  return tape.value(gaussian_log_density(mu, row_tensor(rec.next), sd)).item();
}

// ---------------------------------------------------------------------------
// Sampling

struct Trajectory {
  std::vector<TransitionRecord> records;
  Point final{};
  bool finite = true;
  std::size_t failed_step = 0;
};

/// Samples one trajectory per condition row. Row r draws its starting point
/// and noise only from rngs[r], so rows are independent of batch layout.
inline std::vector<Trajectory> sample_trajectories(const Tensor& cond, const TimeGrid& grid, const SdeConfig& cfg,
                                                   const VelocityFieldParams& params, std::span<Rng> rngs) {
  grid.validate();
  cfg.validate(grid);
  const std::size_t b = cond.rows();
  if (rngs.size() != b) throw std::invalid_argument("sample_trajectories: need one rng per row");
  std::vector<Trajectory> out(b);
  Tensor x({b, kDim});
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < kDim; ++j) x.at(r, j) = standard_normal(rngs[r]);

  // The condition is fixed along a trajectory, so its first-layer term is
  // computed once.
  Tensor proj;
  {
    Tape tape;
    proj = tape.value(condition_projection(DecoderVars::constants(tape, params), cond));
  }
  const double dt = grid.dt();
  for (std::size_t i = 0; i < grid.steps; ++i) {
    const double t = grid.time(i);
    const double g = noise_level(cfg.noise, t);
    const double sd = g * std::sqrt(std::abs(dt));
    const bool stochastic = i < cfg.window && sd > 0.0;
    const std::vector<double> ts(b, t);

    Tape tape;
    const DecoderVars p = DecoderVars::constants(tape, params);
    Var v = velocity_net(p, tape.constant(state_inputs(x, ts)), tape.constant(proj));
    Var mu = drift_mean_batch(v, x, ts, dt, cfg.noise);
    Tensor next = tape.value(mu);
    if (stochastic) {
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t j = 0; j < kDim; ++j) next.at(r, j) += sd * standard_normal(rngs[r]);
    }
    Tensor lp;
    if (stochastic) {
      const std::vector<double> sds(b, sd);
      lp = tape.value(gaussian_log_density(mu, next, sds));
    }
    const Tensor& muv = tape.value(mu);
    for (std::size_t r = 0; r < b; ++r) {
      TransitionRecord rec;
      rec.step = i;
      rec.t = t;
      rec.dt = dt;
      rec.x = point_of(x, r);
      rec.next = point_of(next, r);
      rec.mean = point_of(muv, r);
      rec.std = sd;
      rec.stochastic = stochastic;
      rec.log_prob = stochastic ? lp[r] : 0.0;
      auto& tr = out[r];
      if (tr.finite && !(std::isfinite(rec.next[0]) && std::isfinite(rec.next[1]) && std::isfinite(rec.log_prob))) {
        tr.finite = false;
        tr.failed_step = i;
      }
      tr.records.push_back(rec);
    }
    // Keep a diverged row from poisoning later steps of other rows' kernels.
    for (std::size_t r = 0; r < b; ++r)
      if (!out[r].finite)
        for (std::size_t j = 0; j < kDim; ++j) next.at(r, j) = 0.0;
    x = std::move(next);
  }
  for (std::size_t r = 0; r < b; ++r)
    if (out[r].finite) out[r].final = point_of(x, r);
  return out;
}

/// One SDE (or ODE, outside the window) step from x at grid index `step`.
inline TransitionRecord sde_step(const Point& x, std::size_t step, const Tensor& cond, const TimeGrid& grid,
                                 const SdeConfig& cfg, const VelocityFieldParams& params, Rng& rng) {
  if (step >= grid.steps) throw std::out_of_range("sde_step: step outside the grid");
  const double t = grid.time(step);
  const double dt = grid.dt();
  const double sd = noise_level(cfg.noise, t) * std::sqrt(std::abs(dt));
  const bool stochastic = step < cfg.window && sd > 0.0;
  Tape tape;
  const DecoderVars p = DecoderVars::constants(tape, params);
  const double ts[] = {t};
  const Tensor xt = row_tensor(x);
  Var v = velocity_net(p, decoder_inputs(xt, ts, cond));
  Var mu = drift_mean_batch(v, xt, ts, dt, cfg.noise);
  TransitionRecord rec;
  rec.step = step;
  rec.t = t;
  rec.dt = dt;
  rec.x = x;
  rec.mean = point_of(tape.value(mu));
  rec.next = rec.mean;
  rec.std = sd;
  rec.stochastic = stochastic;
  if (stochastic) {
    for (std::size_t j = 0; j < kDim; ++j) rec.next[j] += sd * standard_normal(rng);
    const double sds[] = {sd};
    rec.log_prob = tape.value(gaussian_log_density(mu, row_tensor(rec.next), sds)).item();
  }
  return rec;
}

/// Single trajectory; throws NonFiniteError naming the step on divergence.
inline Trajectory sample_trajectory(const Tensor& cond, const TimeGrid& grid, const SdeConfig& cfg,
                                    const VelocityFieldParams& params, Rng& rng) {
  auto out = sample_trajectories(cond, grid, cfg, params, std::span<Rng>(&rng, 1));
  if (!out[0].finite) throw NonFiniteError(out[0].failed_step);
  return std::move(out[0]);
}

/// Plain Euler integration x <- x + dt * v(x, t) over the grid, for any
/// velocity provider f(x rows, t) -> v rows.
template <class VelocityFn>
Tensor integrate_ode(Tensor x, const TimeGrid& grid, VelocityFn&& f) {
  const double dt = grid.dt();
  for (std::size_t i = 0; i < grid.steps; ++i) {
    const Tensor v = f(x, grid.time(i));
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = x[k] + dt * v[k];
  }
  return x;
}

// ---------------------------------------------------------------------------
// Flow-matching pretraining

struct FlowMatchBatch {
  DecoderInputs inputs;  // network inputs at (x_t, t, cond)
  Tensor target;         // eps - x0
};

/// x_t = (1 - t) x0 + t eps with t ~ U(delta, 1 - delta), eps ~ N(0, I).
/// `index` optionally maps rows of x0 to rows of `cond`.
inline FlowMatchBatch draw_flow_match(const Tensor& x0, const Tensor& cond, double delta, Rng& rng,
                                      std::vector<std::size_t> index = {}) {
  const std::size_t b = x0.rows();
  if (b == 0) throw std::invalid_argument("fm_pretrain_loss: empty batch");
  Tensor xt({b, kDim}), target({b, kDim});
  std::vector<double> ts(b);
  std::uniform_real_distribution<double> ut(delta, 1.0 - delta);
  for (std::size_t r = 0; r < b; ++r) {
    ts[r] = ut(rng);
    for (std::size_t j = 0; j < kDim; ++j) {
      const double e = standard_normal(rng);
      xt.at(r, j) = (1.0 - ts[r]) * x0.at(r, j) + ts[r] * e;
      target.at(r, j) = e - x0.at(r, j);
    }
  }
  if (index.empty()) return {decoder_inputs(xt, ts, cond), std::move(target)};
  return {decoder_inputs(xt, ts, cond, std::move(index)), std::move(target)};
}

/// Mean over the batch of ||prediction - target||^2.
inline Var fm_loss(Var prediction, const Tensor& target) {
  Tape& t = *prediction.tape;
  const double inv_b = 1.0 / static_cast<double>(target.rows());
  return scale(sum(square(sub(prediction, t.constant(target)))), inv_b);
}

inline Var fm_pretrain_loss(const DecoderVars& p, const Tensor& x0, const Tensor& cond, double delta, Rng& rng,
                            std::vector<std::size_t> index = {}) {
  FlowMatchBatch fb = draw_flow_match(x0, cond, delta, rng, std::move(index));
  return fm_loss(velocity_net(p, fb.inputs), fb.target);
}

}  // namespace dualgrpo
