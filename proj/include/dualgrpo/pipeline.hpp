#pragma once

// The experiment stages behind the command-line tool: corpus generation,
// behaviour cloning, decoder pretraining, Dual-GRPO training, evaluation and
// the scheduler ablation. All randomness is derived from the master seed.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dualgrpo/checkpoint.hpp"
#include "dualgrpo/config.hpp"
#include "dualgrpo/jsonl.hpp"
#include "dualgrpo/sft.hpp"
#include "dualgrpo/trainer.hpp"

namespace dualgrpo {

inline std::vector<SftRecord> generate_corpus(const ExperimentConfig& c, const Environment& env) {
  Rng rng = make_rng(c.run.seed, {stream_tag("corpus")});
  return make_sft_corpus(env.task, env.vocab, c.corpus.per_symbol, c.corpus.noise, rng, c.corpus.model);
}

/// Correctly-templated record per prompt symbol (drift probes, scatter).
inline std::vector<SftRecord> probe_records(const Environment& env) {
  std::vector<SftRecord> out;
  for (std::size_t q = 0; q < env.task.prompts; ++q) out.push_back(make_record(q, env.task.correct_mode(q), env.vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Behaviour cloning

struct SftReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> accuracy_by_symbol;
  double accuracy = 0.0;
  double drift = 0.0;  // encoder drift between init and final params on the probes
  std::size_t steps = 0;
};

struct SftResult {
  RewriterParams phi;
  SftReport report;
};

/// `on_step(step, loss)` is called after every update.
inline SftResult run_sft(const ExperimentConfig& c, const Environment& env, const std::vector<SftRecord>& corpus,
                         const std::function<void(std::size_t, double)>& on_step = {}) {
  if (corpus.empty()) throw std::invalid_argument("sft: empty corpus");
  for (std::size_t i = 0; i < corpus.size(); ++i) validate_record(corpus[i], i, env.vocab);
  Rng init = make_rng(c.run.seed, {stream_tag("rewriter-init")});
  SftResult out{RewriterParams::init(env.vocab.size(), c.model.hidden, init), {}};
  const RewriterParams before = out.phi;
  Adam opt({c.sft.lr});
  Rng rng = make_rng(c.run.seed, {stream_tag("sft-batches")});
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<SftRecord> batch(c.sft.batch);
  for (std::size_t s = 0; s < c.sft.steps; ++s) {
    for (auto& r : batch) r = corpus[pick(rng)];
    const double loss = sft_step(batch, out.phi, opt, env.vocab);
    if (s == 0) out.report.initial_loss = loss;
    out.report.final_loss = loss;
    if (on_step) on_step(s, loss);
  }
  out.report.steps = c.sft.steps;
  out.report.accuracy_by_symbol = greedy_accuracy_by_symbol(out.phi, env, c.trainer.budget);
  for (double a : out.report.accuracy_by_symbol) out.report.accuracy += a;
  out.report.accuracy /= static_cast<double>(out.report.accuracy_by_symbol.size());
  const auto probes = probe_records(env);
  out.report.drift = embedding_drift(before, out.phi, probes, env.vocab);
  return out;
}

inline json to_json(const SftReport& r) {
  return {{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}, {"accuracy", r.accuracy},
          {"accuracy_by_symbol", r.accuracy_by_symbol}, {"embedding_drift", r.drift}, {"steps", r.steps}};
}

// ---------------------------------------------------------------------------
// Decoder pretraining

struct PretrainResult {
  VelocityFieldParams lambda;
  double final_loss = 0.0;
};

inline PretrainResult run_pretrain(const ExperimentConfig& c, const Environment& env, const RewriterParams& phi,
                                   const std::function<void(std::size_t, double)>& on_step = {}) {
  Rng init = make_rng(c.run.seed, {stream_tag("decoder-init")});
  PretrainResult out{VelocityFieldParams::init(c.model.hidden, c.model.decoder_width, init), 0.0};
  const Tensor table = condition_table(phi, env);
  Adam opt({c.pretrain.lr});
  Rng rng = make_rng(c.run.seed, {stream_tag("pretrain-batches")});
  for (std::size_t s = 0; s < c.pretrain.steps; ++s) {
    out.final_loss = pretrain_step(out.lambda, opt, table, env, c.pretrain.batch, c.trainer.delta, rng);
    if (on_step) on_step(s, out.final_loss);
  }
  return out;
}

/// Per-coordinate RMS distance of deterministic decoder samples from the
/// correct center, conditioned on the correct templated trace of every
/// prompt; the sigma_x fed to oracle_upper_bound.
inline double measure_scatter(const VelocityFieldParams& lambda, const RewriterParams& phi, const Environment& env,
                              const TimeGrid& grid, std::size_t per_prompt, std::uint64_t seed) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t q = 0; q < env.task.prompts; ++q) {
    const auto cond = encode_condition(record_trace(make_record(q, env.task.correct_mode(q), env.vocab), env.vocab),
                                       phi, env.vocab);
    Tensor rows({per_prompt, phi.hidden()});
    std::vector<Rng> rngs;
    for (std::size_t i = 0; i < per_prompt; ++i) {
      std::copy_n(cond.value.data().begin(), phi.hidden(),
                  rows.data().begin() + static_cast<std::ptrdiff_t>(i * phi.hidden()));
      rngs.push_back(make_rng(seed, {stream_tag("scatter"), q, i}));
    }
    const auto traj = sample_trajectories(rows, grid, SdeConfig{0.0, 0}, lambda, rngs);
    const Point& mu = env.layout.centers[env.task.correct_mode(q)];
    for (const auto& t : traj) {
      if (!t.finite) continue;
      acc += dist2(t.final, mu);
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error("measure_scatter: every sample diverged");
  return std::sqrt(acc / (2.0 * static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Evaluation

inline EvalResult evaluate_params(const RewriterParams& phi, const VelocityFieldParams& lambda,
                                  const ExperimentConfig& c, const Environment& env) {
  const RewriterPolicy policy{phi, env.vocab, c.trainer.budget};
  const OdeSampler sampler{lambda, TimeGrid{c.trainer.steps, c.trainer.delta}};
  return evaluate(policy, sampler, c.eval.prompts, env, derive_seed(c.run.seed, {stream_tag("eval")}));
}

inline json to_json(const EvalResult& e) {
  return {{"r_sem", e.r_sem}, {"r_aes", e.r_aes}, {"r_con", e.r_con},
          {"r2", e.r2},       {"accuracy", e.accuracy}, {"prompts", e.prompts}};
}

// ---------------------------------------------------------------------------
// Dual-GRPO training run

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: write nothing
  bool dump_trees = false;
  std::function<void(const MetricsRow&)> on_row;
  /// Called after every iteration with the live state (tests use it to
  /// inspect parameters across steps).
  std::function<void(long, const TrainerState&)> on_state;
};

inline NamedTensors train_checkpoint(const TrainerState& st) {
  NamedTensors t;
  append_params(t, "phi", st.phi);
  append_params(t, "lambda", st.lambda);
  return t;
}

/// Runs cfg.trainer.iterations steps from the given starting parameters.
/// Writes metrics.jsonl (deterministic), timings.jsonl (wall clock),
/// periodic and final checkpoints when out_dir is set.
inline TrainerState run_training(const ExperimentConfig& c, const Environment& env, const RewriterParams& phi,
                                 const VelocityFieldParams& lambda, const TrainOptions& opt = {}) {
  c.trainer.validate();
  TrainerState st = TrainerState::start(phi, lambda, c.trainer);
  std::optional<MetricsSink> metrics;
  std::optional<JsonlSink> timings, trees;
  if (!opt.out_dir.empty()) {
    metrics.emplace(opt.out_dir / "metrics.jsonl");
    timings.emplace(opt.out_dir / "timings.jsonl");
    if (opt.dump_trees) trees.emplace(opt.out_dir / "trees.jsonl");
  }
  StepOptions so{c.run.workers, derive_seed(c.run.seed, {stream_tag("train")}), {}};
  if (trees) so.on_tree = [&](long tau, std::size_t i, const RolloutTree& t) { dump_tree(*trees, tau, i, t); };
  for (long tau = 0; tau < c.trainer.iterations; ++tau) {
    const MetricsRow row = train_step(tau, st, c.trainer, env, so);
    if (metrics) metrics->write(row);
    if (timings) timings->write({{"iteration", tau}, {"wall_clock", row.wall_clock}});
    if (opt.on_row) opt.on_row(row);
    if (opt.on_state) opt.on_state(tau, st);
    if (!opt.out_dir.empty() && c.run.checkpoint_every > 0 && (tau + 1) % c.run.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "iter_%06ld.ckpt", tau + 1);
      save_checkpoint(opt.out_dir / "checkpoints" / name, train_checkpoint(st));
    }
  }
  if (!opt.out_dir.empty()) save_checkpoint(opt.out_dir / "final.ckpt", train_checkpoint(st));
  return st;
}

// ---------------------------------------------------------------------------
// Scheduler ablation

struct AblationRow {
  std::string scheduler;
  EvalResult eval;
  double final_r_sem = 0.0;  // mean over the last tenth of training iterations
  double final_r_aes = 0.0;
  double final_r_con = 0.0;
};

/// Balanced and staged runs from the same starting parameters and seed.
inline std::vector<AblationRow> ablate_scheduler(const ExperimentConfig& c, const Environment& env,
                                                 const RewriterParams& phi, const VelocityFieldParams& lambda,
                                                 long switch_step, const std::filesystem::path& out_dir = {}) {
  std::vector<AblationRow> rows;
  for (const SchedulerConfig sched :
       {SchedulerConfig{SchedulerKind::balanced, 0}, SchedulerConfig{SchedulerKind::staged, switch_step}}) {
    ExperimentConfig run = c;
    run.trainer.scheduler = sched;
    std::vector<MetricsRow> log;
    TrainOptions opt;
    if (!out_dir.empty()) opt.out_dir = out_dir / (sched.kind == SchedulerKind::balanced ? "balanced" : "staged");
    opt.on_row = [&](const MetricsRow& r) { log.push_back(r); };
    const TrainerState st = run_training(run, env, phi, lambda, opt);
    AblationRow row{sched.to_string(), evaluate_params(st.phi, st.lambda, run, env)};
    const std::size_t tail = std::max<std::size_t>(1, log.size() / 10);
    for (std::size_t i = log.size() - std::min(tail, log.size()); i < log.size(); ++i) {
      row.final_r_sem += log[i].r_sem / static_cast<double>(tail);
      row.final_r_aes += log[i].r_aes / static_cast<double>(tail);
      row.final_r_con += log[i].r_con / static_cast<double>(tail);
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  char buf[256];
  o << "| scheduler | eval r_sem | eval r_aes | eval r_con | eval overall | eval accuracy | train r_sem (last 10%) |\n";
  o << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f | %.4f | %.4f | %.4f | %.4f |\n", r.scheduler.c_str(),
                  r.eval.r_sem, r.eval.r_aes, r.eval.r_con, r.eval.r2, r.eval.accuracy, r.final_r_sem);
    o << buf;
  }
  return o.str();
}

}  // namespace dualgrpo
