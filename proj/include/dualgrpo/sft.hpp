#pragma once

// Behaviour activation for the rewriter (teacher-forced cloning of
// "prompt -> CoT -> SEP -> refined -> EOS" records), the encoder drift
// diagnostic, and flow-matching pretraining of the decoder on the
// conditioning vectors the cloned rewriter produces.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgrpo/adam.hpp"
#include "dualgrpo/autodiff.hpp"
#include "dualgrpo/flow_decoder.hpp"
#include "dualgrpo/reward_env.hpp"
#include "dualgrpo/rewriter.hpp"

namespace dualgrpo {

class MalformedRecord : public std::invalid_argument {
 public:
  MalformedRecord(std::size_t index, const std::string& why)
      : std::invalid_argument("sft: record " + std::to_string(index) + " is malformed: " + why), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

inline void validate_record(const SftRecord& r, std::size_t index, const Vocab& vocab) {
  if (r.symbol >= vocab.prompts()) throw MalformedRecord(index, "unknown prompt symbol");
  if (r.refined.empty()) throw MalformedRecord(index, "empty refined segment");
  auto check = [&](const std::vector<Token>& seg, const char* what) {
    for (Token z : seg) {
      if (!vocab.contains(z)) throw MalformedRecord(index, std::string(what) + " token outside the vocabulary");
      if (z == vocab.sep() || z == vocab.eos()) throw MalformedRecord(index, std::string(what) + " contains SEP/EOS");
    }
  };
  check(r.cot, "cot");
  check(r.refined, "refined");
}

/// The record as a token trace (no log-probs).
inline ReasoningTrace record_trace(const SftRecord& r, const Vocab& vocab) {
  ReasoningTrace tr;
  tr.prompt = vocab.prompt(r.symbol);
  tr.tokens = r.cot;
  tr.tokens.push_back(vocab.sep());
  tr.tokens.insert(tr.tokens.end(), r.refined.begin(), r.refined.end());
  tr.tokens.push_back(vocab.eos());
  tr.log_probs.assign(tr.tokens.size(), 0.0);
  finalize_trace(tr, vocab);
  return tr;
}

/// Mean next-token cross-entropy over every predicted token of the batch.
inline Var sft_loss(const RewriterVars& phi, std::span<const SftRecord> batch, const Vocab& vocab) {
  Tape& t = *phi.embed.tape;
  std::vector<ReasoningTrace> traces;
  traces.reserve(batch.size());
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    validate_record(batch[i], i, vocab);
    traces.push_back(record_trace(batch[i], vocab));
    tokens += traces.back().tokens.size();
  }
  std::vector<const ReasoningTrace*> ptrs;
  for (const auto& tr : traces) ptrs.push_back(&tr);
  const TraceReplay rp = replay_traces(phi, ptrs, vocab);
  Var total = t.constant(Tensor::scalar(0.0));
  for (const Var& lp : rp.token_log_prob) total = add(total, sum(lp));
  return scale(total, -1.0 / static_cast<double>(tokens));
}

/// One teacher-forced update; returns the loss before the update.
inline double sft_step(std::span<const SftRecord> batch, RewriterParams& phi, Adam& opt, const Vocab& vocab) {
  if (batch.empty()) throw std::invalid_argument("sft_step: empty batch");
  Tape t;
  const RewriterVars vars = RewriterVars::leaves(t, phi);
  Var loss = sft_loss(vars, batch, vocab);
  Gradients g = t.backward(loss);
  std::vector<Tensor> grads;
  for (Var v : vars.list()) grads.push_back(g[v]);
  opt.step(phi.tensors(), grads);
  return t.value(loss).item();
}

/// 1 - cos(a, b); identical vectors (including two zero vectors) are at
/// distance 0, one zero vector at 1.
inline double cosine_distance(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_distance: size mismatch");
  if (a.data() == b.data()) return 0.0;  // exact, not 1 - (1 - ulp)
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 && nb == 0.0) return 0.0;
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Mean cosine distance between conditioning vectors of the same forced
/// probe traces under two parameter sets (encoder drift only, no sampling).
inline double embedding_drift(const RewriterParams& before, const RewriterParams& after,
                              std::span<const SftRecord> probes, const Vocab& vocab) {
  if (probes.empty()) throw std::invalid_argument("embedding_drift: no probes");
  double acc = 0.0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    validate_record(probes[i], i, vocab);
    const ReasoningTrace tr = record_trace(probes[i], vocab);
    acc += cosine_distance(encode_condition(tr, before, vocab).value, encode_condition(tr, after, vocab).value);
  }
  return acc / static_cast<double>(probes.size());
}

/// Greedy accuracy per prompt symbol (1 if the greedy trace names the
/// correct concept).
inline std::vector<double> greedy_accuracy_by_symbol(const RewriterParams& phi, const Environment& env,
                                                     std::size_t budget) {
  std::vector<double> out;
  Rng unused(0);
  for (std::size_t q = 0; q < env.task.prompts; ++q) {
    const auto tr = sample_sequence(env.vocab.prompt(q), budget, 0.0, phi, env.vocab, unused);
    const auto m = named_mode(tr, env.vocab);
    out.push_back(m && *m == env.task.correct_mode(q) ? 1.0 : 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoder pretraining

/// Conditioning vector of the templated trace naming `mode` for every
/// (prompt, mode) pair; row q * M + mode.
inline Tensor condition_table(const RewriterParams& phi, const Environment& env) {
  const std::size_t c = env.task.prompts, m = env.task.modes, h = phi.hidden();
  Tensor table({c * m, h});
  for (std::size_t q = 0; q < c; ++q) {
    for (std::size_t k = 0; k < m; ++k) {
      const auto cv = encode_condition(record_trace(make_record(q, k, env.vocab), env.vocab), phi, env.vocab);
      std::copy_n(cv.value.data().begin(), h, table.data().begin() + static_cast<std::ptrdiff_t>((q * m + k) * h));
    }
  }
  return table;
}

struct PretrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 256;
  double lr = 1e-3;
};

/// One flow-matching batch: random (prompt, mode) pairs, data drawn around
/// the named mode's center with the layout's data scatter.
inline double pretrain_step(VelocityFieldParams& lambda, Adam& opt, const Tensor& table, const Environment& env,
                            std::size_t batch, double delta, Rng& rng) {
  const std::size_t c = env.task.prompts, m = env.task.modes;
  std::uniform_int_distribution<std::size_t> pick(0, c * m - 1);
  Tensor x0({batch, kDim});
  std::vector<std::size_t> index(batch);
  for (std::size_t r = 0; r < batch; ++r) {
    index[r] = pick(rng);
    const Point& mu = env.layout.centers[index[r] % m];
    for (std::size_t j = 0; j < kDim; ++j) x0.at(r, j) = mu[j] + env.layout.data_std * standard_normal(rng);
  }
  Tape t;
  const DecoderVars vars = DecoderVars::leaves(t, lambda);
  Var loss = fm_pretrain_loss(vars, x0, table, delta, rng, std::move(index));
  Gradients g = t.backward(loss);
  std::vector<Tensor> grads;
  for (Var v : vars.list()) grads.push_back(g[v]);
  opt.step(lambda.tensors(), grads);
  return t.value(loss).item();
}

}  // namespace dualgrpo
