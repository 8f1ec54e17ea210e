#pragma once

// Stage-one policy: a single-layer tanh recurrent token model. The raw prompt
// symbol is the first input; the model then emits CoT tokens, SEP, a refined
// segment and EOS. The mean hidden state over the refined segment is the
// conditioning vector handed to the flow decoder.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <iterator>
#include <optional>
#include <vector>

#include "dualgrpo/autodiff.hpp"
#include "dualgrpo/random.hpp"
#include "dualgrpo/tensor.hpp"
#include "dualgrpo/vocab.hpp"

namespace dualgrpo {

struct RewriterParams {
  Tensor embed;  // V x h
  Tensor w_in;   // h x h
  Tensor w_rec;  // h x h
  Tensor bias;   // 1 x h
  Tensor w_out;  // h x V

  std::size_t vocab_size() const { return embed.rows(); }
  std::size_t hidden() const { return embed.cols(); }

  std::vector<Tensor*> tensors() { return {&embed, &w_in, &w_rec, &bias, &w_out}; }
  std::vector<const Tensor*> tensors() const { return {&embed, &w_in, &w_rec, &bias, &w_out}; }
  static std::vector<std::string> names() { return {"embed", "w_in", "w_rec", "bias", "w_out"}; }

  bool all_finite() const {
    return std::ranges::all_of(tensors(), [](const Tensor* t) { return t->all_finite(); });
  }

  static RewriterParams zeros(std::size_t vocab, std::size_t hidden) {
    return {Tensor::zeros(vocab, hidden), Tensor::zeros(hidden, hidden), Tensor::zeros(hidden, hidden),
            Tensor::zeros(1, hidden), Tensor::zeros(hidden, vocab)};
  }

  /// Output projection starts near zero so the untrained policy is close to
  /// uniform over the vocabulary.
  static RewriterParams init(std::size_t vocab, std::size_t hidden, Rng& rng) {
    RewriterParams p = zeros(vocab, hidden);
    const double rec = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (auto& v : p.embed.data()) v = standard_normal(rng);
    for (auto& v : p.w_in.data()) v = rec * standard_normal(rng);
    for (auto& v : p.w_rec.data()) v = 0.5 * rec * standard_normal(rng);
    for (auto& v : p.w_out.data()) v = 0.01 * standard_normal(rng);
    return p;
  }

  friend bool operator==(const RewriterParams&, const RewriterParams&) = default;
};

/// Parameters placed on a tape, either as differentiable leaves or constants.
struct RewriterVars {
  Var embed, w_in, w_rec, bias, w_out;

  static RewriterVars leaves(Tape& t, const RewriterParams& p) {
    return {t.leaf(p.embed), t.leaf(p.w_in), t.leaf(p.w_rec), t.leaf(p.bias), t.leaf(p.w_out)};
  }
  static RewriterVars constants(Tape& t, const RewriterParams& p) {
    return {t.constant(p.embed), t.constant(p.w_in), t.constant(p.w_rec), t.constant(p.bias), t.constant(p.w_out)};
  }
  std::vector<Var> list() const { return {embed, w_in, w_rec, bias, w_out}; }
  std::size_t hidden() const { return embed.tape->value(embed).cols(); }
};

/// h' = tanh(E[tokens] W_in + h W_rec + b), batched over rows.
inline Var rnn_step(const RewriterVars& p, Var h_prev, std::vector<Token> tokens) {
  Tape& t = *p.embed.tape;
  const std::size_t b = tokens.size();
  Var x = gather_rows(p.embed, std::move(tokens));
  Var ones = t.constant(Tensor({b, 1}, 1.0));
  return tanh(add(add(matmul(x, p.w_in), matmul(h_prev, p.w_rec)), matmul(ones, p.bias)));
}

inline Var initial_state(Tape& t, std::size_t batch, std::size_t hidden) {
  return t.constant(Tensor::zeros(batch, hidden));
}

struct ReasoningTrace {
  Token prompt = 0;
  std::vector<Token> tokens;
  std::vector<double> log_probs;  // under the sampling policy, one per token
  std::vector<Token> refined;     // strictly between the last SEP and EOS
  bool terminated = false;        // ended with EOS within the budget

  bool well_formed() const { return terminated && !refined.empty(); }
  std::size_t length() const { return tokens.size(); }
  friend bool operator==(const ReasoningTrace&, const ReasoningTrace&) = default;
};

/// Fills `refined` and `terminated` from `tokens`.
inline void finalize_trace(ReasoningTrace& tr, const Vocab& vocab) {
  tr.refined.clear();
  tr.terminated = !tr.tokens.empty() && tr.tokens.back() == vocab.eos();
  if (!tr.terminated) return;
  const auto body_end = tr.tokens.end() - 1;
  auto sep = std::find(std::make_reverse_iterator(body_end), tr.tokens.rend(), vocab.sep());
  if (sep == tr.tokens.rend()) return;
  tr.refined.assign(sep.base(), body_end);
}

inline void check_tokens(const Vocab& vocab, std::span<const Token> tokens, const char* where) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!vocab.contains(tokens[i])) {
      throw std::out_of_range(std::string(where) + ": token " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " is outside the vocabulary of " + std::to_string(vocab.size()));
    }
  }
}

/// Next-token log-probabilities (1 x V) after reading q and `prefix`.
inline Tensor forward_logits(std::span<const Token> prefix, Token q, const RewriterParams& params,
                             const Vocab& vocab) {
  check_tokens(vocab, std::span<const Token>(&q, 1), "forward_logits");
  check_tokens(vocab, prefix, "forward_logits");
  Tape t;
  const RewriterVars p = RewriterVars::constants(t, params);
  Var h = rnn_step(p, initial_state(t, 1, params.hidden()), {q});
  for (Token z : prefix) h = rnn_step(p, h, {z});
  return t.value(log_softmax(matmul(h, p.w_out)));
}

inline Tensor tempered(const Tensor& logits, double temperature) {
  return kernels::map(logits, [temperature](double x) { return x / temperature; });
}

inline double entropy_of_log_probs(const Tensor& lp) {
  double h = 0.0;
  for (double l : lp.data()) h -= std::exp(l) * l;
  return h;
}

/// Samples one trace. temperature == 0 decodes greedily (lowest id wins ties)
/// and records untempered log-probabilities; otherwise tokens are drawn from
/// softmax(logits / temperature) and that distribution's log-probs are stored.
inline ReasoningTrace sample_sequence(Token q, std::size_t budget, double temperature,
                                      const RewriterParams& params, const Vocab& vocab, Rng& rng) {
  if (temperature < 0.0) throw std::invalid_argument("sample_sequence: temperature must be >= 0");
  if (budget < 3) throw std::invalid_argument("sample_sequence: budget must be >= 3");
  check_tokens(vocab, std::span<const Token>(&q, 1), "sample_sequence");
  ReasoningTrace tr;
  tr.prompt = q;
  Tape t;
  const RewriterVars p = RewriterVars::constants(t, params);
  Var h = rnn_step(p, initial_state(t, 1, params.hidden()), {q});
  while (tr.tokens.size() < budget) {
    Var logits = matmul(h, p.w_out);
    Token next = 0;
    double lp = 0.0;
    if (temperature == 0.0) {
      const Tensor l = t.value(log_softmax(logits));
      next = static_cast<Token>(std::max_element(l.data().begin(), l.data().end()) - l.data().begin());
      lp = l[next];
    } else {
      const Tensor l = temperature == 1.0 ? t.value(log_softmax(logits))
                                          : kernels::log_softmax_rows(tempered(t.value(logits), temperature));
      const double u = uniform01(rng);
      double cum = 0.0;
      next = l.size() - 1;
      for (std::size_t v = 0; v < l.size(); ++v) {
        cum += std::exp(l[v]);
        if (u < cum) {
          next = v;
          break;
        }
      }
      lp = l[next];
    }
    tr.tokens.push_back(next);
    tr.log_probs.push_back(lp);
    if (next == vocab.eos()) break;
    h = rnn_step(p, h, {next});
  }
  finalize_trace(tr, vocab);
  return tr;
}

/// Teacher-forced replay of several traces in one batch. Row b of step p
/// reads input (q for p = 0, else tokens[p-1]) and predicts tokens[p].
struct TraceReplay {
  std::vector<Var> hidden;     // per position, B x h, state after reading the input
  std::vector<Var> logits;     // per position, B x V
  std::vector<Var> log_probs;  // per position, B x V
  std::vector<Var> token_log_prob;  // per position, B x 1 (0 on inactive rows)
  std::vector<std::vector<bool>> active;
  std::size_t max_len = 0;
};

inline TraceReplay replay_traces(const RewriterVars& p, std::span<const ReasoningTrace* const> traces,
                                 const Vocab& vocab) {
  Tape& t = *p.embed.tape;
  const std::size_t b = traces.size();
  TraceReplay out;
  for (const auto* tr : traces) {
    check_tokens(vocab, tr->tokens, "replay_traces");
    out.max_len = std::max(out.max_len, tr->tokens.size());
  }
  const std::size_t v = vocab.size();
  Var ones_v = t.constant(Tensor({v, 1}, 1.0));
  Var h = initial_state(t, b, p.hidden());
  for (std::size_t pos = 0; pos < out.max_len; ++pos) {
    std::vector<Token> input(b);
    std::vector<bool> act(b);
    Tensor pick({b, v});
    for (std::size_t r = 0; r < b; ++r) {
      const auto& tr = *traces[r];
      act[r] = pos < tr.tokens.size();
      input[r] = pos == 0 ? tr.prompt : (pos - 1 < tr.tokens.size() ? tr.tokens[pos - 1] : vocab.eos());
      if (act[r]) pick.at(r, tr.tokens[pos]) = 1.0;
    }
    h = rnn_step(p, h, std::move(input));
    Var logits = matmul(h, p.w_out);
    Var lp = log_softmax(logits);
    out.hidden.push_back(h);
    out.logits.push_back(logits);
    out.log_probs.push_back(lp);
    out.token_log_prob.push_back(matmul(mul(lp, t.constant(std::move(pick))), ones_v));
    out.active.push_back(std::move(act));
  }
  return out;
}

/// Per-token log-probabilities of a stored trace under `params` (temperature 1).
inline std::vector<double> sequence_log_prob(const ReasoningTrace& trace, const RewriterParams& params,
                                             const Vocab& vocab) {
  if (trace.log_probs.size() != trace.tokens.size()) {
    throw std::invalid_argument("sequence_log_prob: " + std::to_string(trace.tokens.size()) + " tokens but " +
                                std::to_string(trace.log_probs.size()) + " stored log-probs");
  }
  Tape t;
  const RewriterVars p = RewriterVars::constants(t, params);
  const ReasoningTrace* one[] = {&trace};
  const TraceReplay rp = replay_traces(p, one, vocab);
  std::vector<double> out;
  out.reserve(trace.tokens.size());
  for (std::size_t pos = 0; pos < trace.tokens.size(); ++pos) out.push_back(t.value(rp.token_log_prob[pos])[0]);
  return out;
}

struct ConditioningVector {
  Tensor value;       // 1 x h
  bool null = false;  // ill-formed trace, value is zero
};

/// Mean hidden state over the refined segment. The CoT reaches it only
/// through the recurrent state carried into the segment.
inline ConditioningVector encode_condition(const ReasoningTrace& trace, const RewriterParams& params,
                                           const Vocab& vocab) {
  const std::size_t h = params.hidden();
  if (!trace.well_formed()) return {Tensor::zeros(1, h), true};
  check_tokens(vocab, trace.tokens, "encode_condition");
  const std::size_t eos_at = trace.tokens.size() - 1;
  const std::size_t first = eos_at - trace.refined.size();
  Tape t;
  const RewriterVars p = RewriterVars::constants(t, params);
  Var state = rnn_step(p, initial_state(t, 1, h), {trace.prompt});
  Tensor acc = Tensor::zeros(1, h);
  for (std::size_t i = 0; i < eos_at; ++i) {
    state = rnn_step(p, state, {trace.tokens[i]});
    if (i >= first) {
      const Tensor& s = t.value(state);
      for (std::size_t j = 0; j < h; ++j) acc[j] += s[j];
    }
  }
  const double n = static_cast<double>(trace.refined.size());
  for (auto& x : acc.data()) x /= n;
  return {std::move(acc), false};
}

/// Builds a teacher-forced trace: q, cot..., SEP, refined..., EOS, with
/// log-probs evaluated under `params`.
inline ReasoningTrace forced_trace(Token q, std::span<const Token> cot, std::span<const Token> refined,
                                   const RewriterParams& params, const Vocab& vocab) {
  ReasoningTrace tr;
  tr.prompt = q;
  tr.tokens.assign(cot.begin(), cot.end());
  tr.tokens.push_back(vocab.sep());
  tr.tokens.insert(tr.tokens.end(), refined.begin(), refined.end());
  tr.tokens.push_back(vocab.eos());
  tr.log_probs.assign(tr.tokens.size(), 0.0);
  tr.log_probs = sequence_log_prob(tr, params, vocab);
  finalize_trace(tr, vocab);
  return tr;
}

/// The single mode named by the refined segment, if it names exactly one.
inline std::optional<std::size_t> named_mode(const ReasoningTrace& tr, const Vocab& vocab) {
  if (!tr.well_formed()) return std::nullopt;
  std::optional<std::size_t> found;
  for (Token z : tr.refined) {
    if (auto m = vocab.mode_of(z)) {
      if (found && *found != *m) return std::nullopt;
      found = m;
    }
  }
  return found;
}

}  // namespace dualgrpo
