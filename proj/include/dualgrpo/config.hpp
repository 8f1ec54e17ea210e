#pragma once

// Run configuration: INI text with one section per module. Every key is
// optional (defaults below); unknown sections/keys and unparsable values are
// reported together, one line per field.

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dualgrpo/reward_env.hpp"
#include "dualgrpo/sft.hpp"
#include "dualgrpo/trainer.hpp"

namespace dualgrpo {

struct EnvConfig {
  std::size_t vocab = 24;
  std::size_t prompts = 8;  // C
  std::size_t modes = 8;    // M
  double radius = 3.0;
  double width = 0.35;
  double support = 6.0;
  double data_std = 0.2;
  double w_aes = 0.2;
  double w_con = 0.2;
  double w_sem = 0.6;
};

struct ModelConfig {
  std::size_t hidden = 32;         // rewriter width h
  std::size_t decoder_width = 64;  // velocity MLP width
};

struct CorpusConfig {
  std::size_t per_symbol = 64;
  double noise = 0.2;  // rho
  NoiseModel model = NoiseModel::symbol_biased;
};

struct SftConfig {
  std::size_t steps = 1500;
  std::size_t batch = 64;
  double lr = 1e-3;
};

struct EvalConfig {
  std::size_t prompts = 400;
  std::size_t scatter_samples = 256;  // per prompt, for the measured decoder scatter
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  long checkpoint_every = 500;  // 0 = only the final checkpoint
};

struct ExperimentConfig {
  RunConfig run;
  EnvConfig env;
  ModelConfig model;
  CorpusConfig corpus;
  SftConfig sft;
  PretrainConfig pretrain;
  TrainerConfig trainer;
  EvalConfig eval;
};

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid config:";
    for (const auto& e : p) s += "\n  " + e;
    return s;
  }
  std::vector<std::string> problems_;
};

namespace detail {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed and count fields share one integer type");
using FieldRef = std::variant<std::size_t*, long*, double*, NoiseModel*, SchedulerConfig*>;

/// Calls f(section, key, ref) for every configurable field, in file order.
template <class F>
void for_each_field(ExperimentConfig& c, F&& f) {
  f("run", "seed", FieldRef{&c.run.seed});
  f("run", "workers", FieldRef{&c.run.workers});
  f("run", "checkpoint_every", FieldRef{&c.run.checkpoint_every});

  f("env", "vocab", FieldRef{&c.env.vocab});
  f("env", "prompts", FieldRef{&c.env.prompts});
  f("env", "modes", FieldRef{&c.env.modes});
  f("env", "radius", FieldRef{&c.env.radius});
  f("env", "width", FieldRef{&c.env.width});
  f("env", "support", FieldRef{&c.env.support});
  f("env", "data_std", FieldRef{&c.env.data_std});
  f("env", "w_aes", FieldRef{&c.env.w_aes});
  f("env", "w_con", FieldRef{&c.env.w_con});
  f("env", "w_sem", FieldRef{&c.env.w_sem});

  f("model", "hidden", FieldRef{&c.model.hidden});
  f("model", "decoder_width", FieldRef{&c.model.decoder_width});

  f("corpus", "per_symbol", FieldRef{&c.corpus.per_symbol});
  f("corpus", "noise", FieldRef{&c.corpus.noise});
  f("corpus", "model", FieldRef{&c.corpus.model});

  f("sft", "steps", FieldRef{&c.sft.steps});
  f("sft", "batch", FieldRef{&c.sft.batch});
  f("sft", "lr", FieldRef{&c.sft.lr});

  f("pretrain", "steps", FieldRef{&c.pretrain.steps});
  f("pretrain", "batch", FieldRef{&c.pretrain.batch});
  f("pretrain", "lr", FieldRef{&c.pretrain.lr});

  auto& t = c.trainer;
  f("trainer", "branches", FieldRef{&t.branches});
  f("trainer", "leaves", FieldRef{&t.leaves});
  f("trainer", "budget", FieldRef{&t.budget});
  f("trainer", "steps", FieldRef{&t.steps});
  f("trainer", "window", FieldRef{&t.window});
  f("trainer", "noise", FieldRef{&t.noise});
  f("trainer", "delta", FieldRef{&t.delta});
  f("trainer", "clip_llm", FieldRef{&t.clip_llm});
  f("trainer", "clip_dit", FieldRef{&t.clip_dit});
  f("trainer", "kl_llm", FieldRef{&t.kl_llm});
  f("trainer", "kl_dit", FieldRef{&t.kl_dit});
  f("trainer", "lr_llm", FieldRef{&t.lr_llm});
  f("trainer", "lr_dit", FieldRef{&t.lr_dit});
  f("trainer", "prompts_per_iter", FieldRef{&t.prompts_per_iter});
  f("trainer", "iterations", FieldRef{&t.iterations});
  f("trainer", "epochs", FieldRef{&t.epochs});
  f("trainer", "scheduler", FieldRef{&t.scheduler});

  f("eval", "prompts", FieldRef{&c.eval.prompts});
  f("eval", "scatter_samples", FieldRef{&c.eval.scatter_samples});
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_text(const FieldRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) {
          return format_double(*p);
        } else if constexpr (std::is_same_v<T, NoiseModel>) {
          return *p == NoiseModel::uniform ? "uniform" : "symbol_biased";
        } else if constexpr (std::is_same_v<T, SchedulerConfig>) {
          return p->to_string();
        } else {
          return std::to_string(*p);
        }
      },
      ref);
}

/// Parses `text` into the field; returns an error message or "".
inline std::string from_text(const FieldRef& ref, const std::string& text) {
  return std::visit(
      [&](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        const char* s = text.c_str();
        char* end = nullptr;
        errno = 0;
        if constexpr (std::is_same_v<T, double>) {
          const double v = std::strtod(s, &end);
          if (end == s || *end != '\0' || errno == ERANGE) return "expected a number, got '" + text + "'";
          *p = v;
        } else if constexpr (std::is_same_v<T, long>) {
          const long v = std::strtol(s, &end, 10);
          if (end == s || *end != '\0' || errno == ERANGE) return "expected an integer, got '" + text + "'";
          *p = v;
        } else if constexpr (std::is_same_v<T, std::size_t>) {
          if (text.empty() || text[0] == '-') return "expected a non-negative integer, got '" + text + "'";
          const unsigned long long v = std::strtoull(s, &end, 10);
          if (end == s || *end != '\0' || errno == ERANGE) {
            return "expected a non-negative integer, got '" + text + "'";
          }
          *p = static_cast<T>(v);
        } else if constexpr (std::is_same_v<T, NoiseModel>) {
          if (text == "uniform") {
            *p = NoiseModel::uniform;
          } else if (text == "symbol_biased") {
            *p = NoiseModel::symbol_biased;
          } else {
            return "expected 'uniform' or 'symbol_biased', got '" + text + "'";
          }
        } else {
          try {
            *p = SchedulerConfig::parse(text);
          } catch (const std::invalid_argument& e) {
            return e.what();
          }
        }
        return "";
      },
      ref);
}

}  // namespace detail

/// Cross-field checks; every problem is named by its section.key.
inline std::vector<std::string> config_problems(const ExperimentConfig& c) {
  std::vector<std::string> out;
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) out.push_back(what);
  };
  need(c.run.workers >= 1, "run.workers: must be >= 1");
  need(c.run.checkpoint_every >= 0, "run.checkpoint_every: must be >= 0");
  need(c.env.prompts >= 1, "env.prompts: must be >= 1");
  need(c.env.modes >= 2, "env.modes: must be >= 2");
  need(c.env.vocab >= c.env.prompts + c.env.modes + 2,
       "env.vocab: must hold prompts + modes + SEP + EOS (>= " + std::to_string(c.env.prompts + c.env.modes + 2) + ")");
  need(c.env.radius > 0.0, "env.radius: must be > 0");
  need(c.env.width > 0.0, "env.width: must be > 0");
  need(c.env.support > 0.0, "env.support: must be > 0");
  need(c.env.data_std >= 0.0, "env.data_std: must be >= 0");
  need(c.env.w_aes >= 0.0 && c.env.w_con >= 0.0 && c.env.w_sem >= 0.0, "env.w_*: reward weights must be >= 0");
  need(std::abs(c.env.w_aes + c.env.w_con + c.env.w_sem - 1.0) <= 1e-9, "env.w_*: reward weights must sum to 1");
  if (c.env.modes >= 2 && c.env.radius > 0.0 && c.env.width > 0.0) {
    const double sep = 2.0 * c.env.radius * std::sin(std::numbers::pi / static_cast<double>(c.env.modes));
    need(sep > 4.0 * c.env.width, "env.width: modes are not separable (neighbour distance must exceed 4 * width)");
  }
  need(c.model.hidden >= 1, "model.hidden: must be >= 1");
  need(c.model.decoder_width >= 1, "model.decoder_width: must be >= 1");
  need(c.corpus.per_symbol >= 1, "corpus.per_symbol: must be >= 1");
  need(c.corpus.noise >= 0.0 && c.corpus.noise < 1.0, "corpus.noise: must lie in [0, 1)");
  need(c.sft.batch >= 1, "sft.batch: must be >= 1");
  need(c.sft.lr > 0.0, "sft.lr: must be > 0");
  need(c.pretrain.batch >= 1, "pretrain.batch: must be >= 1");
  need(c.pretrain.lr > 0.0, "pretrain.lr: must be > 0");
  need(c.eval.prompts >= 1, "eval.prompts: must be >= 1");
  need(c.eval.scatter_samples >= 1, "eval.scatter_samples: must be >= 1");
  try {
    c.trainer.validate();
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    // SchedulerConfig / TimeGrid messages are not prefixed with their key.
    if (msg.rfind("trainer.", 0) != 0) msg = "trainer: " + msg;
    out.push_back(msg);
  }
  return out;
}

inline void validate(const ExperimentConfig& c) {
  auto p = config_problems(c);
  if (!p.empty()) throw ConfigError(std::move(p));
}

/// Parses INI text over the defaults; throws ConfigError listing every bad field.
inline ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({"syntax: line " + std::to_string(e.line()) + ": " + e.message()});
  }
  ExperimentConfig c;
  std::vector<std::string> problems;
  std::set<std::string> known_sections;
  std::set<std::string> known_keys;
  detail::for_each_field(c, [&](const std::string& sec, const std::string& key, detail::FieldRef ref) {
    known_sections.insert(sec);
    known_keys.insert(sec + "." + key);
    const auto section = tree.get_child_optional(pt::ptree::path_type(sec, '\0'));
    if (!section) return;
    const auto value = section->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!value) return;
    const std::string err = detail::from_text(ref, *value);
    if (!err.empty()) problems.push_back(sec + "." + key + ": " + err);
  });
  for (const auto& [sec, body] : tree) {
    if (!known_sections.contains(sec)) {
      problems.push_back(sec + ": unknown section");
      continue;
    }
    for (const auto& [key, _] : body)
      if (!known_keys.contains(sec + "." + key)) problems.push_back(sec + "." + key + ": unknown key");
  }
  if (problems.empty()) problems = config_problems(c);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file " + path.string()});
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every field, one section per module; parse_config(to_ini(c)) == c.
inline std::string to_ini(ExperimentConfig c) {
  std::ostringstream out;
  std::string current;
  detail::for_each_field(c, [&](const std::string& sec, const std::string& key, detail::FieldRef ref) {
    if (sec != current) {
      if (!current.empty()) out << "\n";
      out << "[" << sec << "]\n";
      current = sec;
    }
    out << key << " = " << detail::to_text(ref) << "\n";
  });
  return out.str();
}

inline bool same_config(const ExperimentConfig& a, const ExperimentConfig& b) { return to_ini(a) == to_ini(b); }

// ---------------------------------------------------------------------------
// Construction from config

inline Environment make_environment(const ExperimentConfig& c) {
  Environment env{Vocab(c.env.vocab, c.env.prompts, c.env.modes),
                  ConceptTask::make(c.env.prompts, c.env.modes, c.run.seed),
                  ModeLayout::make(c.env.modes, c.env.radius, c.env.width, c.env.support, c.env.data_std),
                  RewardWeights{c.env.w_aes, c.env.w_con, c.env.w_sem}};
  env.weights.validate();
  return env;
}

}  // namespace dualgrpo
