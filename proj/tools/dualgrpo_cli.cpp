// Command-line front end: gen-corpus, sft, pretrain-decoder, train, eval,
// ablate-scheduler, plot.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dualgrpo/dualgrpo.hpp"

namespace fs = std::filesystem;
using namespace dualgrpo;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs/default";
  std::optional<std::size_t> workers;
  std::optional<long> iters;
  std::string scheduler;
  bool dump_trees = false;
  std::string checkpoint;
  std::string metrics;
  std::string output;
};

ExperimentConfig resolve(const Common& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.run.seed = *o.seed;
  if (o.workers) c.run.workers = *o.workers;
  if (o.iters) c.trainer.iterations = *o.iters;
  if (!o.scheduler.empty()) {
    try {
      c.trainer.scheduler = SchedulerConfig::parse(o.scheduler);
    } catch (const std::invalid_argument& e) {
      throw ConfigError({std::string("--scheduler: ") + e.what()});
    }
  }
  validate(c);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void save_run_config(const fs::path& dir, const ExperimentConfig& c) { write_text(dir / "config.ini", to_ini(c)); }

RewriterParams load_rewriter(const fs::path& path) { return extract_params<RewriterParams>(load_checkpoint(path), "phi"); }

VelocityFieldParams load_decoder(const fs::path& path) {
  return extract_params<VelocityFieldParams>(load_checkpoint(path), "lambda");
}

std::vector<SftRecord> corpus_for(const ExperimentConfig& c, const Environment& env, const fs::path& dir) {
  const fs::path p = dir / "corpus.jsonl";
  if (fs::exists(p)) return read_corpus(p);
  return generate_corpus(c, env);
}

int cmd_gen_corpus(const Common& o) {
  const auto c = resolve(o);
  const auto env = make_environment(c);
  const fs::path dir = o.out_dir;
  const auto corpus = generate_corpus(c, env);
  write_corpus(dir / "corpus.jsonl", corpus);
  save_run_config(dir, c);
  std::cout << "wrote " << corpus.size() << " records to " << (dir / "corpus.jsonl").string() << "\n";
  return 0;
}

int cmd_sft(const Common& o) {
  const auto c = resolve(o);
  const auto env = make_environment(c);
  const fs::path dir = o.out_dir;
  const auto corpus = corpus_for(c, env, dir);
  const auto res = run_sft(c, env, corpus, [&](std::size_t s, double loss) {
    if (s % 250 == 0 || s + 1 == c.sft.steps) std::printf("sft step %zu loss %.6f\n", s, loss);
  });
  NamedTensors t;
  append_params(t, "phi", res.phi);
  save_checkpoint(dir / "sft.ckpt", t);
  write_text(dir / "sft_report.json", to_json(res.report).dump(2) + "\n");
  save_run_config(dir, c);
  std::printf("greedy accuracy %.4f, embedding drift %.4f\n", res.report.accuracy, res.report.drift);
  return 0;
}

int cmd_pretrain(const Common& o) {
  const auto c = resolve(o);
  const auto env = make_environment(c);
  const fs::path dir = o.out_dir;
  const auto phi = load_rewriter(o.checkpoint.empty() ? dir / "sft.ckpt" : fs::path(o.checkpoint));
  const auto res = run_pretrain(c, env, phi, [&](std::size_t s, double loss) {
    if (s % 500 == 0 || s + 1 == c.pretrain.steps) std::printf("pretrain step %zu loss %.6f\n", s, loss);
  });
  NamedTensors t;
  append_params(t, "lambda", res.lambda);
  save_checkpoint(dir / "decoder.ckpt", t);
  const double sigma =
      measure_scatter(res.lambda, phi, env, TimeGrid{c.trainer.steps, c.trainer.delta}, c.eval.scatter_samples,
                      derive_seed(c.run.seed, {stream_tag("scatter")}));
  const double bound = oracle_upper_bound(env.task, env.layout, env.weights, sigma);
  write_text(dir / "decoder_report.json",
             json{{"final_loss", res.final_loss}, {"sigma_x", sigma}, {"oracle_upper_bound", bound}}.dump(2) + "\n");
  std::printf("decoder scatter sigma_x %.4f, oracle upper bound %.4f\n", sigma, bound);
  return 0;
}

int cmd_train(const Common& o) {
  const auto c = resolve(o);
  const auto env = make_environment(c);
  const fs::path dir = o.out_dir;
  const auto phi = load_rewriter(dir / "sft.ckpt");
  const auto lambda = load_decoder(dir / "decoder.ckpt");
  save_run_config(dir, c);
  TrainOptions opt;
  opt.out_dir = dir;
  opt.dump_trees = o.dump_trees;
  opt.on_row = [&](const MetricsRow& r) {
    if (r.iteration % 100 == 0 || r.iteration + 1 == c.trainer.iterations) {
      std::printf("iter %ld r_sem %.4f r_aes %.4f r_con %.4f acc %.3f kl %.2e/%.2e%s\n", r.iteration, r.r_sem,
                  r.r_aes, r.r_con, r.accuracy, r.kl_llm, r.kl_dit, r.skipped ? " (skipped)" : "");
    }
  };
  run_training(c, env, phi, lambda, opt);
  return 0;
}

int cmd_eval(const Common& o) {
  const auto c = resolve(o);
  const auto env = make_environment(c);
  const fs::path dir = o.out_dir;
  RewriterParams phi;
  VelocityFieldParams lambda;
  if (!o.checkpoint.empty()) {
    const auto t = load_checkpoint(o.checkpoint);
    phi = has_params(t, "phi") ? extract_params<RewriterParams>(t, "phi") : load_rewriter(dir / "sft.ckpt");
    lambda = has_params(t, "lambda") ? extract_params<VelocityFieldParams>(t, "lambda")
                                     : load_decoder(dir / "decoder.ckpt");
  } else if (fs::exists(dir / "final.ckpt")) {
    const auto t = load_checkpoint(dir / "final.ckpt");
    phi = extract_params<RewriterParams>(t, "phi");
    lambda = extract_params<VelocityFieldParams>(t, "lambda");
  } else {
    phi = load_rewriter(dir / "sft.ckpt");
    lambda = load_decoder(dir / "decoder.ckpt");
  }
  const auto e = evaluate_params(phi, lambda, c, env);
  const std::string text = to_json(e).dump(2);
  write_text(dir / "eval.json", text + "\n");
  std::cout << text << "\n";
  return 0;
}

int cmd_ablate(const Common& o) {
  auto c = resolve(o);
  const auto env = make_environment(c);
  const fs::path dir = o.out_dir;
  const auto phi = load_rewriter(dir / "sft.ckpt");
  const auto lambda = load_decoder(dir / "decoder.ckpt");
  long switch_step = c.trainer.iterations / 2;
  if (c.trainer.scheduler.kind == SchedulerKind::staged) switch_step = c.trainer.scheduler.switch_step;
  if (switch_step <= 0) throw ConfigError({"ablate-scheduler: need at least 2 iterations for a staged switch"});
  const auto rows = ablate_scheduler(c, env, phi, lambda, switch_step, dir / "ablation");
  const std::string table = ablation_table(rows);
  write_text(dir / "ablation" / "table.md", table);
  std::cout << table;
  return 0;
}

int cmd_plot(const Common& o) {
  const fs::path dir = o.out_dir;
  const fs::path metrics = o.metrics.empty() ? dir / "metrics.jsonl" : fs::path(o.metrics);
  const fs::path output = o.output.empty() ? dir / "rewards.svg" : fs::path(o.output);
  const auto rows = read_metrics(metrics);
  if (rows.empty()) {
    std::cerr << "plot: " << metrics.string() << " has no rows\n";
    return 1;
  }
  write_text(output, plot_curves(rows));
  std::cout << "wrote " << output.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-GRPO toy experiments"};
  app.require_subcommand(1);
  Common o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed (overrides run.seed)");
    sub->add_option("--out-dir", o.out_dir, "run directory")->capture_default_str();
    sub->add_option("--workers", o.workers, "rollout worker threads (overrides run.workers)");
    sub->add_option("--iters", o.iters, "training iterations (overrides trainer.iterations)");
    sub->add_option("--scheduler", o.scheduler, "balanced | staged:<step>");
    sub->add_flag("--dump-trees", o.dump_trees, "write every rollout tree to trees.jsonl");
  };

  struct Cmd {
    const char* name;
    const char* help;
    int (*fn)(const Common&);
  };
  const Cmd cmds[] = {
      {"gen-corpus", "emit the SFT corpus", cmd_gen_corpus},
      {"sft", "behaviour-clone the rewriter", cmd_sft},
      {"pretrain-decoder", "flow-matching fit of the decoder", cmd_pretrain},
      {"train", "Dual-GRPO training", cmd_train},
      {"eval", "greedy evaluation", cmd_eval},
      {"ablate-scheduler", "balanced vs staged scheduler", cmd_ablate},
      {"plot", "render reward curves to SVG", cmd_plot},
  };
  int (*chosen)(const Common&) = nullptr;
  for (const auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub);
    if (std::string(c.name) == "pretrain-decoder" || std::string(c.name) == "eval")
      sub->add_option("--checkpoint", o.checkpoint, "checkpoint to read instead of the run directory's");
    if (std::string(c.name) == "plot") {
      sub->add_option("--metrics", o.metrics, "metrics JSONL (default <out-dir>/metrics.jsonl)");
      sub->add_option("--output", o.output, "SVG path (default <out-dir>/rewards.svg)");
    }
    sub->callback([&chosen, fn = c.fn] { chosen = fn; });
  }

  CLI11_PARSE(app, argc, argv);
  try {
    return chosen(o);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
