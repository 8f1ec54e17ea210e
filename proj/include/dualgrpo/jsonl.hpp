#pragma once

// JSON-lines persistence: metrics rows, SFT corpora, rollout-tree dumps.

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualgrpo/reward_env.hpp"
#include "dualgrpo/rollout.hpp"
#include "dualgrpo/trainer.hpp"

namespace dualgrpo {

using json = nlohmann::json;

class JsonlError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Metrics

/// Deterministic fields only; wall-clock time goes to the timings stream.
inline json to_json(const MetricsRow& r) {
  json j;
  j["iteration"] = r.iteration;
  j["r_sem"] = r.r_sem;
  j["r_aes"] = r.r_aes;
  j["r_con"] = r.r_con;
  j["r2"] = r.r2;
  j["accuracy"] = r.accuracy;
  j["kl_llm"] = r.kl_llm;
  j["kl_dit"] = r.kl_dit;
  j["clip_llm"] = r.clip_llm;
  j["clip_dit"] = r.clip_dit;
  j["loss_llm"] = r.loss_llm;
  j["loss_dit"] = r.loss_dit;
  j["beta1"] = r.beta1;
  j["beta2"] = r.beta2;
  j["diverged"] = r.diverged;
  j["skipped"] = r.skipped;
  return j;
}

inline MetricsRow metrics_from_json(const json& j) {
  MetricsRow r;
  r.iteration = j.at("iteration").get<long>();
  r.r_sem = j.at("r_sem").get<double>();
  r.r_aes = j.at("r_aes").get<double>();
  r.r_con = j.at("r_con").get<double>();
  r.r2 = j.at("r2").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.kl_llm = j.at("kl_llm").get<double>();
  r.kl_dit = j.at("kl_dit").get<double>();
  r.clip_llm = j.at("clip_llm").get<double>();
  r.clip_dit = j.at("clip_dit").get<double>();
  r.loss_llm = j.at("loss_llm").get<double>();
  r.loss_dit = j.at("loss_dit").get<double>();
  r.beta1 = j.at("beta1").get<double>();
  r.beta2 = j.at("beta2").get<double>();
  r.diverged = j.at("diverged").get<std::size_t>();
  r.skipped = j.at("skipped").get<bool>();
  return r;
}

/// Appends one JSON object per line and flushes after every line.
class JsonlSink {
 public:
  explicit JsonlSink(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw JsonlError("cannot open " + path.string() + " for writing");
  }

  void write(const json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
    if (!out_) throw JsonlError("write to " + path_.string() + " failed after " + std::to_string(lines_) + " lines");
    ++lines_;
  }
  std::size_t lines() const { return lines_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t lines_ = 0;
};

class MetricsWriteError : public JsonlError {
 public:
  MetricsWriteError(const std::string& what, long last_good)
      : JsonlError(what + " (last good iteration: " + std::to_string(last_good) + ")"), last_good_(last_good) {}
  long last_good() const { return last_good_; }

 private:
  long last_good_;
};

class MetricsSink {
 public:
  explicit MetricsSink(const std::filesystem::path& path) : sink_(path) {}

  void write(const MetricsRow& r) {
    if (r.iteration <= last_) {
      throw MetricsWriteError("metrics: iteration " + std::to_string(r.iteration) + " is not increasing", last_);
    }
    try {
      sink_.write(to_json(r));
    } catch (const JsonlError& e) {
      throw MetricsWriteError(e.what(), last_);
    }
    last_ = r.iteration;
  }
  long last_good() const { return last_; }

 private:
  JsonlSink sink_;
  long last_ = -1;
};

template <class F>
void for_each_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw JsonlError("cannot read " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw JsonlError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    try {
      f(j, n);
    } catch (const json::exception& e) {
      throw JsonlError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::vector<MetricsRow> rows;
  for_each_line(path, [&](const json& j, std::size_t) { rows.push_back(metrics_from_json(j)); });
  return rows;
}

// ---------------------------------------------------------------------------
// SFT corpus

inline json to_json(const SftRecord& r) { return {{"symbol", r.symbol}, {"cot", r.cot}, {"refined", r.refined}}; }

inline SftRecord record_from_json(const json& j) {
  return {j.at("symbol").get<std::size_t>(), j.at("cot").get<std::vector<Token>>(),
          j.at("refined").get<std::vector<Token>>()};
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<SftRecord>& corpus) {
  JsonlSink sink(path);
  for (const auto& r : corpus) sink.write(to_json(r));
}

inline std::vector<SftRecord> read_corpus(const std::filesystem::path& path) {
  std::vector<SftRecord> out;
  for_each_line(path, [&](const json& j, std::size_t) { out.push_back(record_from_json(j)); });
  return out;
}

// ---------------------------------------------------------------------------
// Rollout trees, one leaf per line

inline void dump_tree(JsonlSink& sink, long iteration, std::size_t index, const RolloutTree& tree) {
  for (std::size_t j = 0; j < tree.branches.size(); ++j) {
    const Branch& b = tree.branches[j];
    for (std::size_t k = 0; k < b.leaves.size(); ++k) {
      const Leaf& l = b.leaves[k];
      json row = {{"iteration", iteration},   {"tree", index},
                  {"prompt", tree.prompt},    {"branch", j},
                  {"leaf", k},                {"tokens", b.trace.tokens},
                  {"refined", b.trace.refined}, {"null_condition", b.cond.null},
                  {"diverged", l.diverged}};
      if (!l.diverged) {
        row["final"] = {l.final[0], l.final[1]};
        row["r_sem"] = l.reward.sem;
        row["r_aes"] = l.reward.aes;
        row["r_con"] = l.reward.con;
        row["r2"] = l.reward.r2_raw;
      }
      sink.write(row);
    }
  }
}

}  // namespace dualgrpo
