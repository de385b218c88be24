#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyprobe/harness/config.hpp"

namespace polyprobe::harness {

enum class Stage {
  GenCorpus,
  TrainModel,
  TrainSae,
  Analyze,
  InterveneFeature,
  InterveneGradient,
  InterveneInject,
  InterveneNeuron,
  Report,
};

// Pipeline order.
const std::vector<Stage>& all_stages();
std::string stage_name(Stage s);  // "gen-corpus", ..., "intervene-feature", ..., "report"
// Accepts the names above. Throws ConfigError.
Stage parse_stage(const std::string& name);

// Files a stage writes, relative to the run directory.
std::vector<std::string> stage_outputs(Stage s);

struct RunOptions {
  std::filesystem::path out;
  bool force = false;
  bool quiet = false;  // no progress lines on stderr
};

// A run directory bound to one configuration. Stages run in any order the
// dependencies allow; a stage whose manifest matches the config hash is
// reused. The directory of a different configuration is never touched
// unless `force` is set.
class Run {
 public:
  // Throws ConfigError when `out` holds a run with another config hash and
  // force is off, Io when the directory cannot be created.
  Run(ExperimentConfig config, RunOptions options);

  // Executes (or reuses) one stage. Returns false when reused from cache.
  // Throws StageFailure naming the stage and the cause, including missing
  // upstream artifacts.
  bool execute(Stage s);

  // Every stage in order; returns the report.
  nlohmann::json run_all();

  const ExperimentConfig& config() const { return config_; }
  const Seeds& seeds() const { return seeds_; }
  const std::string& hash() const { return hash_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  // {config_hash, seeds, config}: embedded in every output.
  nlohmann::json provenance() const;
  bool cached(Stage s) const;

 private:
  ExperimentConfig config_;
  Seeds seeds_;
  std::string hash_;
  std::filesystem::path dir_;
  RunOptions options_;
};

// JSON-lines helpers. The first line of every outcome log is a header
// {"kind": "header", ...provenance}.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

// Recomputes a steering/injection family summary from its outcome lines
// (header excluded). Exposed so the report can be checked against the log.
nlohmann::json summarize_family(const std::vector<nlohmann::json>& lines, const ExperimentConfig& config,
                                const Seeds& seeds);
nlohmann::json summarize_neurons(const std::vector<nlohmann::json>& lines, const ExperimentConfig& config);

}  // namespace polyprobe::harness
