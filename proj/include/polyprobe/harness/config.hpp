#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyprobe/eval/metrics.hpp"
#include "polyprobe/interference/interference.hpp"
#include "polyprobe/model/config.hpp"
#include "polyprobe/model/training.hpp"
#include "polyprobe/sae/sae.hpp"

namespace polyprobe::harness {

// Planted corpus layout; see model::make_planted_spec.
struct CorpusConfig {
  std::size_t n_groups = 16;
  std::size_t group_size = 12;
  std::size_t n_sequences = 512;
  std::size_t seq_len = 32;
};

struct AnalysisConfig {
  std::vector<double> cutoffs = interference::kDefaultCutoffs;
  // Semantic clusters at this cutoff define "own cluster" exclusion and the
  // S(target, j) ceiling for interference candidates.
  double relevancy_cutoff = 0.4;
  double neuron_cutoff = 0.4;
  double neuron_threshold = 0.2;
  std::size_t neuron_top = 3;
  interference::PairThresholds pairs;
};

struct SteeringConfig {
  std::vector<double> feature_grid;   // SAE directions
  std::vector<double> gradient_grid;  // token gradients
  double guard_tv = 0.9;
  eval::Metric metric = eval::Metric::DeltaC;
  bool prefilter = true;
  double prefilter_threshold = 0.05;
};

struct TargetConfig {
  std::size_t max_targets = 120;
  std::size_t min_targets = 20;
  std::size_t per_bin = 2;
  std::size_t prompts_per_target = 3;
  std::size_t prompt_len = 16;
  // Prompts are corpus windows free of T_f whose baseline c(O, T_f) exceeds this.
  double baseline_floor = 0.1;
  std::size_t prompt_pool = 200;
};

struct InjectionConfig {
  double ratio = 0.8;
  std::size_t max_len = 8;
  std::optional<model::TokenId> separator;
};

struct NeuronConfig {
  std::vector<double> scales{0.0, 2.0, 5.0, 10.0, 20.0};
  std::size_t prompts = 3;
};

struct ReportConfig {
  std::size_t resamples = 2000;
  double level = 0.95;
};

struct ExperimentConfig {
  std::string run_id = "default";
  std::uint64_t seed = 1;
  model::ModelConfig model;
  model::TrainHyper train;
  CorpusConfig corpus;
  sae::SaeConfig sae;
  model::Site sae_site{0, model::SiteKind::ResidPost};
  AnalysisConfig analysis;
  std::vector<interference::Bin> bins = interference::default_bins();
  SteeringConfig steering;
  TargetConfig targets;
  InjectionConfig injection;
  NeuronConfig neuron;
  ReportConfig report;
  // Default location of the run directory; --out overrides. Not part of the
  // hashed configuration, so relocated runs produce identical outputs.
  std::filesystem::path output_dir = "runs/default";

  ExperimentConfig();
};

// Every stream the pipeline draws from, derived from the master seed.
struct Seeds {
  std::uint64_t corpus = 0;
  std::uint64_t model_a = 0;
  std::uint64_t model_b = 0;
  std::uint64_t train = 0;
  std::uint64_t sae = 0;
  std::uint64_t experiment = 0;
};

Seeds derive_seeds(std::uint64_t master);

void to_json(nlohmann::json& j, const Seeds& s);

// Canonical form: every field, output_dir excluded.
nlohmann::json to_json(const ExperimentConfig& c);
// Missing keys take defaults. Throws ConfigError on unknown keys, wrong
// types or invalid values.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Throws ConfigError.
void validate(const ExperimentConfig& c);

// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

}  // namespace polyprobe::harness
