#include "polyprobe/harness/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "internal.hpp"
#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/core/error.hpp"

namespace polyprobe::harness {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages{Stage::GenCorpus,         Stage::TrainModel,        Stage::TrainSae,
                                         Stage::Analyze,           Stage::InterveneFeature,  Stage::InterveneGradient,
                                         Stage::InterveneInject,   Stage::InterveneNeuron,   Stage::Report};
  return stages;
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::GenCorpus:
      return "gen-corpus";
    case Stage::TrainModel:
      return "train-model";
    case Stage::TrainSae:
      return "train-sae";
    case Stage::Analyze:
      return "analyze";
    case Stage::InterveneFeature:
      return "intervene-feature";
    case Stage::InterveneGradient:
      return "intervene-gradient";
    case Stage::InterveneInject:
      return "intervene-inject";
    case Stage::InterveneNeuron:
      return "intervene-neuron";
    case Stage::Report:
      return "report";
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (stage_name(s) == name) {
      return s;
    }
  }
  fail(ErrorCode::ConfigError, "unknown stage '" + name + "'");
}

std::vector<std::string> stage_outputs(Stage s) {
  switch (s) {
    case Stage::GenCorpus:
      return {"corpus.json"};
    case Stage::TrainModel:
      return {"model_a.ckpt", "model_b.ckpt", "train_report.json"};
    case Stage::TrainSae:
      return {"sae_a.ckpt", "sae_b.ckpt", "sae_report.json"};
    case Stage::Analyze:
      return {"interference_a.ckpt", "interference_b.ckpt", "glosses_a.jsonl", "glosses_b.jsonl",
              "analysis_a.json",     "analysis_b.json",     "neurons.json",    "shared_pairs.json",
              "targets.json"};
    case Stage::InterveneFeature:
      return {"outcomes_feature.jsonl"};
    case Stage::InterveneGradient:
      return {"outcomes_gradient.jsonl"};
    case Stage::InterveneInject:
      return {"outcomes_inject.jsonl"};
    case Stage::InterveneNeuron:
      return {"outcomes_neuron.jsonl"};
    case Stage::Report:
      return {"report.json", "bins_feature.csv", "bins_gradient.csv", "bins_inject.csv", "neuron_groups.csv"};
  }
  return {};
}

namespace {

std::vector<Stage> dependencies(Stage s) {
  switch (s) {
    case Stage::GenCorpus:
      return {};
    case Stage::TrainModel:
      return {Stage::GenCorpus};
    case Stage::TrainSae:
      return {Stage::GenCorpus, Stage::TrainModel};
    case Stage::Analyze:
      return {Stage::GenCorpus, Stage::TrainModel, Stage::TrainSae};
    case Stage::InterveneFeature:
    case Stage::InterveneGradient:
    case Stage::InterveneInject:
    case Stage::InterveneNeuron:
      return {Stage::GenCorpus, Stage::TrainModel, Stage::TrainSae, Stage::Analyze};
    case Stage::Report:
      return {Stage::TrainModel,       Stage::TrainSae,        Stage::Analyze,        Stage::InterveneFeature,
              Stage::InterveneGradient, Stage::InterveneInject, Stage::InterveneNeuron};
  }
  return {};
}

fs::path manifest_path(const fs::path& dir, Stage s) { return dir / "stages" / (stage_name(s) + ".json"); }

std::optional<std::string> stored_hash(const fs::path& file) {
  if (!fs::exists(file)) {
    return std::nullopt;
  }
  const json j = json::parse(core::read_file(file), nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("config_hash") || !j.at("config_hash").is_string()) {
    return std::nullopt;
  }
  return j.at("config_hash").get<std::string>();
}

}  // namespace

Run::Run(ExperimentConfig config, RunOptions options)
    : config_(std::move(config)), seeds_(derive_seeds(config_.seed)), hash_(config_hash(config_)),
      dir_(options.out.empty() ? config_.output_dir : options.out), options_(std::move(options)) {
  validate(config_);
  const fs::path run_file = dir_ / "run.json";
  const auto existing = stored_hash(run_file);
  if (existing && *existing != hash_) {
    require(options_.force, ErrorCode::ConfigError,
            dir_.string() + " holds a run of config " + *existing + " (this config is " + hash_ +
                "); pass --force to overwrite");
    fs::remove_all(dir_ / "stages");
  } else if (!existing && fs::exists(dir_) && !fs::is_empty(dir_)) {
    require(options_.force, ErrorCode::ConfigError,
            dir_.string() + " exists and is not a run directory; pass --force to use it");
  }
  std::error_code ec;
  fs::create_directories(dir_ / "stages", ec);
  require(!ec, ErrorCode::Io, "cannot create " + dir_.string() + ": " + ec.message());
  if (existing != hash_) {
    detail::write_json(run_file, provenance());
  }
}

json Run::provenance() const {
  return json{{"config_hash", hash_}, {"seeds", seeds_}, {"config", to_json(config_)}};
}

bool Run::cached(Stage s) const {
  if (stored_hash(manifest_path(dir_, s)) != hash_) {
    return false;
  }
  for (const auto& f : stage_outputs(s)) {
    if (!fs::exists(dir_ / f)) {
      return false;
    }
  }
  return true;
}

bool Run::execute(Stage s) {
  const std::string name = stage_name(s);
  for (Stage dep : dependencies(s)) {
    if (!cached(dep)) {
      fail(ErrorCode::StageFailure, name + ": " + stage_name(dep) + " missing (run it first)");
    }
  }
  if (!options_.force && cached(s)) {
    if (!options_.quiet) {
      std::cerr << "[polyprobe] " << name << ": cached\n";
    }
    return false;
  }
  const auto t0 = std::chrono::steady_clock::now();
  try {
    switch (s) {
      case Stage::GenCorpus:
        detail::gen_corpus(*this);
        break;
      case Stage::TrainModel:
        detail::train_models(*this);
        break;
      case Stage::TrainSae:
        detail::train_saes(*this);
        break;
      case Stage::Analyze:
        detail::analyze(*this);
        break;
      case Stage::InterveneFeature:
        detail::intervene_steering(*this, false);
        break;
      case Stage::InterveneGradient:
        detail::intervene_steering(*this, true);
        break;
      case Stage::InterveneInject:
        detail::intervene_inject(*this);
        break;
      case Stage::InterveneNeuron:
        detail::intervene_neuron(*this);
        break;
      case Stage::Report:
        detail::report(*this);
        break;
    }
  } catch (const Error& e) {
    fail(ErrorCode::StageFailure, name + ": " + e.what());
  } catch (const std::exception& e) {
    fail(ErrorCode::StageFailure, name + ": " + e.what());
  }
  detail::write_json(manifest_path(dir_, s),
                     json{{"stage", name}, {"config_hash", hash_}, {"outputs", stage_outputs(s)}});
  if (!options_.quiet) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", secs);
    std::cerr << "[polyprobe] " << name << ": done in " << buf << " s\n";
  }
  return true;
}

json Run::run_all() {
  for (Stage s : all_stages()) {
    execute(s);
  }
  return detail::read_json(path("report.json"));
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(core::read_file(path));
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    json j = json::parse(line, nullptr, false);
    require(!j.is_discarded(), ErrorCode::CorruptFile,
            path.string() + ": line " + std::to_string(lineno) + " is not valid JSON");
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace polyprobe::harness
