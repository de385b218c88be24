#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyprobe/harness/pipeline.hpp"
#include "polyprobe/model/corpus.hpp"
#include "polyprobe/model/transformer.hpp"
#include "polyprobe/sae/sae.hpp"

namespace polyprobe::harness::detail {

using nlohmann::json;

void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);
// Writes a header line with the run provenance followed by one line per record.
void write_jsonl(const std::filesystem::path& path, const json& header, const std::vector<json>& lines);

// Shortest round-trip decimal form.
std::string fmt(double x);

struct CorpusArtifact {
  model::CorpusSpec spec;
  model::Corpus sequences;
};

CorpusArtifact load_corpus(const Run& run);
model::Transformer load_model(const Run& run, const std::string& tag);
sae::Sae load_sae(const Run& run, const std::string& tag);

// Stage bodies; each writes exactly stage_outputs(stage) except the manifest.
void gen_corpus(const Run& run);
void train_models(const Run& run);
void train_saes(const Run& run);
void analyze(const Run& run);
void intervene_steering(const Run& run, bool gradient);
void intervene_inject(const Run& run);
void intervene_neuron(const Run& run);
void report(const Run& run);

}  // namespace polyprobe::harness::detail
