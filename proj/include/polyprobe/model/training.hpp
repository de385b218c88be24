#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "polyprobe/model/corpus.hpp"
#include "polyprobe/model/transformer.hpp"

namespace polyprobe::model {

struct TrainHyper {
  double lr = 0.1;
  std::size_t steps = 500;
  std::size_t batch = 8;
  double clip = 1.0;  // global gradient-norm cap
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrainHyper& h);
void from_json(const nlohmann::json& j, TrainHyper& h);

struct TrainReport {
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<double> step_losses;
};

struct TrainResult {
  Transformer model;
  TrainReport report;
};

// Mean next-token cross entropy over every position of every sequence.
double mean_loss(const Transformer& model, const Corpus& sequences);

// Plain SGD on next-token cross entropy with global-norm clipping. A seeded
// slice of the corpus is held out for the before/after loss. Throws
// EmptyCorpus, ShapeMismatch (token outside vocabulary), Divergence.
TrainResult train(const Transformer& model, const Corpus& corpus, const TrainHyper& hyper);

}  // namespace polyprobe::model
