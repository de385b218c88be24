#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/core/tensor.hpp"
#include "polyprobe/model/corpus.hpp"
#include "polyprobe/model/transformer.hpp"

namespace polyprobe::sae {

using core::Tensor;
using model::Site;
using model::TokenId;

// Linear is the identity code; it exists for the low-rank reconstruction
// limit and is not meant for feature analysis.
enum class Activation { Relu, TopK, Linear };

std::string activation_name(Activation a);
Activation parse_activation(const std::string& s);

struct SaeConfig {
  std::size_t k = 0;  // 0 means 8 * d_model
  double lambda = 1e-3;
  Activation activation = Activation::Relu;
  std::size_t topk = 8;
  double lr = 1e-3;  // Adam step size
  std::size_t steps = 500;
  std::size_t batch = 128;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const SaeConfig& c);
void from_json(const nlohmann::json& j, SaeConfig& c);

// f = Act(W_enc a + b_enc), a_hat = W_dec f + b_dec.
struct Sae {
  Site site;
  Activation activation = Activation::Relu;
  std::size_t topk = 8;
  Tensor w_enc;  // k x d
  Tensor b_enc;  // k
  Tensor w_dec;  // d x k
  Tensor b_dec;  // d

  std::size_t k() const { return w_enc.rows(); }
  std::size_t d() const { return w_enc.cols(); }
};

// One activation row per (sequence, position).
struct ActivationDataset {
  Site site;
  Tensor acts;  // N x d_model
  std::vector<std::pair<std::size_t, std::size_t>> provenance;  // (sequence, position) per row
};

// Throws EmptyCorpus; BadSite via forward.
ActivationDataset harvest_activations(const model::Transformer& model, const model::Corpus& corpus, const Site& site);

// Rows of `x` (N x d) to codes (N x k).
Tensor encode(const Sae& sae, const Tensor& x);
// Codes (N x k) to reconstructions (N x d).
Tensor decode(const Sae& sae, const Tensor& f);

// Mean over rows and dimensions of (a - a_hat)^2.
double reconstruction_mse(const Sae& sae, const Tensor& x);
// Mean number of nonzero codes per row.
double mean_l0(const Sae& sae, const Tensor& x);

struct SaeStepInfo {
  std::size_t step = 0;
  double loss = 0.0;
  double max_norm_deviation = 0.0;  // max_i | ||W_dec[:, i]|| - 1 | after renormalisation
};

struct SaeTrainReport {
  double initial_heldout_mse = 0.0;
  double final_heldout_mse = 0.0;
  double heldout_mean_l0 = 0.0;
  std::vector<double> step_losses;
  double worst_norm_deviation = 0.0;
};

struct SaeTrainResult {
  Sae sae;
  SaeTrainReport report;
};

// Adam on ||a - a_hat||^2 + lambda * sum_i f_i ||W_dec[:, i]||, averaged over
// the batch. Decoder columns are renormalised to unit length after every
// step, so the penalty equals lambda * ||f||_1 at every step. Throws
// EmptyCorpus, InvalidConfig (k < d, lambda < 0), Divergence.
SaeTrainResult train_sae(const ActivationDataset& data, const SaeConfig& config,
                         const std::function<void(const Sae&, const SaeStepInfo&)>& on_step = {});

inline constexpr double kDeadNorm = 1e-12;

// Normalised decoder column i. Throws DeadFeature when its norm < 1e-12,
// ShapeMismatch when i >= k.
std::vector<double> feature_direction(const Sae& sae, std::size_t i);

core::Checkpoint to_checkpoint(const Sae& sae);
Sae sae_from_checkpoint(const core::Checkpoint& ckpt);

// Per-feature statistics from one encoding pass over a corpus.
struct FeatureScan {
  Site site;
  std::size_t k = 0;
  std::size_t vocab_size = 0;
  Tensor token_max;   // k x vocab: max activation of feature f on any occurrence of token t
  Tensor seq_max;     // k x n_sequences
  std::vector<std::vector<std::size_t>> seq_argmax;  // [feature][sequence] -> position of the max

  double global_max(std::size_t feature) const;
  // Features whose activation is > 0 somewhere in the corpus.
  std::vector<std::size_t> live_features() const;
};

FeatureScan scan_features(const Sae& sae, const model::Transformer& model, const model::Corpus& corpus);

struct TokenSet {
  std::size_t feature = 0;
  std::vector<TokenId> tokens;  // ascending
  double ratio = 0.8;
};

// T_f = { t : max activation on t >= ratio * global max }. Throws NeverFires
// when the feature is 0 everywhere, InvalidConfig for ratio outside (0, 1].
TokenSet top_activating_tokens(const FeatureScan& scan, std::size_t feature, double ratio = 0.8);

struct WindowEntry {
  std::size_t sequence = 0;
  std::size_t position = 0;
  TokenId token = 0;
  double activation = 0.0;
};

// A contiguous corpus window (entries in position order).
struct ActivationWindow {
  std::vector<WindowEntry> entries;
  double peak = 0.0;
  std::size_t peak_offset = 0;  // index of the max entry within `entries`

  std::vector<TokenId> tokens() const;
  std::vector<double> activations() const;
};

// The windows of one feature, sorted by descending peak activation.
struct FeatureActivationRecord {
  std::size_t feature = 0;
  std::vector<ActivationWindow> windows;
};

inline constexpr std::size_t kRecordWindow = 16;

// Top-n windows (one per sequence, centred on the sequence's peak and
// clipped to the sequence). Throws NeverFires, InvalidConfig for n = 0.
FeatureActivationRecord activation_records(const Sae& sae, const model::Transformer& model,
                                           const model::Corpus& corpus, const FeatureScan& scan,
                                           std::size_t feature, std::size_t n, std::size_t window = kRecordWindow);

// Gloss-embedding vectors: stand-ins for text embeddings of feature
// descriptions, one vector per feature of one site.
struct GlossTable {
  Site site;
  std::map<std::size_t, std::vector<double>> vectors;

  bool contains(std::size_t feature) const { return vectors.count(feature) > 0; }
  // Throws MissingGloss.
  const std::vector<double>& at(std::size_t feature) const;
};

// JSON lines, one {"feature_id", "site", "vector"} object per line. Lines for
// other sites are skipped. Throws Io / ConfigError on malformed lines.
GlossTable read_glosses(const std::string& jsonl, const Site& site);
std::string write_glosses(const GlossTable& table);

// Synthetic glosses: a vector over concept groups (plus one slot for filler
// tokens) holding the activation-weighted share of the feature's strong
// tokens (activation >= 0.5 * max).
GlossTable synthesize_glosses(const FeatureScan& scan, const model::CorpusSpec& spec,
                              const std::vector<std::size_t>& features);

}  // namespace polyprobe::sae
