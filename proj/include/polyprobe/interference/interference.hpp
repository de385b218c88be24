#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/sae/sae.hpp"

namespace polyprobe::interference {

using core::Tensor;
using model::Site;

// Cosine similarity between the decoder directions of the live features of
// one SAE. Row/column r corresponds to features[r].
struct InterferenceMatrix {
  Site site;
  std::vector<std::size_t> features;
  Tensor values;  // n x n, symmetric

  std::size_t size() const { return features.size(); }
  // Throws ShapeMismatch when a feature id is not in the matrix.
  std::size_t index_of(std::size_t feature) const;
  bool contains(std::size_t feature) const;
  double at(std::size_t fi, std::size_t fj) const { return values(index_of(fi), index_of(fj)); }
};

// Throws TooFewFeatures with fewer than two live features and DeadFeature
// for a listed feature whose decoder column is zero.
InterferenceMatrix interference_matrix(const sae::Sae& sae, const std::vector<std::size_t>& live);
// Every feature with a nonzero decoder column.
InterferenceMatrix interference_matrix(const sae::Sae& sae);

core::Checkpoint to_checkpoint(const InterferenceMatrix& m);
InterferenceMatrix interference_from_checkpoint(const core::Checkpoint& ckpt);

// S(i, j): cosine of the gloss vectors. Throws MissingGloss.
double semantic_relatedness(const sae::GlossTable& glosses, std::size_t i, std::size_t j);

inline const std::vector<double> kDefaultCutoffs{0.40, 0.30, 0.20, 0.15};

// Partition of a feature set. Members are ascending within a cluster and
// clusters are ordered by their smallest member.
struct FeatureCluster {
  double cutoff = 0.4;
  std::string linkage = "average";
  std::vector<std::vector<std::size_t>> clusters;

  // Index of the cluster holding `feature`, if any.
  std::optional<std::size_t> cluster_of(std::size_t feature) const;
};

void to_json(nlohmann::json& j, const FeatureCluster& c);
void from_json(const nlohmann::json& j, FeatureCluster& c);

// Average-linkage agglomerative clustering on cosine distance 1 - cos.
// Clusters merge while the smallest inter-cluster distance is <= 1 - cutoff;
// ties go to the pair with the smallest (first, second) cluster ids.
// `ids[r]` labels vectors[r]. Throws InvalidConfig for cutoff outside (0, 1)
// or an empty input.
FeatureCluster agglomerative_cluster(const std::vector<std::vector<double>>& vectors,
                                     const std::vector<std::size_t>& ids, double cutoff);

// Clusters features by their gloss vectors.
FeatureCluster cluster_glosses(const sae::GlossTable& glosses, double cutoff);
// Clusters features by their rows of the interference matrix.
FeatureCluster cluster_interference(const InterferenceMatrix& m, double cutoff);

struct Bin {
  double lo = 0.0;
  double hi = 0.1;
  bool closed_hi = false;  // the last bin includes its upper edge

  bool contains(double x) const { return x >= lo && (closed_hi ? x <= hi : x < hi); }
  double midpoint() const { return 0.5 * (lo + hi); }
  std::string label() const;
};

// [0,.1), [.1,.2), [.2,.3), [.3,.4), [.4,1].
std::vector<Bin> default_bins();

void to_json(nlohmann::json& j, const Bin& b);
void from_json(const nlohmann::json& j, Bin& b);

struct BinCandidates {
  Bin bin;
  std::vector<std::size_t> eligible;  // ascending
  std::vector<std::size_t> sampled;   // seeded draw without replacement from `eligible`
  bool empty() const { return eligible.empty(); }
};

// Per bin: features j != target with I(target, j) (signed) in the bin, j
// outside the target's cluster, a gloss for j, and S(target, j) below
// `relevancy_cutoff`. Draws up to `per_bin` candidates per bin.
std::vector<BinCandidates> sample_interference_pairs(std::size_t target, const FeatureCluster& clusters,
                                                     const InterferenceMatrix& interference,
                                                     const sae::GlossTable& glosses, const std::vector<Bin>& bins,
                                                     double relevancy_cutoff, std::size_t per_bin,
                                                     std::uint64_t seed);

struct NeuronProfile {
  Site site;
  std::size_t neuron = 0;
  std::vector<std::pair<std::size_t, double>> connections;  // (cluster index, alignment)

  std::size_t degree() const { return connections.size(); }
};

// For each cluster, alignment of neuron n = mean over members of
// |W_dec[n, member]|; the `top` best neurons with alignment > threshold are
// connected to the cluster. Returns one profile per neuron, in order.
std::vector<NeuronProfile> neuron_polysemanticity(const sae::Sae& sae, const FeatureCluster& clusters,
                                                  double weight_threshold = 0.2, std::size_t top = 3);

void to_json(nlohmann::json& j, const NeuronProfile& p);

// Interference matrix plus gloss vectors of one model.
struct PairArtifacts {
  InterferenceMatrix interference;
  sae::GlossTable glosses;
};

struct PairThresholds {
  double interference = 0.4;
  double semantic = 0.2;
  double cross = 0.5;
};

struct WithinPair {
  std::size_t i = 0;  // i < j
  std::size_t j = 0;
  double interference = 0.0;
  double semantic = 0.0;
};

// Pairs i < j of one model with I > theta_I and S < theta_S.
std::vector<WithinPair> qualifying_pairs(const PairArtifacts& a, const PairThresholds& t);

struct SharedPair {
  WithinPair a;
  WithinPair b;
  // max over the two endpoint assignments of the smaller endpoint gloss cosine
  double score = 0.0;
  bool crossed = false;  // best assignment was a.i <-> b.j, a.j <-> b.i
};

// Every (pair in A, pair in B) match with score > theta_cross, ordered by
// (a.i, a.j, b.i, b.j).
std::vector<SharedPair> mine_shared_pairs(const PairArtifacts& a, const PairArtifacts& b,
                                          const PairThresholds& t = {});

void to_json(nlohmann::json& j, const SharedPair& p);

}  // namespace polyprobe::interference
