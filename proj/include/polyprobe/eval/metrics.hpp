#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyprobe/core/tensor.hpp"
#include "polyprobe/model/transformer.hpp"

namespace polyprobe::eval {

using core::Tensor;
using model::TokenId;

// Token embeddings with unit-normalised rows; `id` names the source so
// reports can say which table scored them.
struct EmbeddingTable {
  std::string id;
  Tensor unit_rows;  // V x d

  std::size_t vocab_size() const { return unit_rows.rows(); }
};

// Throws ZeroNorm for an all-zero row.
EmbeddingTable make_embedding_table(const Tensor& embeddings, std::string id);
// The model's own token embedding matrix.
EmbeddingTable embedding_table(const model::Transformer& model);

// Precomputed max_{u in T_f} cos(E_t, E_u) for every vocabulary token t.
struct TargetProfile {
  std::vector<TokenId> tokens;  // T_f, ascending and unique
  std::vector<double> max_cosine;
  std::string embedding_id;
};

// Throws EmptyTokenSet, MissingEmbedding.
TargetProfile target_profile(std::vector<TokenId> tokens, const EmbeddingTable& e);

// c(O, T_f) = sum_t O(t) * max_{u in T_f} cos(E_t, E_u).
double weighted_cosine(std::span<const double> o, const TargetProfile& target);
double weighted_cosine(std::span<const double> o, const std::vector<TokenId>& tokens, const EmbeddingTable& e);

inline constexpr double kZeroBaseline = 1e-12;

// (c(O~) - c(O)) / c(O). Throws ZeroBaseline when c(O) <= 1e-12.
double delta_c(std::span<const double> o, std::span<const double> o_tilde, const TargetProfile& target);

// w(O, T_f) = sum_{t in T_f} O(t). Throws MissingEmbedding for a token
// outside the distribution.
double weighted_overlap(std::span<const double> o, const std::vector<TokenId>& tokens);

inline constexpr double kDefaultEpsilon = 1e-9;

struct DeltaW {
  double absolute = 0.0;
  double relative = 0.0;  // absolute / max(w(O), eps)
};

DeltaW delta_w(std::span<const double> o, std::span<const double> o_tilde, const std::vector<TokenId>& tokens,
               double eps = kDefaultEpsilon);

// Both metrics before and after one intervention.
struct MetricReport {
  double c_before = 0.0;
  double c_after = 0.0;
  std::optional<double> delta_c;  // empty when c_before <= 1e-12 (zero baseline)
  double w_before = 0.0;
  double w_after = 0.0;
  double delta_w = 0.0;
  double delta_w_relative = 0.0;
  std::vector<TokenId> tokens;
  std::string embedding_id;
};

MetricReport metric_report(std::span<const double> o, std::span<const double> o_tilde, const TargetProfile& target,
                           double eps = kDefaultEpsilon);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

enum class Metric { DeltaC, DeltaW, DeltaWRelative };

std::string metric_name(Metric m);
Metric parse_metric(const std::string& s);

// The selected delta; a zero-baseline delta_c reads as NaN.
double metric_value(const MetricReport& r, Metric m);

// Total-variation distance 0.5 * sum |p - q|.
double total_variation(std::span<const double> p, std::span<const double> q);

}  // namespace polyprobe::eval
