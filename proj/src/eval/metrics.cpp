#include "polyprobe/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "polyprobe/core/error.hpp"
#include "polyprobe/core/rng.hpp"

namespace polyprobe::eval {

EmbeddingTable make_embedding_table(const Tensor& embeddings, std::string id) {
  core::require_rank(embeddings, 2, "embedding table");
  EmbeddingTable t{std::move(id), embeddings};
  for (std::size_t r = 0; r < t.unit_rows.rows(); ++r) {
    auto row = t.unit_rows.row(r);
    const double n = core::norm(row);
    if (n < 1e-12) {
      fail(ErrorCode::ZeroNorm, "embedding row " + std::to_string(r) + " is zero");
    }
    for (double& v : row) {
      v /= n;
    }
  }
  return t;
}

EmbeddingTable embedding_table(const model::Transformer& model) {
  const Tensor& e = model.params.tok_embed;
  const std::string_view bytes(reinterpret_cast<const char*>(e.values().data()), e.size() * sizeof(double));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(core::fnv1a64(bytes)));
  return make_embedding_table(e, std::string("tok_embed:") + buf);
}

TargetProfile target_profile(std::vector<TokenId> tokens, const EmbeddingTable& e) {
  if (tokens.empty()) {
    fail(ErrorCode::EmptyTokenSet, "target token set is empty");
  }
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  const std::size_t V = e.vocab_size();
  for (TokenId t : tokens) {
    if (t >= V) {
      fail(ErrorCode::MissingEmbedding, "token " + std::to_string(t) + " has no embedding row");
    }
  }
  TargetProfile p{tokens, std::vector<double>(V, -std::numeric_limits<double>::infinity()), e.id};
  for (std::size_t t = 0; t < V; ++t) {
    const auto row = e.unit_rows.row(t);
    for (TokenId u : tokens) {
      p.max_cosine[t] = std::max(p.max_cosine[t], core::dot(row, e.unit_rows.row(u)));
    }
  }
  return p;
}

double weighted_cosine(std::span<const double> o, const TargetProfile& target) {
  if (o.size() != target.max_cosine.size()) {
    fail(ErrorCode::MissingEmbedding, "distribution over " + std::to_string(o.size()) + " tokens, embeddings for " +
                                          std::to_string(target.max_cosine.size()));
  }
  double c = 0.0;
  for (std::size_t t = 0; t < o.size(); ++t) {
    c += o[t] * target.max_cosine[t];
  }
  return c;
}

double weighted_cosine(std::span<const double> o, const std::vector<TokenId>& tokens, const EmbeddingTable& e) {
  return weighted_cosine(o, target_profile(tokens, e));
}

double delta_c(std::span<const double> o, std::span<const double> o_tilde, const TargetProfile& target) {
  const double before = weighted_cosine(o, target);
  if (before <= kZeroBaseline) {
    fail(ErrorCode::ZeroBaseline, "baseline weighted cosine is " + std::to_string(before));
  }
  return (weighted_cosine(o_tilde, target) - before) / before;
}

double weighted_overlap(std::span<const double> o, const std::vector<TokenId>& tokens) {
  double w = 0.0;
  for (TokenId t : tokens) {
    if (t >= o.size()) {
      fail(ErrorCode::MissingEmbedding, "token " + std::to_string(t) + " outside the distribution");
    }
    w += o[t];
  }
  return w;
}

DeltaW delta_w(std::span<const double> o, std::span<const double> o_tilde, const std::vector<TokenId>& tokens,
               double eps) {
  require(eps > 0.0, ErrorCode::InvalidConfig, "epsilon must be > 0");
  const double before = weighted_overlap(o, tokens);
  const double abs = weighted_overlap(o_tilde, tokens) - before;
  return {abs, abs / std::max(before, eps)};
}

MetricReport metric_report(std::span<const double> o, std::span<const double> o_tilde, const TargetProfile& target,
                           double eps) {
  MetricReport r;
  r.c_before = weighted_cosine(o, target);
  r.c_after = weighted_cosine(o_tilde, target);
  if (r.c_before > kZeroBaseline) {
    r.delta_c = (r.c_after - r.c_before) / r.c_before;
  }
  r.w_before = weighted_overlap(o, target.tokens);
  r.w_after = weighted_overlap(o_tilde, target.tokens);
  const DeltaW dw = delta_w(o, o_tilde, target.tokens, eps);
  r.delta_w = dw.absolute;
  r.delta_w_relative = dw.relative;
  r.tokens = target.tokens;
  r.embedding_id = target.embedding_id;
  return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"c_before", r.c_before},
                     {"c_after", r.c_after},
                     {"delta_c", r.delta_c ? nlohmann::json(*r.delta_c) : nlohmann::json(nullptr)},
                     {"zero_baseline", !r.delta_c.has_value()},
                     {"w_before", r.w_before},
                     {"w_after", r.w_after},
                     {"delta_w", r.delta_w},
                     {"delta_w_relative", r.delta_w_relative},
                     {"tokens", r.tokens},
                     {"embedding_id", r.embedding_id}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.c_before = j.at("c_before").get<double>();
  r.c_after = j.at("c_after").get<double>();
  r.delta_c = j.at("delta_c").is_null() ? std::nullopt : std::optional<double>(j.at("delta_c").get<double>());
  r.w_before = j.at("w_before").get<double>();
  r.w_after = j.at("w_after").get<double>();
  r.delta_w = j.at("delta_w").get<double>();
  r.delta_w_relative = j.at("delta_w_relative").get<double>();
  r.tokens = j.at("tokens").get<std::vector<TokenId>>();
  r.embedding_id = j.value("embedding_id", std::string());
}

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::DeltaC: return "delta_c";
    case Metric::DeltaW: return "delta_w";
    case Metric::DeltaWRelative: return "delta_w_relative";
  }
  return "?";
}

Metric parse_metric(const std::string& s) {
  for (Metric m : {Metric::DeltaC, Metric::DeltaW, Metric::DeltaWRelative}) {
    if (metric_name(m) == s) {
      return m;
    }
  }
  fail(ErrorCode::InvalidConfig, "unknown metric '" + s + "'");
}

double metric_value(const MetricReport& r, Metric m) {
  switch (m) {
    case Metric::DeltaC: return r.delta_c ? *r.delta_c : std::numeric_limits<double>::quiet_NaN();
    case Metric::DeltaW: return r.delta_w;
    case Metric::DeltaWRelative: return r.delta_w_relative;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorCode::ShapeMismatch, "distributions differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s += std::abs(p[i] - q[i]);
  }
  return 0.5 * s;
}

}  // namespace polyprobe::eval
