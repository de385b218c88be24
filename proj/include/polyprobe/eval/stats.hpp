#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace polyprobe::eval {

// Ranks starting at 1; ties get the mean of their positions.
std::vector<double> average_ranks(std::span<const double> x);

// Pearson correlation of average ranks. 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// Linear-interpolation quantile of already sorted data, q in [0, 1].
double sorted_quantile(std::span<const double> sorted, double q);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool excludes_zero() const { return lo > 0.0 || hi < 0.0; }
};

inline constexpr std::size_t kBootstrapResamples = 2000;

// Percentile bootstrap of the mean.
Interval bootstrap_mean_ci(std::span<const double> values, std::uint64_t seed,
                           std::size_t resamples = kBootstrapResamples, double level = 0.95);

struct BinSample {
  std::string label;
  double midpoint = 0.0;
  std::vector<double> values;
};

struct BinStat {
  std::string label;
  double midpoint = 0.0;
  std::size_t n = 0;
  double mean = 0.0;
  Interval ci;
};

struct BinSummary {
  std::vector<BinStat> bins;
  // Spearman correlation between bin midpoints and bin means, with a
  // bootstrap CI that resamples within every bin.
  double rho = 0.0;
  Interval rho_ci;
  // Same correlation over every (midpoint, value) pair.
  double rho_pooled = 0.0;
  std::size_t resamples = kBootstrapResamples;
  std::uint64_t seed = 0;
};

// Bins with no values are reported with n = 0 and left out of both
// correlations. Throws InvalidConfig when no bin has values.
BinSummary bin_summary(const std::vector<BinSample>& bins, std::uint64_t seed,
                       std::size_t resamples = kBootstrapResamples, double level = 0.95);

void to_json(nlohmann::json& j, const Interval& i);
void to_json(nlohmann::json& j, const BinStat& b);
void to_json(nlohmann::json& j, const BinSummary& s);

// One-sided exact sign test: P(X >= successes) for X ~ Binomial(n, 1/2).
double sign_test_p(std::size_t successes, std::size_t n);

}  // namespace polyprobe::eval
