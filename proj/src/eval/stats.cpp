#include "polyprobe/eval/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "polyprobe/core/error.hpp"
#include "polyprobe/core/rng.hpp"

namespace polyprobe::eval {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) {
      ++j;
    }
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      ranks[idx[k]] = r;
    }
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorCode::ShapeMismatch, "spearman inputs differ in length");
  if (x.size() < 2) {
    return 0.0;
  }
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    return 0.0;
  }
  return sxy / std::sqrt(sxx * syy);
}

double sorted_quantile(std::span<const double> sorted, double q) {
  require(!sorted.empty(), ErrorCode::InvalidConfig, "quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double resampled_mean(std::span<const double> v, core::Rng& rng) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += v[rng.below(v.size())];
  }
  return s / static_cast<double>(v.size());
}

Interval percentile_interval(std::vector<double> stats, double level) {
  std::sort(stats.begin(), stats.end());
  const double tail = 0.5 * (1.0 - level);
  return {sorted_quantile(stats, tail), sorted_quantile(stats, 1.0 - tail)};
}

}  // namespace

Interval bootstrap_mean_ci(std::span<const double> values, std::uint64_t seed, std::size_t resamples, double level) {
  require(!values.empty(), ErrorCode::InvalidConfig, "bootstrap of an empty sample");
  require(resamples >= 1 && level > 0.0 && level < 1.0, ErrorCode::InvalidConfig, "bad bootstrap settings");
  core::Rng rng = core::Rng(seed).split("bootstrap_mean");
  std::vector<double> stats(resamples);
  for (double& s : stats) {
    s = resampled_mean(values, rng);
  }
  return percentile_interval(std::move(stats), level);
}

BinSummary bin_summary(const std::vector<BinSample>& bins, std::uint64_t seed, std::size_t resamples,
                       double level) {
  BinSummary out;
  out.resamples = resamples;
  out.seed = seed;
  std::vector<std::size_t> filled;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto& in = bins[b];
    BinStat st{in.label, in.midpoint, in.values.size(), 0.0, {}};
    if (!in.values.empty()) {
      st.mean = mean_of(in.values);
      st.ci = bootstrap_mean_ci(in.values, core::Rng(seed).split(b).next_u64(), resamples, level);
      filled.push_back(b);
    }
    out.bins.push_back(st);
  }
  require(!filled.empty(), ErrorCode::InvalidConfig, "bin summary needs at least one value");

  std::vector<double> mids;
  std::vector<double> means;
  std::vector<double> pooled_x;
  std::vector<double> pooled_y;
  for (std::size_t b : filled) {
    mids.push_back(bins[b].midpoint);
    means.push_back(out.bins[b].mean);
    for (double v : bins[b].values) {
      pooled_x.push_back(bins[b].midpoint);
      pooled_y.push_back(v);
    }
  }
  out.rho = spearman(mids, means);
  out.rho_pooled = spearman(pooled_x, pooled_y);

  core::Rng rng = core::Rng(seed).split("bootstrap_rho");
  std::vector<double> stats(resamples);
  std::vector<double> boot_means(filled.size());
  for (double& s : stats) {
    for (std::size_t k = 0; k < filled.size(); ++k) {
      boot_means[k] = resampled_mean(bins[filled[k]].values, rng);
    }
    s = spearman(mids, boot_means);
  }
  out.rho_ci = percentile_interval(std::move(stats), level);
  return out;
}

void to_json(nlohmann::json& j, const Interval& i) { j = nlohmann::json::array({i.lo, i.hi}); }

void to_json(nlohmann::json& j, const BinStat& b) {
  j = nlohmann::json{{"label", b.label}, {"midpoint", b.midpoint}, {"n", b.n}, {"mean", b.mean}, {"ci", b.ci}};
}

void to_json(nlohmann::json& j, const BinSummary& s) {
  j = nlohmann::json{{"bins", s.bins},           {"rho", s.rho},   {"rho_ci", s.rho_ci},
                     {"rho_pooled", s.rho_pooled}, {"resamples", s.resamples}, {"seed", s.seed}};
}

double sign_test_p(std::size_t successes, std::size_t n) {
  require(successes <= n, ErrorCode::InvalidConfig, "more successes than trials");
  // Sum binomial terms in log space.
  double p = 0.0;
  for (std::size_t k = successes; k <= n; ++k) {
    const double lg = std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
                      std::lgamma(static_cast<double>(n - k) + 1.0) - static_cast<double>(n) * std::log(2.0);
    p += std::exp(lg);
  }
  return std::min(1.0, p);
}

}  // namespace polyprobe::eval
