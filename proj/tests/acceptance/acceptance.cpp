// Acceptance checks. Runs the pipeline on the given config (twice, for the
// reproducibility check) and prints one PASS/FAIL line per criterion.
//
//   polyprobe_acceptance <config.json> <work dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/core/error.hpp"
#include "polyprobe/core/linalg.hpp"
#include "polyprobe/core/rng.hpp"
#include "polyprobe/eval/metrics.hpp"
#include "polyprobe/harness/config.hpp"
#include "polyprobe/harness/pipeline.hpp"
#include "polyprobe/interference/interference.hpp"
#include "polyprobe/interventions/interventions.hpp"
#include "polyprobe/model/model_io.hpp"
#include "polyprobe/sae/sae.hpp"

namespace {

using namespace polyprobe;
namespace h = polyprobe::harness;
namespace iv = polyprobe::interventions;
namespace itf = polyprobe::interference;
namespace fs = std::filesystem;
using core::Tensor;
using model::Site;
using model::SiteKind;
using model::TokenId;
using nlohmann::json;

// Pinned tolerances.
constexpr double kGradientRelTol = 1e-4;
constexpr std::size_t kGradientProbes = 100;
constexpr double kGradientSeconds = 60.0;
constexpr double kUnitNormTol = 1e-6;
constexpr std::size_t kSaeSteps = 500;
constexpr double kMseRatio = 0.5;
constexpr double kOracleTol = 1e-10;
constexpr double kNoOpTol = 1e-12;
constexpr double kPenroseTol = 1e-8;
constexpr double kTransportRelTol = 0.05;
constexpr std::size_t kMinTargets = 20;
constexpr std::size_t kPromptsPerTarget = 3;
constexpr double kPipelineCpuSeconds = 15.0 * 60.0;
constexpr std::size_t kMinInjectionTrials = 50;
constexpr double kSignTestAlpha = 0.05;
constexpr std::size_t kMinNeuronGroups = 3;

template <class... A>
std::string str(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

int failures = 0;

void criterion(const std::string& name, const std::function<std::pair<bool, std::string>()>& check) {
  bool pass = false;
  std::string detail;
  try {
    std::tie(pass, detail) = check();
  } catch (const std::exception& e) {
    detail = std::string("error: ") + e.what();
  }
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

json read_json(const fs::path& p) { return json::parse(core::read_file(p)); }

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a[i] * b[i];
  }
  return s;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  return dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
}

std::vector<double> col_of(const Tensor& t, std::size_t c) {
  std::vector<double> v(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    v[r] = t(r, c);
  }
  return v;
}

std::vector<double> normals(core::Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) {
    x = rng.normal();
  }
  return v;
}

double max_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return a.size() == b.size() ? m : std::numeric_limits<double>::infinity();
}

double rel_error(std::span<const double> got, std::span<const double> want) {
  double scale = 1e-12;
  for (double w : want) {
    scale = std::max(scale, std::abs(w));
  }
  return max_diff(got, want) / scale;
}

// Everything the checks read from the first pipeline run.
struct Lab {
  fs::path dir;
  h::ExperimentConfig config;
  model::Corpus corpus;
  model::Transformer model_a;
  model::Transformer model_b;
  sae::Sae sae_a;
  sae::Sae sae_b;
  json report;
  json targets;
  double pipeline_cpu = 0.0;
  double pipeline_wall = 0.0;
};

// ---------------------------------------------------------------------------

std::pair<bool, std::string> check_gradients(const Lab& lab) {
  const auto& m = lab.model_a;
  const auto t0 = std::chrono::steady_clock::now();
  core::Rng rng = core::Rng(2024).split("gradient");
  const std::size_t len = 12;
  const auto prompts = model::sample_windows(lab.corpus, kGradientProbes, len, rng.next_u64());
  const model::FrozenNorms frozen =
      model::estimate_frozen_norms(m, std::vector<std::vector<TokenId>>(prompts.begin(), prompts.begin() + 32));
  const auto sites = model::all_sites(m.config);
  double worst = 0.0;
  for (std::size_t i = 0; i < kGradientProbes; ++i) {
    const Site s = sites[rng.below(sites.size())];
    const std::size_t pos = rng.below(len);
    const auto v = normals(rng, m.config.d_model);
    const model::FrozenNorms* fz = i % 2 == 0 ? nullptr : &frozen;
    const auto g = model::grad_wrt_embedding(m, prompts[i], s, pos, v, fz);
    const Tensor emb = model::embed_tokens(m, prompts[i]);
    model::ForwardOptions opts;
    opts.capture = {s};
    opts.frozen = fz;
    auto f = [&](std::span<const double> e) {
      Tensor x = emb;
      std::copy(e.begin(), e.end(), x.row(pos).begin());
      return dot(col_of(model::forward_embeddings(m, x, opts).trace.at(s), pos), v);
    };
    const auto row = emb.row(pos);
    const auto fd = core::finite_difference_gradient(f, std::vector<double>(row.begin(), row.end()));
    worst = std::max(worst, rel_error(g, fd));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool default_model = m.config.d_model == 32 && m.config.n_layers == 2;
  return {default_model && worst < kGradientRelTol && secs < kGradientSeconds,
          str("%zu probes, d_model=%zu, layers=%zu, max rel err %.3g (< %.0e), %.1f s (< %.0f s)", kGradientProbes,
              m.config.d_model, m.config.n_layers, worst, kGradientRelTol, secs, kGradientSeconds)};
}

std::pair<bool, std::string> check_sae(const Lab& lab) {
  const auto data = sae::harvest_activations(lab.model_a, lab.corpus, lab.config.sae_site);
  bool pass = true;
  std::string detail;
  std::vector<double> l0;
  for (double lambda : {0.0, 1e-3, 1e-2}) {
    sae::SaeConfig cfg = lab.config.sae;
    cfg.lambda = lambda;
    cfg.steps = kSaeSteps;
    cfg.seed = 99;
    double worst = 0.0;
    std::size_t steps = 0;
    const auto r = sae::train_sae(data, cfg, [&](const sae::Sae& s, const sae::SaeStepInfo&) {
      ++steps;
      for (std::size_t c = 0; c < s.w_dec.cols(); ++c) {
        const auto col = col_of(s.w_dec, c);
        worst = std::max(worst, std::abs(std::sqrt(dot(col, col)) - 1.0));
      }
    });
    const double ratio = r.report.final_heldout_mse / r.report.initial_heldout_mse;
    pass = pass && steps >= kSaeSteps && worst <= kUnitNormTol && ratio < kMseRatio;
    l0.push_back(r.report.heldout_mean_l0);
    detail += str("lambda=%g: %zu steps, norm dev %.2g, mse ratio %.3f, L0 %.3f; ", lambda, steps, worst, ratio,
                  r.report.heldout_mean_l0);
  }
  const bool decreasing = l0[0] > l0[1] && l0[1] > l0[2];
  return {pass && decreasing, detail + (decreasing ? "L0 strictly decreasing" : "L0 NOT strictly decreasing")};
}

using Partition = std::vector<std::vector<std::size_t>>;

Partition naive_average_linkage(const std::vector<std::vector<double>>& v, const std::vector<std::size_t>& ids,
                                double cutoff) {
  std::vector<std::size_t> rows(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    rows[i] = i;
  }
  std::sort(rows.begin(), rows.end(), [&](auto a, auto b) { return ids[a] < ids[b]; });
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t r : rows) {
    groups.push_back({r});
  }
  auto link = [&](const auto& a, const auto& b) {
    double s = 0.0;
    for (std::size_t x : a) {
      for (std::size_t y : b) {
        s += 1.0 - cosine(v[x], v[y]);
      }
    }
    return s / static_cast<double>(a.size() * b.size());
  };
  while (groups.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0;
    std::size_t bb = 0;
    for (std::size_t a = 0; a < groups.size(); ++a) {
      for (std::size_t b = a + 1; b < groups.size(); ++b) {
        const double d = link(groups[a], groups[b]);
        if (d < best) {
          best = d;
          ba = a;
          bb = b;
        }
      }
    }
    if (best > 1.0 - cutoff) {
      break;
    }
    groups[ba].insert(groups[ba].end(), groups[bb].begin(), groups[bb].end());
    groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(bb));
  }
  Partition parts;
  for (const auto& g : groups) {
    std::vector<std::size_t> m;
    for (std::size_t r : g) {
      m.push_back(ids[r]);
    }
    std::sort(m.begin(), m.end());
    parts.push_back(m);
  }
  std::sort(parts.begin(), parts.end());
  return parts;
}

// Longest run of entries >= thr that contains the peak.
std::pair<std::size_t, std::size_t> brute_run(const std::vector<double>& a, std::size_t peak, double thr) {
  std::pair<std::size_t, std::size_t> best{peak, peak + 1};
  for (std::size_t i = 0; i <= peak; ++i) {
    for (std::size_t j = peak + 1; j <= a.size(); ++j) {
      bool ok = true;
      for (std::size_t k = i; k < j; ++k) {
        ok = ok && a[k] >= thr;
      }
      if (ok && j - i > best.second - best.first) {
        best = {i, j};
      }
    }
  }
  return best;
}

model::FrozenNorms lab_norms(const Lab& lab) {
  return model::estimate_frozen_norms(lab.model_a, model::sample_windows(lab.corpus, 64, 16, 5));
}

std::pair<bool, std::string> check_oracles(const Lab& lab) {
  std::map<std::string, double> worst;  // numeric deviation per oracle
  std::map<std::string, std::size_t> mismatches;
  std::map<std::string, std::size_t> cases;
  core::Rng rng = core::Rng(2024).split("oracles");

  // Interference matrix: cosine of decoder columns.
  const auto stored = itf::interference_from_checkpoint(core::load_checkpoint(lab.dir / "interference_a.ckpt"));
  const auto im = itf::interference_matrix(lab.sae_a, stored.features);
  for (std::size_t r = 0; r < im.size(); ++r) {
    const auto a = col_of(lab.sae_a.w_dec, im.features[r]);
    for (std::size_t c = 0; c < im.size(); ++c) {
      const double want = cosine(a, col_of(lab.sae_a.w_dec, im.features[c]));
      worst["interference"] = std::max(worst["interference"], std::abs(im.values(r, c) - want));
      ++cases["interference"];
    }
  }

  // Weighted cosine and weighted overlap against double loops over raw embeddings.
  const Tensor& e = lab.model_a.params.tok_embed;
  const auto table = eval::embedding_table(lab.model_a);
  const std::size_t vocab = e.rows();
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<double> o(vocab);
    double z = 0.0;
    for (double& x : o) {
      x = std::exp(2.0 * rng.normal());
      z += x;
    }
    for (double& x : o) {
      x /= z;
    }
    std::set<TokenId> ts;
    const std::size_t n = 1 + rng.below(6);
    while (ts.size() < n) {
      ts.insert(static_cast<TokenId>(rng.below(vocab)));
    }
    const std::vector<TokenId> tf(ts.begin(), ts.end());
    double c = 0.0;
    double w = 0.0;
    for (std::size_t t = 0; t < vocab; ++t) {
      double best = -std::numeric_limits<double>::infinity();
      for (TokenId u : tf) {
        const auto et = e.row(t);
        const auto eu = e.row(u);
        best = std::max(best, cosine(std::vector<double>(et.begin(), et.end()), std::vector<double>(eu.begin(), eu.end())));
      }
      c += o[t] * best;
      if (ts.count(static_cast<TokenId>(t)) > 0) {
        w += o[t];
      }
    }
    worst["weighted_cosine"] = std::max(worst["weighted_cosine"], std::abs(eval::weighted_cosine(o, tf, table) - c));
    worst["weighted_overlap"] = std::max(worst["weighted_overlap"], std::abs(eval::weighted_overlap(o, tf) - w));
    ++cases["weighted_cosine"];
    ++cases["weighted_overlap"];
  }

  // Snippet extraction.
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> acts(1 + rng.below(16));
    for (double& a : acts) {
      a = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    }
    acts[rng.below(acts.size())] = 1.0;
    const double ratio = 0.3 + 0.7 * rng.uniform();
    sae::ActivationWindow win;
    for (std::size_t i = 0; i < acts.size(); ++i) {
      win.entries.push_back(sae::WindowEntry{3, 20 + i, static_cast<TokenId>(50 + i), acts[i]});
    }
    const auto peak = static_cast<std::size_t>(std::max_element(acts.begin(), acts.end()) - acts.begin());
    const auto [lo, hi] = brute_run(acts, peak, ratio * acts[peak]);
    std::vector<TokenId> want;
    for (std::size_t k = lo; k < hi; ++k) {
      want.push_back(static_cast<TokenId>(50 + k));
    }
    mismatches["snippet"] += iv::extract_snippet(win, {ratio, 0}).snippet == want ? 0 : 1;
    ++cases["snippet"];
  }

  // Scale search over real targets: exhaustive second pass over the grid.
  const iv::Transporter tr(lab.model_a, lab_norms(lab));
  const auto grid = lab.config.steering.feature_grid;
  std::size_t n_search = 0;
  for (const auto& t : lab.targets.at("targets")) {
    if (n_search >= 12) {
      break;
    }
    const auto f = t.at("feature").get<std::size_t>();
    const auto profile = eval::target_profile(t.at("tokens").get<std::vector<TokenId>>(), table);
    const auto plan = iv::steering_from_feature(lab.sae_a, f, lab.sae_a.site, tr);
    const auto prompt = t.at("prompts")[0].get<std::vector<TokenId>>();
    for (auto metric : {eval::Metric::DeltaC, eval::Metric::DeltaW}) {
      double best_a = 0.0;
      double best_v = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (double a : grid) {
        const auto o = iv::apply_steering(lab.model_a, prompt, plan, a, profile);
        const double v = eval::metric_value(o.metrics, metric);
        if (o.total_variation > lab.config.steering.guard_tv || std::isnan(v)) {
          continue;
        }
        if (!any || v > best_v ||
            (v == best_v && (std::abs(a) < std::abs(best_a) || (std::abs(a) == std::abs(best_a) && a < best_a)))) {
          any = true;
          best_v = v;
          best_a = a;
        }
      }
      ++cases["scale_search"];
      try {
        const auto res = iv::optimize_scale(lab.model_a, prompt, plan, grid, metric, lab.config.steering.guard_tv, profile);
        mismatches["scale_search"] += (any && res.best_alpha == best_a) ? 0 : 1;
        if (any) {
          worst["scale_search"] =
              std::max(worst["scale_search"], std::abs(eval::metric_value(res.best.metrics, metric) - best_v));
        }
      } catch (const Error& err) {
        mismatches["scale_search"] += (!any && err.code() == ErrorCode::AllGuarded) ? 0 : 1;
      }
    }
    ++n_search;
  }

  // Agglomerative clustering, n <= 12, at every default cutoff.
  for (int trial = 0; trial < 80; ++trial) {
    const std::size_t n = 2 + rng.below(11);
    const std::size_t dim = 2 + rng.below(5);
    std::vector<std::vector<double>> v;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < n; ++i) {
      auto x = normals(rng, dim);
      if (trial % 2 == 1) {
        for (double& y : x) {
          y = std::abs(y);  // mostly-positive vectors cluster at the looser cutoffs
        }
      }
      v.push_back(x);
      ids.push_back(rng.below(1000) * 16 + i);
    }
    for (double cutoff : itf::kDefaultCutoffs) {
      Partition got = itf::agglomerative_cluster(v, ids, cutoff).clusters;
      std::sort(got.begin(), got.end());
      mismatches["clustering"] += got == naive_average_linkage(v, ids, cutoff) ? 0 : 1;
      ++cases["clustering"];
    }
  }

  bool pass = true;
  std::string detail;
  for (const std::string name :
       {"interference", "weighted_cosine", "weighted_overlap", "snippet", "scale_search", "clustering"}) {
    const bool ok = worst[name] <= kOracleTol && mismatches[name] == 0 && cases[name] > 0;
    pass = pass && ok;
    detail += str("%s %zu cases, %zu mismatches, max dev %.2g; ", name.c_str(), cases[name], mismatches[name],
                  worst[name]);
  }
  return {pass, detail};
}

std::pair<bool, std::string> check_noops(const Lab& lab) {
  const iv::Transporter tr(lab.model_a, lab_norms(lab));
  const auto table = eval::embedding_table(lab.model_a);
  core::Rng rng = core::Rng(2024).split("noop");
  double worst_dist = 0.0;
  double worst_metric = 0.0;
  std::size_t n = 0;
  std::size_t undefined = 0;
  auto take = [&](const iv::InterventionOutcome& o) {
    worst_dist = std::max(worst_dist, max_diff(o.before, o.after));
    worst_metric = std::max(worst_metric, std::abs(o.metrics.delta_w));
    if (o.metrics.delta_c) {
      worst_metric = std::max(worst_metric, std::abs(*o.metrics.delta_c));
    } else {
      ++undefined;
    }
    ++n;
  };
  std::size_t used = 0;
  for (const auto& t : lab.targets.at("targets")) {
    if (used++ >= 20) {
      break;
    }
    const auto profile = eval::target_profile(t.at("tokens").get<std::vector<TokenId>>(), table);
    const auto plan = iv::steering_from_feature(lab.sae_a, t.at("feature").get<std::size_t>(), lab.sae_a.site, tr);
    for (const auto& p : t.at("prompts")) {
      const auto prompt = p.get<std::vector<TokenId>>();
      take(iv::apply_steering(lab.model_a, prompt, plan, 0.0, profile));
      const auto neuron = rng.below(lab.model_a.config.d_model);
      for (const auto& o : iv::neuron_intervene(lab.model_a, lab.sae_a.site, neuron, 1.0, prompt, {profile})) {
        take(o);
      }
      take(iv::prompt_inject(lab.model_a, prompt, iv::InjectionSpec{}, profile));
    }
  }
  return {n > 0 && undefined == 0 && worst_dist <= kNoOpTol && worst_metric <= kNoOpTol,
          str("%zu outcomes (alpha=0, neuron scale 1, empty injection), max |dc|,|dw| %.2g, max entry diff %.2g, "
              "%zu undefined",
              n, worst_metric, worst_dist, undefined)};
}

// True when the path from p to s never passes through an MLP input.
bool linear_only(const Site& p, const Site& s) {
  for (std::size_t l = 0; l <= s.layer; ++l) {
    if (p.ordinal() <= l * 4 + 1 && s.ordinal() >= l * 4 + 3) {
      return false;
    }
  }
  return s.kind != SiteKind::MlpOut || p == s;
}

std::pair<bool, std::string> check_transport(const Lab& lab) {
  const model::FrozenNorms norms = lab_norms(lab);
  const iv::Transporter tr(lab.model_a, norms);
  const auto sites = model::all_sites(lab.model_a.config);
  const std::size_t d = lab.model_a.config.d_model;
  double worst_penrose = 0.0;
  double worst_fd = 0.0;
  std::size_t maps = 0;
  std::size_t paths = 0;
  core::Rng rng = core::Rng(2024).split("transport");
  for (const Site& p : sites) {
    for (const Site& s : sites) {
      if (!(p < s)) {
        continue;
      }
      Tensor phi;
      try {
        phi = tr.linear_map(p, s);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NoLinearPath) {
          continue;
        }
        throw;
      }
      const auto res = core::penrose_residuals(phi, core::pseudo_inverse(phi));
      worst_penrose = std::max(worst_penrose, res.max());
      ++maps;
      if (!linear_only(p, s)) {
        continue;
      }
      ++paths;
      for (int trial = 0; trial < 3; ++trial) {
        const std::vector<TokenId> one{static_cast<TokenId>(rng.below(lab.model_a.config.vocab_size))};
        const auto z = core::normalized(normals(rng, d));
        const double eps = 1e-4;
        model::ForwardOptions base;
        base.capture = {s};
        base.frozen = &norms;
        model::ForwardOptions pert = base;
        pert.edits = {model::ActivationEdit::add_vector(p, z, eps)};
        const auto a0 = col_of(model::forward(lab.model_a, one, base).trace.at(s), 0);
        const auto a1 = col_of(model::forward(lab.model_a, one, pert).trace.at(s), 0);
        std::vector<double> fd(d);
        for (std::size_t i = 0; i < d; ++i) {
          fd[i] = (a1[i] - a0[i]) / eps;
        }
        worst_fd = std::max(worst_fd, rel_error(fd, core::matvec(phi, z)));
      }
    }
  }
  return {maps > 0 && paths > 0 && worst_penrose < kPenroseTol && worst_fd < kTransportRelTol,
          str("%zu maps, max Penrose residual %.2g (< %.0e); %zu linear-only paths, max rel dev %.2g (< %.2f)", maps,
              worst_penrose, kPenroseTol, paths, worst_fd, kTransportRelTol)};
}

std::pair<bool, std::string> check_trend(const Lab& lab) {
  const json& s = lab.report.at("families").at("feature");
  const std::size_t n_bins = lab.config.bins.size();
  std::size_t complete = 0;
  for (const auto& t : lab.targets.at("targets")) {
    const bool all_bins = std::all_of(t.at("bins").begin(), t.at("bins").end(),
                                      [](const json& b) { return !b.at("sampled").empty(); });
    complete += (all_bins && t.at("bins").size() == n_bins && t.at("prompts").size() >= kPromptsPerTarget) ? 1 : 0;
  }
  if (s.at("trend").is_null()) {
    return {false, "no bin values"};
  }
  const double rho = s.at("trend").at("rho").get<double>();
  const auto ci = s.at("trend").at("rho_ci");
  const bool excl = s.at("trend").at("ci_excludes_zero").get<bool>();
  const bool ge = s.at("original_ge_all_bins").is_boolean() && s.at("original_ge_all_bins").get<bool>();
  const bool pass = complete >= kMinTargets && n_bins == 5 && rho > 0.0 && excl && ge &&
                    lab.pipeline_cpu < kPipelineCpuSeconds;
  return {pass, str("%zu targets x %zu bins x >=%zu prompts; rho %.3f, 95%% CI [%.3f, %.3f]; original %.4f %s all "
                    "bins; pipeline %.0f s CPU (%.0f s wall, limit %.0f s)",
                    complete, n_bins, kPromptsPerTarget, rho, ci[0].get<double>(), ci[1].get<double>(),
                    s.at("original").at("mean").get<double>(), ge ? ">=" : "<", lab.pipeline_cpu, lab.pipeline_wall,
                    kPipelineCpuSeconds)};
}

std::pair<bool, std::string> check_injection(const Lab& lab) {
  // Counted straight from the log.
  auto lines = h::read_jsonl(lab.dir / "outcomes_inject.jsonl");
  std::size_t n = 0;
  std::size_t up = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].at("condition") != "original") {
      continue;
    }
    for (const auto& p : lines[i].at("prompts")) {
      if (p.contains("metrics")) {
        const auto& m = p.at("metrics");
        up += m.at("w_after").get<double>() > m.at("w_before").get<double>() ? 1 : 0;
        ++n;
      }
    }
  }
  // One-sided exact sign test, P(X >= up) for X ~ Binomial(n, 1/2).
  double p = 0.0;
  for (std::size_t k = up; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  const json& rep = lab.report.at("families").at("inject").at("w_sign_test").at("original");
  const bool agrees = rep.at("prompts").get<std::size_t>() == n && rep.at("w_increases").get<std::size_t>() == up;
  return {agrees && n >= kMinInjectionTrials && 2 * up > n && p < kSignTestAlpha,
          str("%zu/%zu self-snippet trials raise w (%.1f%%), one-sided sign test p = %.3g; report %s", up, n,
              n ? 100.0 * static_cast<double>(up) / static_cast<double>(n) : 0.0, p, agrees ? "agrees" : "DISAGREES")};
}

std::pair<bool, std::string> check_neurons(const Lab& lab) {
  auto lines = h::read_jsonl(lab.dir / "outcomes_neuron.jsonl");
  lines.erase(lines.begin());
  const json& rep = lab.report.at("neuron");
  const bool summary_ok = h::summarize_neurons(lines, lab.config) == rep;
  const auto table = eval::embedding_table(lab.model_a);
  const double max_scale = *std::max_element(lab.config.neuron.scales.begin(), lab.config.neuron.scales.end());
  std::size_t outcomes = 0;
  std::size_t bad = 0;
  for (const auto& l : lines) {
    std::vector<eval::TargetProfile> profiles;
    for (const auto& o : l.at("outcomes")) {
      profiles.push_back(eval::target_profile(o.at("metrics").at("tokens").get<std::vector<TokenId>>(), table));
    }
    const auto redo = iv::neuron_intervene(lab.model_a, Site::parse(l.at("site").get<std::string>()),
                                           l.at("neuron").get<std::size_t>(), l.at("scale").get<double>(),
                                           l.at("prompt_tokens").get<std::vector<TokenId>>(), profiles);
    for (std::size_t i = 0; i < redo.size(); ++i) {
      const auto& o = l.at("outcomes")[i];
      const auto before = o.at("before").get<std::vector<double>>();
      const auto after = o.at("after").get<std::vector<double>>();
      const auto m = eval::metric_report(before, after, profiles[i]);
      const auto& s = o.at("metrics");
      const bool same = redo[i].after == after && redo[i].before == before &&
                        m.delta_w == s.at("delta_w").get<double>() && m.w_before == s.at("w_before").get<double>() &&
                        m.c_after == s.at("c_after").get<double>() &&
                        (m.delta_c ? s.at("delta_c") == *m.delta_c : s.at("delta_c").is_null());
      bad += same ? 0 : 1;
      ++outcomes;
    }
  }
  std::size_t complete = 0;
  std::string groups;
  for (const auto& g : rep.at("groups")) {
    bool mask = false;
    bool amp = false;
    for (const auto& r : g.at("scales")) {
      const bool has = r.at("delta_w").at("n").get<std::size_t>() > 0;
      mask = mask || (r.at("scale").get<double>() == 0.0 && has);
      amp = amp || (r.at("scale").get<double>() == max_scale && has);
    }
    complete += mask && amp ? 1 : 0;
    groups += str("%zu:%zu ", g.at("degree").get<std::size_t>(), g.at("neurons").get<std::size_t>());
  }
  return {summary_ok && bad == 0 && outcomes > 0 && complete >= kMinNeuronGroups,
          str("%zu degree groups with mask and x%g outcomes (degree:neurons %s); %zu outcomes recomputed, %zu "
              "differ; summary %s",
              complete, max_scale, groups.c_str(), outcomes, bad, summary_ok ? "matches log" : "DIFFERS from log")};
}

struct PairSide {
  std::vector<std::size_t> features;
  Tensor w_dec;
  sae::GlossTable glosses;
};

PairSide pair_side(const Lab& lab, const std::string& tag, const sae::Sae& s) {
  const auto m = itf::interference_from_checkpoint(core::load_checkpoint(lab.dir / ("interference_" + tag + ".ckpt")));
  return {m.features, s.w_dec,
          sae::read_glosses(core::read_file(lab.dir / ("glosses_" + tag + ".jsonl")), s.site)};
}

struct OraclePair {
  std::size_t i, j;
};

std::vector<OraclePair> enumerate_qualifying(const PairSide& side, const itf::PairThresholds& t) {
  std::vector<OraclePair> out;
  for (std::size_t a = 0; a < side.features.size(); ++a) {
    for (std::size_t b = a + 1; b < side.features.size(); ++b) {
      const auto i = side.features[a];
      const auto j = side.features[b];
      const double in = cosine(col_of(side.w_dec, i), col_of(side.w_dec, j));
      const double se = cosine(side.glosses.at(i), side.glosses.at(j));
      if (in > t.interference && se < t.semantic) {
        out.push_back({std::min(i, j), std::max(i, j)});
      }
    }
  }
  return out;
}

struct OracleMatch {
  std::size_t ai, aj, bi, bj;
  double score;
};

std::vector<OracleMatch> enumerate_shared(const PairSide& a, const PairSide& b, const itf::PairThresholds& t) {
  std::vector<OracleMatch> out;
  for (const auto& p : enumerate_qualifying(a, t)) {
    for (const auto& q : enumerate_qualifying(b, t)) {
      const double straight = std::min(cosine(a.glosses.at(p.i), b.glosses.at(q.i)),
                                       cosine(a.glosses.at(p.j), b.glosses.at(q.j)));
      const double crossed = std::min(cosine(a.glosses.at(p.i), b.glosses.at(q.j)),
                                      cosine(a.glosses.at(p.j), b.glosses.at(q.i)));
      const double score = std::max(straight, crossed);
      if (score > t.cross) {
        out.push_back({p.i, p.j, q.i, q.j, score});
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) {
    return std::tie(x.ai, x.aj, x.bi, x.bj) < std::tie(y.ai, y.aj, y.bi, y.bj);
  });
  return out;
}

std::pair<bool, std::string> check_shared_pairs(const Lab& lab) {
  const auto& t = lab.config.analysis.pairs;
  const PairSide a = pair_side(lab, "a", lab.sae_a);
  const PairSide b = pair_side(lab, "b", lab.sae_b);
  const itf::PairArtifacts pa{itf::interference_matrix(lab.sae_a, a.features), a.glosses};
  const itf::PairArtifacts pb{itf::interference_matrix(lab.sae_b, b.features), b.glosses};

  const auto got = itf::mine_shared_pairs(pa, pb, t);
  const auto want = enumerate_shared(a, b, t);
  bool same = got.size() == want.size();
  double dev = 0.0;
  for (std::size_t k = 0; same && k < got.size(); ++k) {
    same = got[k].a.i == want[k].ai && got[k].a.j == want[k].aj && got[k].b.i == want[k].bi &&
           got[k].b.j == want[k].bj;
    dev = std::max(dev, std::abs(got[k].score - want[k].score));
  }
  const bool logged = read_json(lab.dir / "shared_pairs.json").at("shared").size() == got.size();

  // Self-vs-self: every qualifying pair matches itself.
  const auto qualifying = enumerate_qualifying(a, t);
  const auto self = itf::mine_shared_pairs(pa, pa, t);
  std::size_t found = 0;
  for (const auto& q : qualifying) {
    found += std::any_of(self.begin(), self.end(),
                         [&](const itf::SharedPair& s) {
                           return s.a.i == q.i && s.a.j == q.j && s.b.i == q.i && s.b.j == q.j;
                         })
                 ? 1
                 : 0;
  }
  const bool pass = same && dev <= kOracleTol && logged && !qualifying.empty() && found == qualifying.size();
  return {pass, str("A x B: %zu matches, exhaustive enumeration %zu (%s, max score dev %.2g), log %s; self: %zu/%zu "
                    "qualifying pairs matched to themselves",
                    got.size(), want.size(), same ? "identical" : "DIFFERENT", dev, logged ? "agrees" : "DISAGREES",
                    found, qualifying.size())};
}

std::pair<bool, std::string> check_reproducibility(const Lab& lab, const fs::path& second) {
  std::size_t files = 0;
  std::vector<std::string> differ;
  for (h::Stage s : h::all_stages()) {
    for (const auto& name : h::stage_outputs(s)) {
      ++files;
      if (core::read_file(lab.dir / name) != core::read_file(second / name)) {
        differ.push_back(name);
      }
    }
  }
  const bool report_same = core::read_file(lab.dir / "report.json") == core::read_file(second / "report.json");

  // Checkpoint round trips through fresh files.
  const fs::path tmp = second / "roundtrip";
  fs::create_directories(tmp);
  model::save_model(tmp / "model.ckpt", lab.model_a);
  const auto model_back = model::load_model(tmp / "model.ckpt");
  std::size_t prompts = 0;
  bool logits_same = true;
  for (const auto& p : model::sample_windows(lab.corpus, 20, 16, 3)) {
    logits_same = logits_same && model::forward(lab.model_a, p).final_logits == model::forward(model_back, p).final_logits;
    ++prompts;
  }
  core::save_checkpoint(tmp / "sae.ckpt", sae::to_checkpoint(lab.sae_a));
  const auto sae_back = sae::sae_from_checkpoint(core::load_checkpoint(tmp / "sae.ckpt"));
  const auto stored = itf::interference_from_checkpoint(core::load_checkpoint(lab.dir / "interference_a.ckpt"));
  const auto m1 = itf::interference_matrix(lab.sae_a, stored.features);
  const auto m2 = itf::interference_matrix(sae_back, stored.features);
  core::save_checkpoint(tmp / "interference.ckpt", itf::to_checkpoint(m1));
  const auto m3 = itf::interference_from_checkpoint(core::load_checkpoint(tmp / "interference.ckpt"));
  const bool itf_same = m1.values == m2.values && m1.values == m3.values && m1.values == stored.values &&
                        m3.features == m1.features;
  std::string which;
  for (const auto& d : differ) {
    which += " " + d;
  }
  return {differ.empty() && report_same && logits_same && itf_same,
          str("second fresh run: %zu/%zu outputs byte-identical (report.json %s)%s; model round trip logits %s on %zu "
              "prompts; SAE/interference round trip %s",
              files - differ.size(), files, report_same ? "identical" : "DIFFERS", which.c_str(),
              logits_same ? "bit-exact" : "DIFFER", prompts, itf_same ? "bit-exact" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: %s <config.json> <work dir>\n", argv[0]);
    return 2;
  }
  const h::ExperimentConfig config = h::load_config(argv[1]);
  const fs::path work = argv[2];
  fs::remove_all(work);

  Lab lab;
  lab.dir = work / "run_1";
  lab.config = config;
  const double c0 = cpu_seconds();
  const auto w0 = std::chrono::steady_clock::now();
  try {
    h::Run(config, {lab.dir, false, false}).run_all();
  } catch (const std::exception& e) {
    std::printf("FAIL pipeline: %s\n", e.what());
    return 1;
  }
  lab.pipeline_cpu = cpu_seconds() - c0;
  lab.pipeline_wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - w0).count();
  lab.corpus = read_json(lab.dir / "corpus.json").at("sequences").get<model::Corpus>();
  lab.model_a = model::load_model(lab.dir / "model_a.ckpt");
  lab.model_b = model::load_model(lab.dir / "model_b.ckpt");
  lab.sae_a = sae::sae_from_checkpoint(core::load_checkpoint(lab.dir / "sae_a.ckpt"));
  lab.sae_b = sae::sae_from_checkpoint(core::load_checkpoint(lab.dir / "sae_b.ckpt"));
  lab.report = read_json(lab.dir / "report.json");
  lab.targets = read_json(lab.dir / "targets.json");

  const fs::path second = work / "run_2";
  std::string second_error;
  try {
    h::Run(config, {second, false, true}).run_all();
  } catch (const std::exception& e) {
    second_error = e.what();
  }

  criterion("gradient-correctness", [&] { return check_gradients(lab); });
  criterion("sae-norms-and-sparsity", [&] { return check_sae(lab); });
  criterion("oracle-equivalence", [&] { return check_oracles(lab); });
  criterion("no-op-identities", [&] { return check_noops(lab); });
  criterion("transport-sanity", [&] { return check_transport(lab); });
  criterion("interference-trend", [&] { return check_trend(lab); });
  criterion("injection-direction", [&] { return check_injection(lab); });
  criterion("neuron-degree-harness", [&] { return check_neurons(lab); });
  criterion("shared-pair-mining", [&] { return check_shared_pairs(lab); });
  criterion("reproducibility", [&]() -> std::pair<bool, std::string> {
    if (!second_error.empty()) {
      return {false, "second run failed: " + second_error};
    }
    return check_reproducibility(lab, second);
  });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
