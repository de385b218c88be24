#include "polyprobe/interventions/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "polyprobe/core/error.hpp"
#include "polyprobe/core/linalg.hpp"
#include "polyprobe/core/parallel.hpp"

namespace polyprobe::interventions {

using core::Shape;
using model::SiteKind;

Transporter::Transporter(const model::Transformer& model, model::FrozenNorms norms)
    : d_(model.config.d_model), layers_(model.config.n_layers), norms_(std::move(norms)) {
  require(norms_.ln1.size() == layers_, ErrorCode::ShapeMismatch, "frozen norms do not match the model");
  for (std::size_t l = 0; l < layers_; ++l) {
    const auto& lp = model.params.layers[l];
    const double sigma = norms_.ln1[l];
    require(sigma > 0.0, ErrorCode::InvalidConfig, "frozen layer-norm scale must be positive");
    // diag(g1) C / s1, C = I - 11^T / d
    Tensor norm_map(Shape{d_, d_});
    for (std::size_t i = 0; i < d_; ++i) {
      for (std::size_t j = 0; j < d_; ++j) {
        const double c = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(d_);
        norm_map(i, j) = lp.ln1_gain[i] * c / sigma;
      }
    }
    attn_maps_.push_back(
        core::matmul(core::transpose(lp.w_o), core::matmul(core::transpose(lp.w_v), norm_map)));
  }
}

namespace {

// Residual stream points: 2l before layer l's attention, 2l+1 after it,
// 2l+2 after the layer (= before layer l+1).
std::size_t stream_point_of_source(const Site& s) {
  switch (s.kind) {
    case SiteKind::ResidPre: return 2 * s.layer;
    case SiteKind::AttnOut: return 2 * s.layer + 1;
    case SiteKind::MlpOut:
    case SiteKind::ResidPost: return 2 * s.layer + 2;
  }
  return 0;
}

}  // namespace

Tensor Transporter::linear_map(const Site& from, const Site& to) const {
  require(from.layer < layers_ && to.layer < layers_, ErrorCode::BadSite, "site outside the model");
  if (from.ordinal() > to.ordinal()) {
    fail(ErrorCode::InvalidConfig, "linear_map needs " + from.to_string() + " at or before " + to.to_string());
  }
  if (from == to) {
    return Tensor::identity(d_);
  }
  if (to.kind == SiteKind::MlpOut) {
    fail(ErrorCode::NoLinearPath, "no linear path from " + from.to_string() + " into " + to.to_string());
  }
  const std::size_t a = stream_point_of_source(from);
  const std::size_t b = to.kind == SiteKind::ResidPost   ? 2 * to.layer + 2
                        : to.kind == SiteKind::ResidPre ? 2 * to.layer
                                                        : 2 * to.layer;  // attn_out reads the stream before layer l
  require(a <= b, ErrorCode::NoLinearPath, "no linear path from " + from.to_string() + " to " + to.to_string());
  Tensor m = Tensor::identity(d_);
  for (std::size_t pt = a; pt < b; ++pt) {
    if (pt % 2 == 0) {
      m = core::add(m, core::matmul(attn_maps_[pt / 2], m));
    }
  }
  if (to.kind == SiteKind::AttnOut) {
    m = core::matmul(attn_maps_[to.layer], m);
  }
  return m;
}

std::vector<double> Transporter::transport(std::span<const double> z, const Site& p, const Site& s) const {
  require(z.size() == d_, ErrorCode::ShapeMismatch, "direction must have length d_model");
  std::vector<double> out;
  if (p == s) {
    out.assign(z.begin(), z.end());
    if (std::abs(core::norm(out) - 1.0) <= 1e-12) {
      return out;
    }
  } else if (p.ordinal() < s.ordinal()) {
    out = core::matvec(linear_map(p, s), z);
  } else {
    out = core::matvec(core::pseudo_inverse(linear_map(s, p)), z);
  }
  if (core::norm(out) < 1e-12) {
    fail(ErrorCode::ZeroNorm, "direction vanishes when transported from " + p.to_string() + " to " + s.to_string());
  }
  return core::normalized(out);
}

void to_json(nlohmann::json& j, const SteeringPlan& p) {
  j = nlohmann::json{{"source", p.source.to_string()},
                     {"injection", p.injection.to_string()},
                     {"raw", p.raw},
                     {"direction", p.direction}};
  if (const auto* f = std::get_if<FeatureSource>(&p.provenance)) {
    j["provenance"] = {{"type", "feature_direction"}, {"feature", f->feature}};
  } else {
    const auto& g = std::get<GradientSource>(p.provenance);
    j["provenance"] = {{"type", "token_gradient"}, {"feature", g.feature},   {"sequence", g.sequence},
                       {"position", g.position},   {"tokens", g.tokens},     {"probe", g.probe}};
  }
}

SteeringPlan steering_from_feature(const sae::Sae& sae, std::size_t feature, const Site& s, const Transporter& tr) {
  SteeringPlan plan;
  plan.source = sae.site;
  plan.injection = s;
  plan.raw = sae::feature_direction(sae, feature);
  plan.direction = tr.transport(plan.raw, sae.site, s);
  plan.provenance = FeatureSource{feature};
  return plan;
}

GradientProbe feature_probe(const sae::Sae& sae, std::size_t feature) {
  return GradientProbe{GradientProbe::Kind::Feature, sae::feature_direction(sae, feature), 0};
}

SteeringPlan steering_from_token_gradient(const model::Transformer& model, std::span<const TokenId> tokens,
                                          std::size_t position, const Site& p, const GradientProbe& probe,
                                          const Site& s, std::size_t feature, std::size_t sequence) {
  const std::size_t d = model.config.d_model;
  model::validate_site(model.config, s);
  std::vector<double> v;
  std::string probe_name;
  if (probe.kind == GradientProbe::Kind::Neuron) {
    if (probe.neuron >= d) {
      fail(ErrorCode::BadNeuron, "probe neuron " + std::to_string(probe.neuron) + " outside d_model");
    }
    v.assign(d, 0.0);
    v[probe.neuron] = 1.0;
    probe_name = "neuron:" + std::to_string(probe.neuron);
  } else {
    v = probe.vector;
    probe_name = "feature";
  }
  const auto g = model::grad_wrt_embedding(model, tokens, p, position, v);
  const double n = core::norm(g);
  if (n < 1e-12) {
    fail(ErrorCode::ZeroGradient, "token gradient vanishes at " + p.to_string());
  }
  SteeringPlan plan;
  plan.source = p;
  plan.injection = s;
  plan.raw = g;
  plan.direction = g;
  for (double& x : plan.direction) {
    x /= n;
  }
  plan.provenance = GradientSource{feature, sequence, position, std::vector<TokenId>(tokens.begin(), tokens.end()),
                                   probe_name};
  return plan;
}

SteeringPlan steering_from_record(const model::Transformer& model, const sae::Sae& sae,
                                  const sae::FeatureActivationRecord& record, const GradientProbe& probe,
                                  const Site& s) {
  if (record.windows.empty()) {
    fail(ErrorCode::NeverFires, "feature " + std::to_string(record.feature) + " has no activation record");
  }
  const auto& w = record.windows.front();
  const auto all = w.tokens();
  const std::vector<TokenId> tokens(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(w.peak_offset + 1));
  return steering_from_token_gradient(model, tokens, w.peak_offset, sae.site, probe, s, record.feature,
                                      w.entries.front().sequence);
}

void to_json(nlohmann::json& j, const InterventionOutcome& o, bool with_distributions) {
  j = nlohmann::json{{"metrics", o.metrics}, {"total_variation", o.total_variation}};
  if (with_distributions) {
    j["before"] = o.before;
    j["after"] = o.after;
  }
}

std::vector<double> baseline(const model::Transformer& model, std::span<const TokenId> prompt) {
  return model::forward(model, prompt).next_token.probs;
}

InterventionOutcome make_outcome(std::vector<double> before, std::vector<double> after,
                                 const eval::TargetProfile& target) {
  InterventionOutcome o;
  o.metrics = eval::metric_report(before, after, target);
  o.total_variation = eval::total_variation(before, after);
  o.before = std::move(before);
  o.after = std::move(after);
  return o;
}

namespace {

void check_alpha(double alpha) {
  if (!(std::abs(alpha) <= kMaxAlpha)) {
    fail(ErrorCode::InvalidConfig, "steering scale " + std::to_string(alpha) + " outside [-20, 20]");
  }
}

std::vector<double> steered(const model::Transformer& model, std::span<const TokenId> prompt,
                            const SteeringPlan& plan, double alpha) {
  model::ForwardOptions opts;
  opts.edits = {model::ActivationEdit::add_vector(plan.injection, plan.direction, alpha)};
  return model::forward(model, prompt, opts).next_token.probs;
}

}  // namespace

InterventionOutcome apply_steering(const model::Transformer& model, std::span<const TokenId> prompt,
                                   const SteeringPlan& plan, double alpha, const eval::TargetProfile& target) {
  return apply_steering(model, prompt, baseline(model, prompt), plan, alpha, target);
}

InterventionOutcome apply_steering(const model::Transformer& model, std::span<const TokenId> prompt,
                                   const std::vector<double>& before, const SteeringPlan& plan, double alpha,
                                   const eval::TargetProfile& target) {
  check_alpha(alpha);
  return make_outcome(before, steered(model, prompt, plan, alpha), target);
}

std::vector<double> gradient_grid() { return {0.5, 1, 1.5, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 17, 20}; }

std::vector<double> feature_grid() {
  std::vector<double> g;
  for (double a : gradient_grid()) {
    g.push_back(-a);
  }
  std::reverse(g.begin(), g.end());
  for (double a : gradient_grid()) {
    g.push_back(a);
  }
  return g;
}

void to_json(nlohmann::json& j, const ScaleSearchResult& r, bool with_distributions) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.curve) {
    curve.push_back({{"alpha", p.alpha},
                     {"value", std::isnan(p.value) ? nlohmann::json(nullptr) : nlohmann::json(p.value)},
                     {"total_variation", p.total_variation},
                     {"guarded", p.guarded}});
  }
  nlohmann::json best;
  to_json(best, r.best, with_distributions);
  j = nlohmann::json{{"metric", eval::metric_name(r.metric)},
                     {"guard_tv", r.guard_tv},
                     {"guard_violations", r.guard_violations},
                     {"best_alpha", r.best_alpha},
                     {"best", best},
                     {"curve", curve}};
}

ScaleSearchResult optimize_scale(const model::Transformer& model, std::span<const TokenId> prompt,
                                 const SteeringPlan& plan, const std::vector<double>& grid, eval::Metric metric,
                                 double guard_tv, const eval::TargetProfile& target) {
  require(!grid.empty(), ErrorCode::InvalidConfig, "scale grid is empty");
  for (double a : grid) {
    check_alpha(a);
  }
  ScaleSearchResult res;
  res.metric = metric;
  res.guard_tv = guard_tv;
  const auto before = baseline(model, prompt);
  bool have = false;
  bool any_unguarded = false;
  for (double a : grid) {
    InterventionOutcome o = apply_steering(model, prompt, before, plan, a, target);
    ScalePoint pt{a, eval::metric_value(o.metrics, metric), o.total_variation, o.total_variation > guard_tv};
    res.curve.push_back(pt);
    if (pt.guarded) {
      ++res.guard_violations;
      continue;
    }
    any_unguarded = true;
    if (std::isnan(pt.value)) {
      continue;
    }
    const double bv = have ? eval::metric_value(res.best.metrics, metric) : 0.0;
    const bool better = !have || pt.value > bv ||
                        (pt.value == bv && (std::abs(a) < std::abs(res.best_alpha) ||
                                            (std::abs(a) == std::abs(res.best_alpha) && a < res.best_alpha)));
    if (better) {
      have = true;
      res.best_alpha = a;
      res.best = std::move(o);
    }
  }
  if (!have) {
    if (any_unguarded) {
      fail(ErrorCode::ZeroBaseline, "metric undefined at every scale: baseline weighted cosine is zero");
    }
    fail(ErrorCode::AllGuarded, "every scale exceeds the total-variation cap " + std::to_string(guard_tv));
  }
  return res;
}

void to_json(nlohmann::json& j, const InjectionSpec& s) {
  j = nlohmann::json{{"snippet", s.snippet},
                     {"separator", s.separator ? nlohmann::json(*s.separator) : nlohmann::json(nullptr)},
                     {"allow_overlap", s.allow_overlap},
                     {"feature", s.feature},
                     {"sequence", s.sequence},
                     {"start", s.start}};
}

InjectionSpec extract_snippet(const sae::ActivationWindow& window, const SnippetPolicy& policy) {
  require(policy.ratio > 0.0 && policy.ratio <= 1.0, ErrorCode::InvalidConfig, "snippet ratio must lie in (0, 1]");
  const auto acts = window.activations();
  if (acts.empty()) {
    fail(ErrorCode::NeverFires, "empty activation window");
  }
  const auto peak = static_cast<std::size_t>(std::max_element(acts.begin(), acts.end()) - acts.begin());
  const double mx = acts[peak];
  if (!(mx > 0.0)) {
    fail(ErrorCode::NeverFires, "activation window never fires");
  }
  const double thr = policy.ratio * mx;
  std::size_t lo = peak;
  std::size_t hi = peak + 1;
  while (lo > 0 && acts[lo - 1] >= thr) {
    --lo;
  }
  while (hi < acts.size() && acts[hi] >= thr) {
    ++hi;
  }
  if (policy.max_len > 0 && hi - lo > policy.max_len) {
    std::size_t best = lo;
    double best_sum = -std::numeric_limits<double>::infinity();
    for (std::size_t st = lo; st + policy.max_len <= hi; ++st) {
      double sum = 0.0;
      for (std::size_t k = st; k < st + policy.max_len; ++k) {
        sum += acts[k];
      }
      if (sum > best_sum) {
        best_sum = sum;
        best = st;
      }
    }
    lo = best;
    hi = best + policy.max_len;
  }
  InjectionSpec spec;
  for (std::size_t k = lo; k < hi; ++k) {
    spec.snippet.push_back(window.entries[k].token);
  }
  spec.sequence = window.entries[lo].sequence;
  spec.start = window.entries[lo].position;
  return spec;
}

InterventionOutcome prompt_inject(const model::Transformer& model, std::span<const TokenId> prompt,
                                  const InjectionSpec& spec, const eval::TargetProfile& target) {
  require(!prompt.empty(), ErrorCode::ShapeMismatch, "prompt must not be empty");
  if (!spec.allow_overlap) {
    for (TokenId t : spec.snippet) {
      if (std::binary_search(target.tokens.begin(), target.tokens.end(), t)) {
        fail(ErrorCode::OverlapGuard, "snippet token " + std::to_string(t) + " belongs to the target token set");
      }
    }
  }
  std::vector<TokenId> combined;
  if (!spec.snippet.empty()) {
    combined = spec.snippet;
    if (spec.separator) {
      combined.push_back(*spec.separator);
    }
  }
  combined.insert(combined.end(), prompt.begin(), prompt.end());
  if (combined.size() > model.config.context_length) {
    fail(ErrorCode::ContextOverflow, "snippet plus prompt has " + std::to_string(combined.size()) + " tokens");
  }
  auto before = baseline(model, prompt);
  auto after = spec.snippet.empty() ? before : baseline(model, combined);
  return make_outcome(std::move(before), std::move(after), target);
}

std::vector<InterventionOutcome> neuron_intervene(const model::Transformer& model, const Site& site,
                                                  std::size_t neuron, double scale, std::span<const TokenId> prompt,
                                                  const std::vector<eval::TargetProfile>& targets) {
  if (neuron >= model.config.d_model) {
    fail(ErrorCode::BadNeuron, "neuron " + std::to_string(neuron) + " outside d_model");
  }
  if (!(scale >= 0.0 && scale <= model::kMaxNeuronScale)) {
    fail(ErrorCode::InvalidConfig, "neuron scale " + std::to_string(scale) + " outside [0, 20]");
  }
  const auto before = baseline(model, prompt);
  model::ForwardOptions opts;
  opts.edits = {model::ActivationEdit::scale_neuron(site, neuron, scale, model::EditScope::AllPositions)};
  const auto after = model::forward(model, prompt, opts).next_token.probs;
  std::vector<InterventionOutcome> out;
  for (const auto& t : targets) {
    out.push_back(make_outcome(before, after, t));
  }
  return out;
}

void to_json(nlohmann::json& j, const PrefilterResult& r) {
  j = nlohmann::json{{"threshold", r.threshold},
                     {"kept", r.kept},
                     {"dropped", r.dropped},
                     {"n_kept", r.kept.size()},
                     {"n_dropped", r.dropped.size()}};
}

bool self_steering_effective(const model::Transformer& model, const SteeringPlan& plan,
                             std::span<const TokenId> prompt, const eval::TargetProfile& target, double threshold,
                             const std::vector<double>& grid, double guard_tv) {
  const auto before = baseline(model, prompt);
  for (double a : grid) {
    const auto o = apply_steering(model, prompt, before, plan, a, target);
    if (o.total_variation > guard_tv) {
      continue;
    }
    if ((o.metrics.delta_c && *o.metrics.delta_c >= threshold) || o.metrics.delta_w_relative >= threshold) {
      return true;
    }
  }
  return false;
}

PrefilterResult prefilter_targets(const model::Transformer& model, const sae::Sae& sae, const Transporter& tr,
                                  const std::vector<TargetContext>& targets, double threshold,
                                  const std::vector<double>& grid, double guard_tv) {
  const auto keep = core::parallel_map(targets.size(), [&](std::size_t i) {
    const auto& t = targets[i];
    const SteeringPlan plan = steering_from_feature(sae, t.feature, sae.site, tr);
    for (const auto& p : t.prompts) {
      if (self_steering_effective(model, plan, p, t.profile, threshold, grid, guard_tv)) {
        return true;
      }
    }
    return false;
  });
  PrefilterResult r;
  r.threshold = threshold;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    (keep[i] ? r.kept : r.dropped).push_back(targets[i].feature);
  }
  return r;
}

}  // namespace polyprobe::interventions
