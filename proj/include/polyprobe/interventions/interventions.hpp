#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "polyprobe/eval/metrics.hpp"
#include "polyprobe/model/transformer.hpp"
#include "polyprobe/sae/sae.hpp"

namespace polyprobe::interventions {

using core::Tensor;
using model::Site;
using model::TokenId;

// Linear maps between sites with layer norms frozen to their corpus-mean
// scale and attention taken as the identity mixing at the final position:
//   resid_pre(l) -> attn_out(l):   A_l = W_o^T W_v^T diag(g1) C / s1
//   resid_pre(l) -> after attn:    I + A_l
//   after attn   -> resid_post(l): I (the MLP branch is not linear)
//   resid_post(l) -> resid_pre(l+1): I
// Any path into mlp_out from another site is NoLinearPath. Maps act on
// column vectors.
class Transporter {
 public:
  Transporter(const model::Transformer& model, model::FrozenNorms norms);

  // Phi_{from -> to} for `from` at or before `to` (d x d).
  Tensor linear_map(const Site& from, const Site& to) const;

  // Unit z_s: Phi z for s after p, pinv(Phi_{s->p}) z for s before p, z for
  // s = p. Throws NoLinearPath, ZeroNorm (direction lost in transport).
  std::vector<double> transport(std::span<const double> z, const Site& p, const Site& s) const;

  const model::FrozenNorms& norms() const { return norms_; }

 private:
  std::size_t d_;
  std::size_t layers_;
  std::vector<Tensor> attn_maps_;
  model::FrozenNorms norms_;
};

struct FeatureSource {
  std::size_t feature = 0;
};

struct GradientSource {
  std::size_t feature = 0;   // the feature whose record supplied the window
  std::size_t sequence = 0;  // corpus sequence of the window
  std::size_t position = 0;  // position within `tokens`
  std::vector<TokenId> tokens;
  std::string probe;  // "feature" or "neuron:<k>"
};

struct SteeringPlan {
  Site source;     // p
  Site injection;  // s
  std::vector<double> raw;        // z_p
  std::vector<double> direction;  // z_s, unit length
  std::variant<FeatureSource, GradientSource> provenance;
};

void to_json(nlohmann::json& j, const SteeringPlan& p);

// z_p = decoder direction of `feature` at sae.site, transported to `s`.
SteeringPlan steering_from_feature(const sae::Sae& sae, std::size_t feature, const Site& s, const Transporter& tr);

struct GradientProbe {
  enum class Kind { Feature, Neuron } kind = Kind::Feature;
  std::vector<double> vector;  // feature mode: the probe itself
  std::size_t neuron = 0;      // neuron mode: one-hot index
};

// Probe on a feature's decoder direction.
GradientProbe feature_probe(const sae::Sae& sae, std::size_t feature);

// g = d<a_p[position], v>/d e_position, normalised and used as the edit
// direction at `s`. Throws ZeroGradient when ||g|| < 1e-12.
SteeringPlan steering_from_token_gradient(const model::Transformer& model, std::span<const TokenId> tokens,
                                          std::size_t position, const Site& p, const GradientProbe& probe,
                                          const Site& s, std::size_t feature = 0, std::size_t sequence = 0);

// Gradient plan built from the top activation record of `feature`: the
// window up to and including its peak token.
SteeringPlan steering_from_record(const model::Transformer& model, const sae::Sae& sae,
                                  const sae::FeatureActivationRecord& record, const GradientProbe& probe,
                                  const Site& s);

struct InterventionOutcome {
  std::vector<double> before;  // O
  std::vector<double> after;   // O~
  eval::MetricReport metrics;
  double total_variation = 0.0;
};

void to_json(nlohmann::json& j, const InterventionOutcome& o, bool with_distributions);

// Next-token distribution of an unedited prompt.
std::vector<double> baseline(const model::Transformer& model, std::span<const TokenId> prompt);

InterventionOutcome make_outcome(std::vector<double> before, std::vector<double> after,
                                 const eval::TargetProfile& target);

inline constexpr double kMaxAlpha = 20.0;

// A_s <- A_s + alpha z_s at the final position. Throws InvalidConfig for
// |alpha| > 20.
InterventionOutcome apply_steering(const model::Transformer& model, std::span<const TokenId> prompt,
                                   const SteeringPlan& plan, double alpha, const eval::TargetProfile& target);
InterventionOutcome apply_steering(const model::Transformer& model, std::span<const TokenId> prompt,
                                   const std::vector<double>& before, const SteeringPlan& plan, double alpha,
                                   const eval::TargetProfile& target);

// +-{0.5, 1, 1.5, 2, 3, ..., 10, 12, 14, 17, 20}
std::vector<double> feature_grid();
// {0.5, 1, 1.5, 2, 3, ..., 10, 12, 14, 17, 20}
std::vector<double> gradient_grid();

inline constexpr double kDefaultGuardTv = 0.9;

struct ScalePoint {
  double alpha = 0.0;
  double value = 0.0;  // NaN when the metric is undefined (zero baseline)
  double total_variation = 0.0;
  bool guarded = false;  // total variation above the cap
};

struct ScaleSearchResult {
  std::vector<ScalePoint> curve;  // in grid order
  double best_alpha = 0.0;
  InterventionOutcome best;
  eval::Metric metric = eval::Metric::DeltaC;
  double guard_tv = kDefaultGuardTv;
  std::size_t guard_violations = 0;
};

void to_json(nlohmann::json& j, const ScaleSearchResult& r, bool with_distributions);

// Exhaustive search: best alpha maximises the metric among points within
// the total-variation cap; ties go to the smaller |alpha|, then the smaller
// alpha, so the result does not depend on grid order. Throws InvalidConfig
// for an empty grid or |alpha| > 20, AllGuarded when no point is eligible.
ScaleSearchResult optimize_scale(const model::Transformer& model, std::span<const TokenId> prompt,
                                 const SteeringPlan& plan, const std::vector<double>& grid, eval::Metric metric,
                                 double guard_tv, const eval::TargetProfile& target);

struct SnippetPolicy {
  double ratio = 0.8;
  std::size_t max_len = 0;  // 0: no truncation
};

struct InjectionSpec {
  std::vector<TokenId> snippet;
  std::optional<TokenId> separator;  // appended after the snippet when set
  // The self-injection control deliberately overlaps T_f.
  bool allow_overlap = false;
  std::size_t feature = 0;
  std::size_t sequence = 0;
  std::size_t start = 0;  // corpus position of snippet[0]
};

void to_json(nlohmann::json& j, const InjectionSpec& s);

// The maximal run of consecutive window entries with activation >=
// ratio * window max that contains the (first) max entry. With max_len set,
// the max_len sub-run with the largest activation sum (earliest on ties).
// Throws NeverFires when the window never fires.
InjectionSpec extract_snippet(const sae::ActivationWindow& window, const SnippetPolicy& policy = {});

// O from the prompt, O~ from snippet (+ separator) ++ prompt. An empty
// snippet leaves the prompt unchanged. Throws ShapeMismatch for an empty
// prompt, ContextOverflow, OverlapGuard.
InterventionOutcome prompt_inject(const model::Transformer& model, std::span<const TokenId> prompt,
                                  const InjectionSpec& spec, const eval::TargetProfile& target);

// Scales dimension `neuron` of the activation at `site` at every position.
// One outcome per target (the clusters connected to the neuron). Throws
// BadNeuron, InvalidConfig for scale outside [0, 20].
std::vector<InterventionOutcome> neuron_intervene(const model::Transformer& model, const Site& site,
                                                  std::size_t neuron, double scale, std::span<const TokenId> prompt,
                                                  const std::vector<eval::TargetProfile>& targets);

// A feature to steer toward, with its prompts.
struct TargetContext {
  std::size_t feature = 0;
  eval::TargetProfile profile;
  std::vector<std::vector<TokenId>> prompts;
};

struct PrefilterResult {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> dropped;
  double threshold = 0.05;
};

void to_json(nlohmann::json& j, const PrefilterResult& r);

// Keeps targets whose own direction, at some unguarded grid scale, raises
// delta_c or relative delta_w by >= threshold on at least one prompt.
PrefilterResult prefilter_targets(const model::Transformer& model, const sae::Sae& sae, const Transporter& tr,
                                  const std::vector<TargetContext>& targets, double threshold,
                                  const std::vector<double>& grid, double guard_tv);

// The per-prompt criterion used by prefilter_targets.
bool self_steering_effective(const model::Transformer& model, const SteeringPlan& plan,
                             std::span<const TokenId> prompt, const eval::TargetProfile& target, double threshold,
                             const std::vector<double>& grid, double guard_tv);

}  // namespace polyprobe::interventions
