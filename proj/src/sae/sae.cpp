#include "polyprobe/sae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "polyprobe/core/autodiff.hpp"
#include "polyprobe/core/error.hpp"
#include "polyprobe/core/parallel.hpp"
#include "polyprobe/core/rng.hpp"

namespace polyprobe::sae {

using core::Shape;
using core::Tape;
using core::Var;
namespace ops = core::ops;

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::TopK: return "topk";
    case Activation::Linear: return "linear";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") {
    return Activation::Relu;
  }
  if (s == "topk") {
    return Activation::TopK;
  }
  if (s == "linear") {
    return Activation::Linear;
  }
  fail(ErrorCode::InvalidConfig, "unknown SAE activation '" + s + "'");
}

void to_json(nlohmann::json& j, const SaeConfig& c) {
  j = nlohmann::json{{"k", c.k},         {"lambda", c.lambda}, {"activation", activation_name(c.activation)},
                     {"topk", c.topk},   {"lr", c.lr},         {"steps", c.steps},
                     {"batch", c.batch}, {"holdout_fraction", c.holdout_fraction}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SaeConfig& c) {
  SaeConfig d;
  c.k = j.value("k", d.k);
  c.lambda = j.value("lambda", d.lambda);
  c.activation = parse_activation(j.value("activation", activation_name(d.activation)));
  c.topk = j.value("topk", d.topk);
  c.lr = j.value("lr", d.lr);
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
  c.seed = j.value("seed", d.seed);
}

ActivationDataset harvest_activations(const model::Transformer& model, const model::Corpus& corpus,
                                      const Site& site) {
  require(!corpus.empty(), ErrorCode::EmptyCorpus, "cannot harvest activations from an empty corpus");
  model::validate_site(model.config, site);
  model::ForwardOptions opts;
  opts.capture = {site};
  const auto traces = core::parallel_map(corpus.size(), [&](std::size_t s) {
    require(!corpus[s].empty(), ErrorCode::EmptyCorpus, "corpus contains an empty sequence");
    return model::forward(model, corpus[s], opts).trace.at(site);
  });
  std::size_t rows = 0;
  for (const auto& t : traces) {
    rows += t.cols();
  }
  const std::size_t d = model.config.d_model;
  ActivationDataset out{site, Tensor(Shape{rows, d}), {}};
  out.provenance.reserve(rows);
  std::size_t r = 0;
  for (std::size_t s = 0; s < traces.size(); ++s) {
    const Tensor& t = traces[s];
    for (std::size_t p = 0; p < t.cols(); ++p, ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        out.acts(r, c) = t(c, p);
      }
      out.provenance.emplace_back(s, p);
    }
  }
  return out;
}

namespace {

Var activate(Tape& tape, Var pre, const Sae& sae) {
  switch (sae.activation) {
    case Activation::Relu: return ops::relu(tape, pre);
    case Activation::TopK: return ops::relu(tape, ops::topk_rows(tape, pre, sae.topk));
    case Activation::Linear: return pre;
  }
  return pre;
}

struct SaeGraph {
  Var codes;
  Var recon;
};

SaeGraph build(Tape& tape, const Sae& sae, Var x, Var w_enc, Var b_enc, Var w_dec, Var b_dec) {
  const Var pre = ops::add_row_bias(tape, ops::matmul(tape, x, ops::transpose(tape, w_enc)), b_enc);
  const Var f = activate(tape, pre, sae);
  const Var recon = ops::add_row_bias(tape, ops::matmul(tape, f, ops::transpose(tape, w_dec)), b_dec);
  return {f, recon};
}

void check_input(const Sae& sae, const Tensor& x) {
  core::require_rank(x, 2, "SAE input");
  require(x.cols() == sae.d(), ErrorCode::ShapeMismatch, "SAE input width must equal d_model");
}

}  // namespace

Tensor encode(const Sae& sae, const Tensor& x) {
  check_input(sae, x);
  Tape tape;
  const Var xv = tape.constant_ref(x);
  const Var pre = ops::add_row_bias(tape, ops::matmul(tape, xv, tape.constant(core::transpose(sae.w_enc))),
                                    tape.constant_ref(sae.b_enc));
  return tape.value(activate(tape, pre, sae));
}

Tensor decode(const Sae& sae, const Tensor& f) {
  core::require_rank(f, 2, "SAE codes");
  require(f.cols() == sae.k(), ErrorCode::ShapeMismatch, "SAE code width must equal k");
  Tensor out = core::matmul(f, core::transpose(sae.w_dec));
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      out(r, c) += sae.b_dec[c];
    }
  }
  return out;
}

double reconstruction_mse(const Sae& sae, const Tensor& x) {
  const Tensor recon = decode(sae, encode(sae, x));
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += (recon[i] - x[i]) * (recon[i] - x[i]);
  }
  return s / static_cast<double>(x.size());
}

double mean_l0(const Sae& sae, const Tensor& x) {
  const Tensor f = encode(sae, x);
  std::size_t nz = 0;
  for (double v : f.values()) {
    nz += v != 0.0 ? 1 : 0;
  }
  return static_cast<double>(nz) / static_cast<double>(f.rows());
}

namespace {

struct Adam {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<Tensor> m{};
  std::vector<Tensor> v{};

  void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads) {
    if (m.empty()) {
      for (Tensor* p : params) {
        m.emplace_back(p->shape());
        v.emplace_back(p->shape());
      }
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!grads[k]) {
        continue;
      }
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[k][i] = beta1 * m[k][i] + (1.0 - beta1) * g[i];
        v[k][i] = beta2 * v[k][i] + (1.0 - beta2) * g[i] * g[i];
        p[i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps);
      }
    }
  }
};

double renormalize_columns(Tensor& w_dec) {
  const std::size_t d = w_dec.rows();
  const std::size_t k = w_dec.cols();
  double worst = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double sq = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      sq += w_dec(r, c) * w_dec(r, c);
    }
    const double n = std::sqrt(sq);
    if (n < kDeadNorm) {
      continue;
    }
    double after = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      w_dec(r, c) /= n;
      after += w_dec(r, c) * w_dec(r, c);
    }
    worst = std::max(worst, std::abs(std::sqrt(after) - 1.0));
  }
  return worst;
}

Tensor gather(const Tensor& x, const std::vector<std::size_t>& rows) {
  Tensor out(Shape{rows.size(), x.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.row(i).begin());
  }
  return out;
}

}  // namespace

SaeTrainResult train_sae(const ActivationDataset& data, const SaeConfig& config,
                         const std::function<void(const Sae&, const SaeStepInfo&)>& on_step) {
  const Tensor& x = data.acts;
  require(x.rank() == 2 && x.rows() >= 2, ErrorCode::EmptyCorpus, "SAE training needs at least two activation rows");
  const std::size_t d = x.cols();
  const std::size_t k = config.k == 0 ? 8 * d : config.k;
  require(k >= d, ErrorCode::InvalidConfig, "SAE width k must be >= d_model");
  require(config.lambda >= 0.0, ErrorCode::InvalidConfig, "lambda must be >= 0");
  require(config.lr > 0.0 && config.batch >= 1, ErrorCode::InvalidConfig, "lr and batch must be positive");
  require(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0, ErrorCode::InvalidConfig,
          "holdout_fraction must lie in (0, 1)");
  require(config.activation != Activation::TopK || config.topk >= 1, ErrorCode::InvalidConfig, "topk must be >= 1");
  core::require_finite(x, "SAE training data");

  core::Rng rng = core::Rng(config.seed).split("sae").split(data.site.to_string());
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const std::size_t n_hold = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(x.rows()))));
  const Tensor heldout = gather(x, std::vector<std::size_t>(order.begin(), order.begin() + n_hold));
  const std::vector<std::size_t> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  Sae sae;
  sae.site = data.site;
  sae.activation = config.activation;
  sae.topk = config.topk;
  sae.w_dec = Tensor(Shape{d, k});
  for (double& w : sae.w_dec.values()) {
    w = rng.normal();
  }
  renormalize_columns(sae.w_dec);
  sae.w_enc = core::transpose(sae.w_dec);
  sae.b_enc = Tensor(Shape{k});
  sae.b_dec = Tensor(Shape{d});
  for (std::size_t r : train_rows) {
    for (std::size_t c = 0; c < d; ++c) {
      sae.b_dec[c] += x(r, c);
    }
  }
  for (double& b : sae.b_dec.values()) {
    b /= static_cast<double>(train_rows.size());
  }

  SaeTrainResult result;
  result.report.initial_heldout_mse = reconstruction_mse(sae, heldout);
  Adam adam{config.lr};

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> rows(config.batch);
    for (auto& r : rows) {
      r = train_rows[rng.below(train_rows.size())];
    }
    const Tensor batch = gather(x, rows);
    Tape tape;
    const Var xv = tape.constant_ref(batch);
    const Var w_enc = tape.input_ref(sae.w_enc);
    const Var b_enc = tape.input_ref(sae.b_enc);
    const Var w_dec = tape.input_ref(sae.w_dec);
    const Var b_dec = tape.input_ref(sae.b_dec);
    const SaeGraph g = build(tape, sae, xv, w_enc, b_enc, w_dec, b_dec);
    const double inv_b = 1.0 / static_cast<double>(rows.size());
    Var loss = ops::scale(tape, ops::sum_squares(tape, ops::sub(tape, g.recon, xv)), inv_b);
    if (config.lambda > 0.0) {
      // sum_i f_i ||W_dec[:, i]|| over the batch, written out literally.
      const Var norms = ops::reshape(tape, ops::column_norms(tape, w_dec), Shape{k, 1});
      const Var weighted = ops::sum(tape, ops::matmul(tape, g.codes, norms));
      loss = ops::add(tape, loss, ops::scale(tape, weighted, config.lambda * inv_b));
    }
    const double value = tape.value(loss).item();
    if (!std::isfinite(value)) {
      fail(ErrorCode::Divergence, "SAE loss became non-finite at step " + std::to_string(step));
    }
    result.report.step_losses.push_back(value);
    const core::Gradients grads = core::backprop(tape, loss);
    auto grad_of = [&](Var v) { return grads.has(v) ? &grads.at(v) : nullptr; };
    adam.step({&sae.w_enc, &sae.b_enc, &sae.w_dec, &sae.b_dec},
              {grad_of(w_enc), grad_of(b_enc), grad_of(w_dec), grad_of(b_dec)});
    SaeStepInfo info{step, value, renormalize_columns(sae.w_dec)};
    result.report.worst_norm_deviation = std::max(result.report.worst_norm_deviation, info.max_norm_deviation);
    if (on_step) {
      on_step(sae, info);
    }
  }
  result.report.final_heldout_mse = reconstruction_mse(sae, heldout);
  result.report.heldout_mean_l0 = mean_l0(sae, heldout);
  require(std::isfinite(result.report.final_heldout_mse), ErrorCode::Divergence, "SAE held-out error is non-finite");
  result.sae = std::move(sae);
  return result;
}

std::vector<double> feature_direction(const Sae& sae, std::size_t i) {
  if (i >= sae.k()) {
    fail(ErrorCode::ShapeMismatch, "feature " + std::to_string(i) + " outside SAE width " + std::to_string(sae.k()));
  }
  std::vector<double> col(sae.d());
  for (std::size_t r = 0; r < sae.d(); ++r) {
    col[r] = sae.w_dec(r, i);
  }
  const double n = core::norm(col);
  if (n < kDeadNorm) {
    fail(ErrorCode::DeadFeature, "feature " + std::to_string(i) + " has a zero decoder column");
  }
  for (double& v : col) {
    v /= n;
  }
  return col;
}

core::Checkpoint to_checkpoint(const Sae& sae) {
  core::Checkpoint ckpt;
  ckpt.header = {{"kind", "sae"},
                 {"site", sae.site.to_string()},
                 {"activation", activation_name(sae.activation)},
                 {"topk", sae.topk}};
  ckpt.tensors = {{"w_enc", sae.w_enc}, {"b_enc", sae.b_enc}, {"w_dec", sae.w_dec}, {"b_dec", sae.b_dec}};
  return ckpt;
}

Sae sae_from_checkpoint(const core::Checkpoint& ckpt) {
  require(ckpt.header.value("kind", std::string()) == "sae", ErrorCode::CorruptFile,
          "checkpoint does not hold an SAE");
  Sae sae;
  try {
    sae.site = Site::parse(ckpt.header.at("site").get<std::string>());
    sae.activation = parse_activation(ckpt.header.at("activation").get<std::string>());
    sae.topk = ckpt.header.at("topk").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptFile, std::string("bad SAE header: ") + e.what());
  }
  sae.w_enc = ckpt.tensor("w_enc");
  sae.b_enc = ckpt.tensor("b_enc");
  sae.w_dec = ckpt.tensor("w_dec");
  sae.b_dec = ckpt.tensor("b_dec");
  const bool ok = sae.w_enc.rank() == 2 && sae.w_dec.rank() == 2 && sae.w_dec.rows() == sae.d() &&
                  sae.w_dec.cols() == sae.k() && sae.b_enc.size() == sae.k() && sae.b_dec.size() == sae.d();
  require(ok, ErrorCode::CorruptFile, "SAE tensors have inconsistent shapes");
  return sae;
}

double FeatureScan::global_max(std::size_t feature) const {
  double m = 0.0;
  for (std::size_t s = 0; s < seq_max.cols(); ++s) {
    m = std::max(m, seq_max(feature, s));
  }
  return m;
}

std::vector<std::size_t> FeatureScan::live_features() const {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < k; ++f) {
    if (global_max(f) > 0.0) {
      out.push_back(f);
    }
  }
  return out;
}

namespace {

// Codes for every position of one sequence: T x k.
Tensor encode_sequence(const Sae& sae, const model::Transformer& model, const model::Sequence& seq) {
  model::ForwardOptions opts;
  opts.capture = {sae.site};
  return encode(sae, core::transpose(model::forward(model, seq, opts).trace.at(sae.site)));
}

}  // namespace

FeatureScan scan_features(const Sae& sae, const model::Transformer& model, const model::Corpus& corpus) {
  require(!corpus.empty(), ErrorCode::EmptyCorpus, "cannot scan an empty corpus");
  require(sae.d() == model.config.d_model, ErrorCode::ShapeMismatch, "SAE width does not match the model");
  const std::size_t k = sae.k();
  const std::size_t V = model.config.vocab_size;
  FeatureScan scan;
  scan.site = sae.site;
  scan.k = k;
  scan.vocab_size = V;
  scan.token_max = Tensor(Shape{k, V});
  scan.seq_max = Tensor(Shape{k, corpus.size()});
  scan.seq_argmax.assign(k, std::vector<std::size_t>(corpus.size(), 0));

  const auto codes =
      core::parallel_map(corpus.size(), [&](std::size_t s) { return encode_sequence(sae, model, corpus[s]); });
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const Tensor& f = codes[s];
    for (std::size_t p = 0; p < f.rows(); ++p) {
      const TokenId tok = corpus[s][p];
      for (std::size_t i = 0; i < k; ++i) {
        const double a = f(p, i);
        if (a > scan.token_max(i, tok)) {
          scan.token_max(i, tok) = a;
        }
        if (a > scan.seq_max(i, s)) {
          scan.seq_max(i, s) = a;
          scan.seq_argmax[i][s] = p;
        }
      }
    }
  }
  return scan;
}

TokenSet top_activating_tokens(const FeatureScan& scan, std::size_t feature, double ratio) {
  require(feature < scan.k, ErrorCode::ShapeMismatch, "feature outside the scanned SAE");
  require(ratio > 0.0 && ratio <= 1.0, ErrorCode::InvalidConfig, "ratio must lie in (0, 1]");
  const double gmax = scan.global_max(feature);
  if (gmax <= 0.0) {
    fail(ErrorCode::NeverFires, "feature " + std::to_string(feature) + " never fires on the corpus");
  }
  TokenSet out{feature, {}, ratio};
  for (std::size_t t = 0; t < scan.vocab_size; ++t) {
    if (scan.token_max(feature, t) >= ratio * gmax) {
      out.tokens.push_back(static_cast<TokenId>(t));
    }
  }
  return out;
}

std::vector<TokenId> ActivationWindow::tokens() const {
  std::vector<TokenId> out;
  for (const auto& e : entries) {
    out.push_back(e.token);
  }
  return out;
}

std::vector<double> ActivationWindow::activations() const {
  std::vector<double> out;
  for (const auto& e : entries) {
    out.push_back(e.activation);
  }
  return out;
}

FeatureActivationRecord activation_records(const Sae& sae, const model::Transformer& model,
                                           const model::Corpus& corpus, const FeatureScan& scan,
                                           std::size_t feature, std::size_t n, std::size_t window) {
  require(n >= 1 && window >= 1, ErrorCode::InvalidConfig, "record count and window must be >= 1");
  require(feature < scan.k, ErrorCode::ShapeMismatch, "feature outside the scanned SAE");
  require(scan.seq_max.cols() == corpus.size(), ErrorCode::ShapeMismatch, "scan was built on a different corpus");
  std::vector<std::size_t> firing;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    if (scan.seq_max(feature, s) > 0.0) {
      firing.push_back(s);
    }
  }
  if (firing.empty()) {
    fail(ErrorCode::NeverFires, "feature " + std::to_string(feature) + " never fires on the corpus");
  }
  std::stable_sort(firing.begin(), firing.end(), [&](std::size_t a, std::size_t b) {
    return scan.seq_max(feature, a) > scan.seq_max(feature, b);
  });
  firing.resize(std::min(n, firing.size()));

  FeatureActivationRecord rec{feature, {}};
  for (std::size_t s : firing) {
    const Tensor f = encode_sequence(sae, model, corpus[s]);
    const std::size_t T = corpus[s].size();
    const std::size_t peak = scan.seq_argmax[feature][s];
    const std::size_t len = std::min(window, T);
    std::size_t start = peak >= len / 2 ? peak - len / 2 : 0;
    start = std::min(start, T - len);
    ActivationWindow w;
    for (std::size_t p = start; p < start + len; ++p) {
      w.entries.push_back(WindowEntry{s, p, corpus[s][p], f(p, feature)});
    }
    w.peak_offset = peak - start;
    w.peak = w.entries[w.peak_offset].activation;
    rec.windows.push_back(std::move(w));
  }
  return rec;
}

const std::vector<double>& GlossTable::at(std::size_t feature) const {
  auto it = vectors.find(feature);
  if (it == vectors.end()) {
    fail(ErrorCode::MissingGloss, "no gloss vector for feature " + std::to_string(feature));
  }
  return it->second;
}

GlossTable read_glosses(const std::string& jsonl, const Site& site) {
  GlossTable table{site, {}};
  std::istringstream in(jsonl);
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("feature_id") || !j.contains("site") ||
        !j.contains("vector")) {
      fail(ErrorCode::ConfigError, "malformed gloss line " + std::to_string(lineno));
    }
    if (Site::parse(j.at("site").get<std::string>()) != site) {
      continue;
    }
    auto v = j.at("vector").get<std::vector<double>>();
    if (v.empty() || (width != 0 && v.size() != width)) {
      fail(ErrorCode::ConfigError, "gloss vector width differs on line " + std::to_string(lineno));
    }
    width = v.size();
    table.vectors[j.at("feature_id").get<std::size_t>()] = std::move(v);
  }
  return table;
}

std::string write_glosses(const GlossTable& table) {
  std::string out;
  for (const auto& [id, v] : table.vectors) {
    out += nlohmann::json{{"feature_id", id}, {"site", table.site.to_string()}, {"vector", v}}.dump();
    out += '\n';
  }
  return out;
}

GlossTable synthesize_glosses(const FeatureScan& scan, const model::CorpusSpec& spec,
                              const std::vector<std::size_t>& features) {
  const auto groups = model::group_of_tokens(spec);
  const std::size_t dims = spec.groups.size() + 1;
  GlossTable table{scan.site, {}};
  for (std::size_t f : features) {
    const double gmax = scan.global_max(f);
    if (gmax <= 0.0) {
      continue;
    }
    std::vector<double> v(dims, 0.0);
    for (std::size_t t = 0; t < scan.vocab_size; ++t) {
      const double a = scan.token_max(f, t);
      if (a >= 0.5 * gmax) {
        const int g = t < groups.size() ? groups[t] : -1;
        v[g >= 0 ? static_cast<std::size_t>(g) : dims - 1] += a / gmax;
      }
    }
    table.vectors[f] = std::move(v);
  }
  return table;
}

}  // namespace polyprobe::sae
