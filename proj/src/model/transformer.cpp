#include "polyprobe/model/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "polyprobe/core/error.hpp"
#include "polyprobe/core/rng.hpp"

namespace polyprobe::model {

using core::Shape;
using core::Tape;
using core::Var;
namespace ops = core::ops;

namespace {

Tensor gaussian(core::Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) {
    x = rng.normal(0.0, stddev);
  }
  return t;
}

}  // namespace

Transformer init_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  const double sd = config.init_std;
  core::Rng root(config.seed);
  core::Rng rng = root.split("init_model");

  Transformer m{config, {}};
  auto& p = m.params;
  p.tok_embed = gaussian(rng, {config.vocab_size, d}, sd);
  p.pos_embed = gaussian(rng, {config.context_length, d}, sd);
  p.layers.resize(config.n_layers);
  for (auto& layer : p.layers) {
    layer.ln1_gain = Tensor::filled({d}, 1.0);
    layer.ln1_bias = Tensor(Shape{d});
    layer.w_q = gaussian(rng, {d, d}, sd);
    layer.b_q = Tensor(Shape{d});
    layer.w_k = gaussian(rng, {d, d}, sd);
    layer.b_k = Tensor(Shape{d});
    layer.w_v = gaussian(rng, {d, d}, sd);
    layer.b_v = Tensor(Shape{d});
    layer.w_o = gaussian(rng, {d, d}, sd);
    layer.b_o = Tensor(Shape{d});
    layer.ln2_gain = Tensor::filled({d}, 1.0);
    layer.ln2_bias = Tensor(Shape{d});
    layer.w_in = gaussian(rng, {d, config.d_mlp}, sd);
    layer.b_in = Tensor(Shape{config.d_mlp});
    layer.w_out = gaussian(rng, {config.d_mlp, d}, sd);
    layer.b_out = Tensor(Shape{d});
  }
  p.lnf_gain = Tensor::filled({d}, 1.0);
  p.lnf_bias = Tensor(Shape{d});
  p.w_unembed = gaussian(rng, {d, config.vocab_size}, sd);
  p.b_unembed = Tensor(Shape{config.vocab_size});
  return m;
}

std::size_t count_parameters(const Transformer& model) {
  std::size_t n = 0;
  model.params.visit([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ActivationEdit ActivationEdit::add_vector(Site site, std::vector<double> direction, double alpha, EditScope scope) {
  return ActivationEdit{site, AddVector{std::move(direction), alpha}, scope};
}

ActivationEdit ActivationEdit::scale_neuron(Site site, std::size_t index, double scale, EditScope scope) {
  return ActivationEdit{site, ScaleNeuron{index, scale}, scope};
}

const Tensor& ActivationTrace::at(const Site& site) const {
  auto it = activations.find(site);
  if (it == activations.end()) {
    fail(ErrorCode::BadSite, "site " + site.to_string() + " was not captured");
  }
  return it->second;
}

void to_json(nlohmann::json& j, const FrozenNorms& n) {
  j = nlohmann::json{{"ln1", n.ln1}, {"ln2", n.ln2}, {"lnf", n.lnf}};
}

void from_json(const nlohmann::json& j, FrozenNorms& n) {
  n.ln1 = j.at("ln1").get<std::vector<double>>();
  n.ln2 = j.at("ln2").get<std::vector<double>>();
  n.lnf = j.at("lnf").get<double>();
}

ParamSet<Var> bind_params(Tape& tape, const ParamSet<Tensor>& params, bool trainable) {
  std::vector<Var> vars;
  params.visit([&](const std::string&, const Tensor& t) {
    vars.push_back(trainable ? tape.input_ref(t) : tape.constant_ref(t));
  });
  ParamSet<Var> out;
  out.layers.resize(params.layers.size());
  std::size_t i = 0;
  out.visit([&](const std::string&, Var& v) { v = vars[i++]; });
  return out;
}

namespace {

void validate_edit(const ModelConfig& config, const ActivationEdit& edit) {
  validate_site(config, edit.site);
  if (const auto* add = std::get_if<AddVector>(&edit.mode)) {
    require(add->direction.size() == config.d_model, ErrorCode::ShapeMismatch,
            "add_vector direction must have length d_model");
    require(std::isfinite(add->alpha), ErrorCode::NonFinite, "add_vector alpha is not finite");
  } else {
    const auto& sc = std::get<ScaleNeuron>(edit.mode);
    if (sc.index >= config.d_model) {
      fail(ErrorCode::BadNeuron, "neuron " + std::to_string(sc.index) + " outside d_model " + std::to_string(config.d_model));
    }
    require(sc.scale >= 0.0 && sc.scale <= kMaxNeuronScale, ErrorCode::InvalidConfig,
            "neuron scale must lie in [0, 20]");
  }
}

Var apply_edits(Tape& tape, Var x, const Site& site, const ForwardOptions& options) {
  for (const auto& edit : options.edits) {
    if (edit.site != site) {
      continue;
    }
    const Tensor& cur = tape.value(x);
    const std::size_t T = cur.rows();
    const std::size_t d = cur.cols();
    const std::size_t first = edit.scope == EditScope::FinalPosition ? T - 1 : 0;
    if (const auto* add = std::get_if<AddVector>(&edit.mode)) {
      Tensor delta(Shape{T, d});
      for (std::size_t r = first; r < T; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          delta(r, c) = add->alpha * add->direction[c];
        }
      }
      x = ops::add(tape, x, tape.constant(std::move(delta)));
    } else {
      const auto& sc = std::get<ScaleNeuron>(edit.mode);
      Tensor mask = Tensor::filled(Shape{T, d}, 1.0);
      for (std::size_t r = first; r < T; ++r) {
        mask(r, sc.index) = sc.scale;
      }
      x = ops::mul(tape, x, tape.constant(std::move(mask)));
    }
  }
  return x;
}

Var linear(Tape& tape, Var x, Var w, Var b) { return ops::add_row_bias(tape, ops::matmul(tape, x, w), b); }

std::optional<double> frozen_at(const std::vector<double>* scales, std::size_t layer) {
  if (!scales) {
    return std::nullopt;
  }
  require(layer < scales->size(), ErrorCode::ShapeMismatch, "frozen norms do not cover every layer");
  return (*scales)[layer];
}

}  // namespace

GraphOutputs build_graph(Tape& tape, const ModelConfig& config, const ParamSet<Var>& params, Var token_embeddings,
                         const ForwardOptions& options) {
  const Tensor& emb = tape.value(token_embeddings);
  core::require_rank(emb, 2, "token embeddings");
  const std::size_t T = emb.rows();
  require(T >= 1, ErrorCode::ShapeMismatch, "empty input");
  if (T > config.context_length) {
    fail(ErrorCode::ContextOverflow, "input of length " + std::to_string(T) + " exceeds context " + std::to_string(config.context_length));
  }
  require(emb.cols() == config.d_model, ErrorCode::ShapeMismatch, "embedding width must equal d_model");
  for (const auto& site : options.capture) {
    validate_site(config, site);
  }
  for (const auto& edit : options.edits) {
    validate_edit(config, edit);
  }
  const FrozenNorms* frozen = options.frozen;
  if (frozen) {
    require(frozen->ln1.size() == config.n_layers && frozen->ln2.size() == config.n_layers, ErrorCode::ShapeMismatch,
            "frozen norms do not match layer count");
  }

  GraphOutputs out;
  auto hook = [&](Var x, const Site& site) {
    x = apply_edits(tape, x, site, options);
    if (std::find(options.capture.begin(), options.capture.end(), site) != options.capture.end()) {
      out.sites[site] = x;
    }
    return x;
  };

  std::vector<std::size_t> positions(T);
  for (std::size_t i = 0; i < T; ++i) {
    positions[i] = i;
  }
  Var x = ops::add(tape, token_embeddings, ops::gather_rows(tape, params.pos_embed, positions));

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto& lp = params.layers[l];
    x = hook(x, Site{l, SiteKind::ResidPre});

    Var h = ops::layer_norm(tape, x, lp.ln1_gain, lp.ln1_bias, config.ln_eps,
                            frozen_at(frozen ? &frozen->ln1 : nullptr, l));
    Var q = linear(tape, h, lp.w_q, lp.b_q);
    Var k = linear(tape, h, lp.w_k, lp.b_k);
    Var v = linear(tape, h, lp.w_v, lp.b_v);
    Var attn = linear(tape, ops::causal_attention(tape, q, k, v, config.n_heads), lp.w_o, lp.b_o);
    attn = hook(attn, Site{l, SiteKind::AttnOut});
    x = ops::add(tape, x, attn);

    Var h2 = ops::layer_norm(tape, x, lp.ln2_gain, lp.ln2_bias, config.ln_eps,
                             frozen_at(frozen ? &frozen->ln2 : nullptr, l));
    Var mlp = linear(tape, ops::gelu(tape, linear(tape, h2, lp.w_in, lp.b_in)), lp.w_out, lp.b_out);
    mlp = hook(mlp, Site{l, SiteKind::MlpOut});
    x = ops::add(tape, x, mlp);
    x = hook(x, Site{l, SiteKind::ResidPost});
  }

  std::optional<double> lnf_scale;
  if (frozen) {
    lnf_scale = frozen->lnf;
  }
  Var hf = ops::layer_norm(tape, x, params.lnf_gain, params.lnf_bias, config.ln_eps, lnf_scale);
  out.logits = linear(tape, hf, params.w_unembed, params.b_unembed);
  return out;
}

Distribution softmax_distribution(std::span<const double> logits) {
  Distribution d;
  d.probs.resize(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    d.probs[i] = std::exp(logits[i] - mx);
    z += d.probs[i];
  }
  for (double& p : d.probs) {
    p /= z;
  }
  return d;
}

Tensor embed_tokens(const Transformer& model, std::span<const TokenId> tokens) {
  const auto& cfg = model.config;
  require(!tokens.empty(), ErrorCode::ShapeMismatch, "empty token sequence");
  if (tokens.size() > cfg.context_length) {
    fail(ErrorCode::ContextOverflow, "input of length " + std::to_string(tokens.size()) + " exceeds context " + std::to_string(cfg.context_length));
  }
  Tensor emb(Shape{tokens.size(), cfg.d_model});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] < cfg.vocab_size, ErrorCode::ShapeMismatch, "token id outside vocabulary");
    auto src = model.params.tok_embed.row(tokens[i]);
    std::copy(src.begin(), src.end(), emb.row(i).begin());
  }
  return emb;
}

ForwardResult forward_embeddings(const Transformer& model, const Tensor& token_embeddings,
                                 const ForwardOptions& options) {
  Tape tape;
  const ParamSet<Var> params = bind_params(tape, model.params, false);
  const Var emb = tape.constant_ref(token_embeddings);
  const GraphOutputs g = build_graph(tape, model.config, params, emb, options);

  const Tensor& logits = tape.value(g.logits);
  const std::size_t T = logits.rows();
  ForwardResult result;
  auto last = logits.row(T - 1);
  result.final_logits.assign(last.begin(), last.end());
  require(std::all_of(last.begin(), last.end(), [](double v) { return std::isfinite(v); }), ErrorCode::NonFinite,
          "forward produced non-finite logits");
  result.next_token = softmax_distribution(last);
  for (const auto& [site, var] : g.sites) {
    result.trace.activations.emplace(site, core::transpose(tape.value(var)));
  }
  return result;
}

ForwardResult forward(const Transformer& model, std::span<const TokenId> tokens, const ForwardOptions& options) {
  return forward_embeddings(model, embed_tokens(model, tokens), options);
}

std::vector<double> grad_wrt_embedding(const Transformer& model, std::span<const TokenId> tokens, const Site& site,
                                       std::size_t position, std::span<const double> probe,
                                       const FrozenNorms* frozen) {
  const auto& cfg = model.config;
  validate_site(cfg, site);
  require(position < tokens.size(), ErrorCode::ShapeMismatch, "probe position outside the token sequence");
  require(probe.size() == cfg.d_model, ErrorCode::ShapeMismatch, "probe vector must have length d_model");
  require(core::norm(probe) > 0.0, ErrorCode::ZeroProbe, "probe vector is zero");

  Tape tape;
  const ParamSet<Var> params = bind_params(tape, model.params, false);
  const Var emb = tape.input(embed_tokens(model, tokens));
  ForwardOptions opts;
  opts.capture = {site};
  opts.frozen = frozen;
  const GraphOutputs g = build_graph(tape, cfg, params, emb, opts);
  const Var act = ops::row(tape, g.sites.at(site), position);
  const Var v = tape.constant(Tensor::vector(std::vector<double>(probe.begin(), probe.end())));
  const Var loss = ops::dot(tape, act, v);
  const core::Gradients grads = core::backprop(tape, loss);
  const Tensor& ge = grads.at(emb);
  auto r = ge.row(position);
  return std::vector<double>(r.begin(), r.end());
}

FrozenNorms estimate_frozen_norms(const Transformer& model, const std::vector<std::vector<TokenId>>& sequences) {
  const auto& cfg = model.config;
  require(!sequences.empty(), ErrorCode::EmptyCorpus, "no sequences to estimate layer-norm scales");
  std::vector<Site> capture;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    capture.push_back(Site{l, SiteKind::ResidPre});
  }
  // The ln2 input is resid_pre + attn_out; capture both parts to rebuild it.
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    capture.push_back(Site{l, SiteKind::AttnOut});
  }
  capture.push_back(Site{cfg.n_layers - 1, SiteKind::ResidPost});

  auto row_sigma = [&](const Tensor& dxT, std::size_t col) {
    const std::size_t d = dxT.rows();
    double mean = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      mean += dxT(r, col);
    }
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      var += (dxT(r, col) - mean) * (dxT(r, col) - mean);
    }
    return std::sqrt(var / static_cast<double>(d) + cfg.ln_eps);
  };

  FrozenNorms out;
  out.ln1.assign(cfg.n_layers, 0.0);
  out.ln2.assign(cfg.n_layers, 0.0);
  out.lnf = 0.0;
  std::size_t count = 0;
  ForwardOptions opts;
  opts.capture = capture;
  for (const auto& seq : sequences) {
    const ForwardResult r = forward(model, seq, opts);
    const std::size_t T = seq.size();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const Tensor& pre = r.trace.at(Site{l, SiteKind::ResidPre});
      const Tensor mid = core::add(pre, r.trace.at(Site{l, SiteKind::AttnOut}));
      for (std::size_t t = 0; t < T; ++t) {
        out.ln1[l] += row_sigma(pre, t);
        out.ln2[l] += row_sigma(mid, t);
      }
    }
    const Tensor& fin = r.trace.at(Site{cfg.n_layers - 1, SiteKind::ResidPost});
    for (std::size_t t = 0; t < T; ++t) {
      out.lnf += row_sigma(fin, t);
    }
    count += T;
  }
  const double n = static_cast<double>(count);
  for (auto& v : out.ln1) {
    v /= n;
  }
  for (auto& v : out.ln2) {
    v /= n;
  }
  out.lnf /= n;
  return out;
}

}  // namespace polyprobe::model
