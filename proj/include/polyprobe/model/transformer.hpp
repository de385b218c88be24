#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "polyprobe/core/autodiff.hpp"
#include "polyprobe/core/tensor.hpp"
#include "polyprobe/model/config.hpp"

namespace polyprobe::model {

using core::Tensor;

template <class T>
struct LayerParams {
  T ln1_gain, ln1_bias;
  T w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  T ln2_gain, ln2_bias;
  T w_in, b_in, w_out, b_out;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1.gain", self.ln1_gain);
    f(prefix + "ln1.bias", self.ln1_bias);
    f(prefix + "attn.w_q", self.w_q);
    f(prefix + "attn.b_q", self.b_q);
    f(prefix + "attn.w_k", self.w_k);
    f(prefix + "attn.b_k", self.b_k);
    f(prefix + "attn.w_v", self.w_v);
    f(prefix + "attn.b_v", self.b_v);
    f(prefix + "attn.w_o", self.w_o);
    f(prefix + "attn.b_o", self.b_o);
    f(prefix + "ln2.gain", self.ln2_gain);
    f(prefix + "ln2.bias", self.ln2_bias);
    f(prefix + "mlp.w_in", self.w_in);
    f(prefix + "mlp.b_in", self.b_in);
    f(prefix + "mlp.w_out", self.w_out);
    f(prefix + "mlp.b_out", self.b_out);
  }
};

// Parameters of the pre-layernorm decoder. Weight matrices act on row
// vectors: y = x W + b, with x of width d_model.
template <class T>
struct ParamSet {
  T tok_embed;  // vocab x d
  T pos_embed;  // context x d
  std::vector<LayerParams<T>> layers;
  T lnf_gain, lnf_bias;
  T w_unembed;  // d x vocab
  T b_unembed;

  // Calls f(name, member) for every parameter in a fixed canonical order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("tok_embed"), self.tok_embed);
    f(std::string("pos_embed"), self.pos_embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      LayerParams<T>::visit(self.layers[l], "layer" + std::to_string(l) + ".", f);
    }
    f(std::string("lnf.gain"), self.lnf_gain);
    f(std::string("lnf.bias"), self.lnf_bias);
    f(std::string("unembed.w"), self.w_unembed);
    f(std::string("unembed.b"), self.b_unembed);
  }
};

struct Transformer {
  ModelConfig config;
  ParamSet<Tensor> params;
};

// Seeded Gaussian init (std = config.init_std) for embeddings and weights;
// biases start at 0 and layer-norm gains at 1.
Transformer init_model(const ModelConfig& config);

std::size_t count_parameters(const Transformer& model);

enum class EditScope { FinalPosition, AllPositions };

struct AddVector {
  std::vector<double> direction;
  double alpha = 0.0;
};

struct ScaleNeuron {
  std::size_t index = 0;
  double scale = 1.0;
};

inline constexpr double kMaxNeuronScale = 20.0;

struct ActivationEdit {
  Site site;
  std::variant<AddVector, ScaleNeuron> mode;
  EditScope scope = EditScope::FinalPosition;

  static ActivationEdit add_vector(Site site, std::vector<double> direction, double alpha,
                                   EditScope scope = EditScope::FinalPosition);
  static ActivationEdit scale_neuron(Site site, std::size_t index, double scale,
                                     EditScope scope = EditScope::FinalPosition);
};

// Next-token probabilities at the final position.
struct Distribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t t) const { return probs[t]; }
};

// Captured activations, each stored as d_model x T (one column per position).
struct ActivationTrace {
  std::map<Site, Tensor> activations;

  const Tensor& at(const Site& site) const;
  bool contains(const Site& site) const { return activations.count(site) > 0; }
};

// Layer-norm scales used by the frozen linearization: each entry replaces the
// per-token standard deviation of that norm with a fixed corpus mean.
struct FrozenNorms {
  std::vector<double> ln1;
  std::vector<double> ln2;
  double lnf = 1.0;
};

void to_json(nlohmann::json& j, const FrozenNorms& n);
void from_json(const nlohmann::json& j, FrozenNorms& n);

struct ForwardOptions {
  std::vector<Site> capture;
  std::vector<ActivationEdit> edits;
  // When set, every layer norm runs with the frozen scale (affine mode).
  const FrozenNorms* frozen = nullptr;
};

struct ForwardResult {
  Distribution next_token;
  std::vector<double> final_logits;
  ActivationTrace trace;
};

// Pure function of (model, tokens, options). Throws ContextOverflow, BadSite,
// BadNeuron, ShapeMismatch.
ForwardResult forward(const Transformer& model, std::span<const TokenId> tokens, const ForwardOptions& options = {});

// Same as forward() but starting from explicit token embedding rows
// (T x d_model); positional embeddings are still added.
ForwardResult forward_embeddings(const Transformer& model, const Tensor& token_embeddings,
                                 const ForwardOptions& options = {});

Tensor embed_tokens(const Transformer& model, std::span<const TokenId> tokens);

// Gradient of <a_{site}[position], probe> w.r.t. the embedding row of the
// token at `position`. Throws ZeroProbe for a zero probe vector.
std::vector<double> grad_wrt_embedding(const Transformer& model, std::span<const TokenId> tokens, const Site& site,
                                       std::size_t position, std::span<const double> probe,
                                       const FrozenNorms* frozen = nullptr);

// Mean per-token standard deviation entering each layer norm over `sequences`.
FrozenNorms estimate_frozen_norms(const Transformer& model, const std::vector<std::vector<TokenId>>& sequences);

// Graph construction shared by inference and training.
struct GraphOutputs {
  core::Var logits;  // T x vocab
  std::map<Site, core::Var> sites;  // T x d_model, post-edit
};

GraphOutputs build_graph(core::Tape& tape, const ModelConfig& config, const ParamSet<core::Var>& params,
                         core::Var token_embeddings, const ForwardOptions& options);

ParamSet<core::Var> bind_params(core::Tape& tape, const ParamSet<Tensor>& params, bool trainable);

Distribution softmax_distribution(std::span<const double> logits);

}  // namespace polyprobe::model
