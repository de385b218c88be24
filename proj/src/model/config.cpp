#include "polyprobe/model/config.hpp"

#include "polyprobe/core/error.hpp"

namespace polyprobe::model {

void ModelConfig::validate() const {
  require(vocab_size >= 1 && d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_mlp >= 1 && context_length >= 1,
          ErrorCode::InvalidConfig, "all model dimensions must be >= 1");
  if (d_model % n_heads != 0) {
    fail(ErrorCode::InvalidConfig, "d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  require(init_std > 0.0 && ln_eps > 0.0, ErrorCode::InvalidConfig, "init_std and ln_eps must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_mlp", c.d_mlp},         {"context_length", c.context_length},
                     {"seed", c.seed},             {"init_std", c.init_std},   {"ln_eps", c.ln_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_mlp = j.value("d_mlp", 4 * c.d_model);
  c.context_length = j.value("context_length", d.context_length);
  c.seed = j.value("seed", d.seed);
  c.init_std = j.value("init_std", d.init_std);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 2 * d                 // ln1
                                + 4 * (d * d + d)     // q, k, v, o
                                + 2 * d               // ln2
                                + (d * c.d_mlp + c.d_mlp) + (c.d_mlp * d + d);
  return c.vocab_size * d + c.context_length * d + c.n_layers * per_layer + 2 * d + d * c.vocab_size + c.vocab_size;
}

std::string site_kind_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::ResidPre: return "resid_pre";
    case SiteKind::AttnOut: return "attn_out";
    case SiteKind::MlpOut: return "mlp_out";
    case SiteKind::ResidPost: return "resid_post";
  }
  return "?";
}

std::string Site::to_string() const { return "L" + std::to_string(layer) + "." + site_kind_name(kind); }

Site Site::parse(const std::string& text) {
  const auto dot = text.find('.');
  if (!(text.size() > 2 && text[0] == 'L' && dot != std::string::npos && dot > 1)) {
    fail(ErrorCode::BadSite, "malformed site '" + text + "'");
  }
  Site s;
  try {
    std::size_t used = 0;
    s.layer = std::stoul(text.substr(1, dot - 1), &used);
    if (used != dot - 1) {
      fail(ErrorCode::BadSite, "malformed layer in site '" + text + "'");
    }
  } catch (const std::logic_error&) {
    fail(ErrorCode::BadSite, "malformed layer in site '" + text + "'");
  }
  const std::string kind = text.substr(dot + 1);
  if (kind == "resid_pre") {
    s.kind = SiteKind::ResidPre;
  } else if (kind == "attn_out") {
    s.kind = SiteKind::AttnOut;
  } else if (kind == "mlp_out") {
    s.kind = SiteKind::MlpOut;
  } else if (kind == "resid_post") {
    s.kind = SiteKind::ResidPost;
  } else {
    fail(ErrorCode::BadSite, "unknown site kind '" + kind + "'");
  }
  return s;
}

void validate_site(const ModelConfig& config, const Site& site) {
  if (site.layer >= config.n_layers) {
    fail(ErrorCode::BadSite, "site " + site.to_string() + " outside a " + std::to_string(config.n_layers) + "-layer model");
  }
}

std::vector<Site> all_sites(const ModelConfig& config) {
  std::vector<Site> out;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (SiteKind k : {SiteKind::ResidPre, SiteKind::AttnOut, SiteKind::MlpOut, SiteKind::ResidPost}) {
      out.push_back(Site{l, k});
    }
  }
  return out;
}

}  // namespace polyprobe::model
