#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace polyprobe::model {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 128;
  std::size_t context_length = 64;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  // Throws InvalidConfig.
  void validate() const;
  std::size_t d_head() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Closed-form parameter count of the architecture in transformer.hpp.
std::size_t parameter_count(const ModelConfig& c);

enum class SiteKind : std::uint8_t { ResidPre = 0, AttnOut = 1, MlpOut = 2, ResidPost = 3 };

// A hookable activation inside the network: one of the four per-layer
// sub-module outputs, named "L<layer>.<kind>".
struct Site {
  std::size_t layer = 0;
  SiteKind kind = SiteKind::ResidPre;

  // Position in forward evaluation order.
  std::size_t ordinal() const { return layer * 4 + static_cast<std::size_t>(kind); }
  std::string to_string() const;
  static Site parse(const std::string& text);

  auto operator<=>(const Site& other) const { return ordinal() <=> other.ordinal(); }
  bool operator==(const Site& other) const { return ordinal() == other.ordinal(); }
};

std::string site_kind_name(SiteKind kind);
// Throws BadSite when the layer is out of range for the config.
void validate_site(const ModelConfig& config, const Site& site);
std::vector<Site> all_sites(const ModelConfig& config);

}  // namespace polyprobe::model
