#include "polyprobe/interference/interference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "polyprobe/core/error.hpp"
#include "polyprobe/core/linalg.hpp"
#include "polyprobe/core/rng.hpp"

namespace polyprobe::interference {

using core::Shape;

std::size_t InterferenceMatrix::index_of(std::size_t feature) const {
  auto it = std::lower_bound(features.begin(), features.end(), feature);
  if (it == features.end() || *it != feature) {
    fail(ErrorCode::ShapeMismatch, "feature " + std::to_string(feature) + " is not in the interference matrix");
  }
  return static_cast<std::size_t>(it - features.begin());
}

bool InterferenceMatrix::contains(std::size_t feature) const {
  return std::binary_search(features.begin(), features.end(), feature);
}

InterferenceMatrix interference_matrix(const sae::Sae& sae, const std::vector<std::size_t>& live) {
  std::vector<std::size_t> ids = live;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 2) {
    fail(ErrorCode::TooFewFeatures, "interference needs at least two live features, got " + std::to_string(ids.size()));
  }
  std::vector<std::vector<double>> dirs;
  dirs.reserve(ids.size());
  for (std::size_t f : ids) {
    dirs.push_back(sae::feature_direction(sae, f));
  }
  const std::size_t n = ids.size();
  InterferenceMatrix m{sae.site, ids, Tensor(Shape{n, n})};
  for (std::size_t a = 0; a < n; ++a) {
    m.values(a, a) = 1.0;
    for (std::size_t b = a + 1; b < n; ++b) {
      const double c = core::dot(dirs[a], dirs[b]);
      m.values(a, b) = c;
      m.values(b, a) = c;
    }
  }
  return m;
}

InterferenceMatrix interference_matrix(const sae::Sae& sae) {
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < sae.k(); ++i) {
    double sq = 0.0;
    for (std::size_t r = 0; r < sae.d(); ++r) {
      sq += sae.w_dec(r, i) * sae.w_dec(r, i);
    }
    if (std::sqrt(sq) >= sae::kDeadNorm) {
      live.push_back(i);
    }
  }
  return interference_matrix(sae, live);
}

core::Checkpoint to_checkpoint(const InterferenceMatrix& m) {
  core::Checkpoint ckpt;
  ckpt.header = {{"kind", "interference"}, {"site", m.site.to_string()}, {"features", m.features}};
  ckpt.tensors = {{"values", m.values}};
  return ckpt;
}

InterferenceMatrix interference_from_checkpoint(const core::Checkpoint& ckpt) {
  require(ckpt.header.value("kind", std::string()) == "interference", ErrorCode::CorruptFile,
          "checkpoint does not hold an interference matrix");
  InterferenceMatrix m;
  try {
    m.site = Site::parse(ckpt.header.at("site").get<std::string>());
    m.features = ckpt.header.at("features").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptFile, std::string("bad interference header: ") + e.what());
  }
  m.values = ckpt.tensor("values");
  const std::size_t n = m.features.size();
  require(m.values.shape() == Shape{n, n} && std::is_sorted(m.features.begin(), m.features.end()),
          ErrorCode::CorruptFile, "interference matrix does not match its feature list");
  return m;
}

double semantic_relatedness(const sae::GlossTable& glosses, std::size_t i, std::size_t j) {
  return core::cosine_similarity(glosses.at(i), glosses.at(j));
}

std::optional<std::size_t> FeatureCluster::cluster_of(std::size_t feature) const {
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    if (std::binary_search(clusters[c].begin(), clusters[c].end(), feature)) {
      return c;
    }
  }
  return std::nullopt;
}

void to_json(nlohmann::json& j, const FeatureCluster& c) {
  j = nlohmann::json{{"cutoff", c.cutoff}, {"linkage", c.linkage}, {"clusters", c.clusters}};
}

void from_json(const nlohmann::json& j, FeatureCluster& c) {
  c.cutoff = j.at("cutoff").get<double>();
  c.linkage = j.value("linkage", std::string("average"));
  c.clusters = j.at("clusters").get<std::vector<std::vector<std::size_t>>>();
}

FeatureCluster agglomerative_cluster(const std::vector<std::vector<double>>& vectors,
                                     const std::vector<std::size_t>& ids, double cutoff) {
  require(!vectors.empty(), ErrorCode::InvalidConfig, "nothing to cluster");
  require(vectors.size() == ids.size(), ErrorCode::ShapeMismatch, "one id per vector is required");
  require(cutoff > 0.0 && cutoff < 1.0, ErrorCode::InvalidConfig, "cluster cutoff must lie in (0, 1)");
  const std::size_t n = vectors.size();

  // Slot order follows ascending ids so tie-breaking is by feature id.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order[i] = i;
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });

  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double d = 1.0 - core::cosine_similarity(vectors[order[a]], vectors[order[b]]);
      dist[a][b] = d;
      dist[b][a] = d;
    }
  }
  std::vector<std::vector<std::size_t>> members(n);
  for (std::size_t a = 0; a < n; ++a) {
    members[a] = {ids[order[a]]};
  }
  std::vector<bool> active(n, true);
  const double limit = 1.0 - cutoff;

  while (true) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = n;
    std::size_t bb = n;
    for (std::size_t a = 0; a < n; ++a) {
      if (!active[a]) {
        continue;
      }
      for (std::size_t b = a + 1; b < n; ++b) {
        if (active[b] && dist[a][b] < best) {
          best = dist[a][b];
          ba = a;
          bb = b;
        }
      }
    }
    if (ba == n || best > limit) {
      break;
    }
    const double na = static_cast<double>(members[ba].size());
    const double nb = static_cast<double>(members[bb].size());
    for (std::size_t c = 0; c < n; ++c) {
      if (active[c] && c != ba && c != bb) {
        const double d = (na * dist[ba][c] + nb * dist[bb][c]) / (na + nb);
        dist[ba][c] = d;
        dist[c][ba] = d;
      }
    }
    members[ba].insert(members[ba].end(), members[bb].begin(), members[bb].end());
    members[bb].clear();
    active[bb] = false;
  }

  FeatureCluster out;
  out.cutoff = cutoff;
  for (std::size_t a = 0; a < n; ++a) {
    if (active[a]) {
      std::sort(members[a].begin(), members[a].end());
      out.clusters.push_back(std::move(members[a]));
    }
  }
  std::sort(out.clusters.begin(), out.clusters.end(),
            [](const auto& x, const auto& y) { return x.front() < y.front(); });
  return out;
}

FeatureCluster cluster_glosses(const sae::GlossTable& glosses, double cutoff) {
  std::vector<std::vector<double>> vecs;
  std::vector<std::size_t> ids;
  for (const auto& [id, v] : glosses.vectors) {
    ids.push_back(id);
    vecs.push_back(v);
  }
  return agglomerative_cluster(vecs, ids, cutoff);
}

FeatureCluster cluster_interference(const InterferenceMatrix& m, double cutoff) {
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < m.size(); ++r) {
    rows.emplace_back(m.values.row(r).begin(), m.values.row(r).end());
  }
  return agglomerative_cluster(rows, m.features, cutoff);
}

std::string Bin::label() const {
  std::ostringstream os;
  os << '[' << lo << ',' << hi << (closed_hi ? ']' : ')');
  return os.str();
}

std::vector<Bin> default_bins() {
  return {{0.0, 0.1, false}, {0.1, 0.2, false}, {0.2, 0.3, false}, {0.3, 0.4, false}, {0.4, 1.0, true}};
}

void to_json(nlohmann::json& j, const Bin& b) {
  j = nlohmann::json{{"lo", b.lo}, {"hi", b.hi}, {"closed_hi", b.closed_hi}};
}

void from_json(const nlohmann::json& j, Bin& b) {
  b.lo = j.at("lo").get<double>();
  b.hi = j.at("hi").get<double>();
  b.closed_hi = j.value("closed_hi", false);
}

std::vector<BinCandidates> sample_interference_pairs(std::size_t target, const FeatureCluster& clusters,
                                                     const InterferenceMatrix& interference,
                                                     const sae::GlossTable& glosses, const std::vector<Bin>& bins,
                                                     double relevancy_cutoff, std::size_t per_bin,
                                                     std::uint64_t seed) {
  require(!bins.empty(), ErrorCode::InvalidConfig, "at least one interference bin is required");
  const std::size_t ti = interference.index_of(target);
  const auto& tgloss = glosses.at(target);
  const auto own = clusters.cluster_of(target);

  std::vector<BinCandidates> out;
  for (const Bin& b : bins) {
    out.push_back(BinCandidates{b, {}, {}});
  }
  for (std::size_t r = 0; r < interference.size(); ++r) {
    const std::size_t j = interference.features[r];
    if (j == target || !glosses.contains(j)) {
      continue;
    }
    if (own && clusters.cluster_of(j) == own) {
      continue;
    }
    if (core::cosine_similarity(tgloss, glosses.at(j)) >= relevancy_cutoff) {
      continue;
    }
    const double iv = interference.values(ti, r);
    for (auto& bc : out) {
      if (bc.bin.contains(iv)) {
        bc.eligible.push_back(j);
        break;
      }
    }
  }
  core::Rng rng = core::Rng(seed).split("interference_pairs").split(target);
  for (std::size_t b = 0; b < out.size(); ++b) {
    std::vector<std::size_t> pool = out[b].eligible;
    core::Rng brng = rng.split(b);
    brng.shuffle(pool);
    pool.resize(std::min(per_bin, pool.size()));
    out[b].sampled = std::move(pool);
  }
  return out;
}

std::vector<NeuronProfile> neuron_polysemanticity(const sae::Sae& sae, const FeatureCluster& clusters,
                                                  double weight_threshold, std::size_t top) {
  const std::size_t d = sae.d();
  std::vector<NeuronProfile> out(d);
  for (std::size_t n = 0; n < d; ++n) {
    out[n].site = sae.site;
    out[n].neuron = n;
  }
  for (std::size_t c = 0; c < clusters.clusters.size(); ++c) {
    const auto& members = clusters.clusters[c];
    if (members.empty()) {
      continue;
    }
    std::vector<std::pair<double, std::size_t>> align(d);
    for (std::size_t n = 0; n < d; ++n) {
      double s = 0.0;
      for (std::size_t f : members) {
        require(f < sae.k(), ErrorCode::ShapeMismatch, "cluster member outside the SAE");
        s += std::abs(sae.w_dec(n, f));
      }
      align[n] = {s / static_cast<double>(members.size()), n};
    }
    std::stable_sort(align.begin(), align.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; r < std::min(top, d); ++r) {
      if (align[r].first > weight_threshold) {
        out[align[r].second].connections.emplace_back(c, align[r].first);
      }
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const NeuronProfile& p) {
  nlohmann::json conns = nlohmann::json::array();
  for (const auto& [c, w] : p.connections) {
    conns.push_back({{"cluster", c}, {"alignment", w}});
  }
  j = nlohmann::json{{"site", p.site.to_string()}, {"neuron", p.neuron}, {"degree", p.degree()}, {"clusters", conns}};
}

std::vector<WithinPair> qualifying_pairs(const PairArtifacts& a, const PairThresholds& t) {
  std::vector<WithinPair> out;
  const auto& m = a.interference;
  for (std::size_t r = 0; r < m.size(); ++r) {
    const std::size_t i = m.features[r];
    if (!a.glosses.contains(i)) {
      continue;
    }
    for (std::size_t c = r + 1; c < m.size(); ++c) {
      const std::size_t j = m.features[c];
      const double iv = m.values(r, c);
      if (iv <= t.interference || !a.glosses.contains(j)) {
        continue;
      }
      const double s = semantic_relatedness(a.glosses, i, j);
      if (s < t.semantic) {
        out.push_back(WithinPair{i, j, iv, s});
      }
    }
  }
  return out;
}

std::vector<SharedPair> mine_shared_pairs(const PairArtifacts& a, const PairArtifacts& b, const PairThresholds& t) {
  const auto pa = qualifying_pairs(a, t);
  const auto pb = qualifying_pairs(b, t);
  auto cross = [&](std::size_t fa, std::size_t fb) {
    return core::cosine_similarity(a.glosses.at(fa), b.glosses.at(fb));
  };
  std::vector<SharedPair> out;
  for (const auto& x : pa) {
    for (const auto& y : pb) {
      const double straight = std::min(cross(x.i, y.i), cross(x.j, y.j));
      const double swapped = std::min(cross(x.i, y.j), cross(x.j, y.i));
      const double score = std::max(straight, swapped);
      if (score > t.cross) {
        out.push_back(SharedPair{x, y, score, swapped > straight});
      }
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const SharedPair& p) {
  auto pair_json = [](const WithinPair& w) {
    return nlohmann::json{{"i", w.i}, {"j", w.j}, {"interference", w.interference}, {"semantic", w.semantic}};
  };
  j = nlohmann::json{{"a", pair_json(p.a)}, {"b", pair_json(p.b)}, {"score", p.score}, {"crossed", p.crossed}};
}

}  // namespace polyprobe::interference
