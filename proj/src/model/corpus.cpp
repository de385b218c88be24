#include "polyprobe/model/corpus.hpp"

#include <algorithm>

#include "polyprobe/core/error.hpp"
#include "polyprobe/core/rng.hpp"

namespace polyprobe::model {

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : s.groups) {
    groups.push_back({{"name", g.name}, {"tokens", g.tokens}, {"weight", g.weight}});
  }
  nlohmann::json links = nlohmann::json::array();
  for (const auto& l : s.links) {
    links.push_back({{"a", l.a}, {"b", l.b}, {"weight", l.weight}});
  }
  j = nlohmann::json{{"vocab_size", s.vocab_size},   {"groups", groups},
                     {"links", links},               {"filler", s.filler},
                     {"filler_rate", s.filler_rate}, {"mix_share", s.mix_share},
                     {"successor_bias", s.successor_bias}, {"n_sequences", s.n_sequences},
                     {"seq_len", s.seq_len},         {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  CorpusSpec d;
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.groups.clear();
  for (const auto& g : j.value("groups", nlohmann::json::array())) {
    s.groups.push_back(ConceptGroup{g.value("name", std::string()), g.at("tokens").get<std::vector<TokenId>>(),
                                    g.value("weight", 1.0)});
  }
  s.links.clear();
  for (const auto& l : j.value("links", nlohmann::json::array())) {
    s.links.push_back(CrossLink{l.at("a").get<std::size_t>(), l.at("b").get<std::size_t>(), l.value("weight", 0.0)});
  }
  s.filler = j.value("filler", std::vector<TokenId>{});
  s.filler_rate = j.value("filler_rate", d.filler_rate);
  s.mix_share = j.value("mix_share", d.mix_share);
  s.successor_bias = j.value("successor_bias", d.successor_bias);
  s.n_sequences = j.value("n_sequences", d.n_sequences);
  s.seq_len = j.value("seq_len", d.seq_len);
  s.seed = j.value("seed", d.seed);
}

CorpusSpec make_planted_spec(std::size_t vocab_size, std::size_t n_groups, std::size_t group_size,
                             std::size_t n_sequences, std::size_t seq_len, std::uint64_t seed) {
  require(n_groups * group_size <= vocab_size, ErrorCode::InvalidConfig, "groups do not fit in the vocabulary");
  CorpusSpec s;
  s.vocab_size = vocab_size;
  for (std::size_t g = 0; g < n_groups; ++g) {
    ConceptGroup group;
    group.name = "g" + std::to_string(g);
    for (std::size_t k = 0; k < group_size; ++k) {
      group.tokens.push_back(static_cast<TokenId>(g * group_size + k));
    }
    s.groups.push_back(std::move(group));
  }
  for (std::size_t g = 0; g + 1 < n_groups; g += 2) {
    s.links.push_back(CrossLink{g, g + 1, 0.5});
  }
  for (std::size_t t = n_groups * group_size; t < vocab_size; ++t) {
    s.filler.push_back(static_cast<TokenId>(t));
  }
  s.filler_rate = s.filler.empty() ? 0.0 : 0.15;
  s.n_sequences = n_sequences;
  s.seq_len = seq_len;
  s.seed = seed;
  return s;
}

void validate(const CorpusSpec& spec) {
  require(!spec.groups.empty(), ErrorCode::EmptySpec, "corpus spec has no concept groups");
  bool any_weight = false;
  for (const auto& g : spec.groups) {
    if (g.tokens.empty()) {
      fail(ErrorCode::EmptySpec, "concept group '" + g.name + "' has no tokens");
    }
    require(g.weight >= 0.0, ErrorCode::InvalidConfig, "group weights must be >= 0");
    any_weight = any_weight || g.weight > 0.0;
    for (TokenId t : g.tokens) {
      require(t < spec.vocab_size, ErrorCode::ShapeMismatch, "group token outside the vocabulary");
    }
  }
  require(any_weight, ErrorCode::EmptySpec, "no concept group has positive weight");
  for (const auto& l : spec.links) {
    require(l.a < spec.groups.size() && l.b < spec.groups.size() && l.a != l.b, ErrorCode::InvalidConfig,
            "cross link must join two distinct existing groups");
    require(l.weight >= 0.0 && l.weight <= 1.0, ErrorCode::InvalidConfig, "cross link weight must lie in [0, 1]");
  }
  for (TokenId t : spec.filler) {
    require(t < spec.vocab_size, ErrorCode::ShapeMismatch, "filler token outside the vocabulary");
  }
  require(spec.filler_rate >= 0.0 && spec.filler_rate < 1.0, ErrorCode::InvalidConfig,
          "filler_rate must lie in [0, 1)");
  require(spec.filler_rate == 0.0 || !spec.filler.empty(), ErrorCode::InvalidConfig,
          "filler_rate > 0 needs filler tokens");
  require(spec.seq_len >= 1 && spec.n_sequences >= 1, ErrorCode::InvalidConfig, "empty corpus requested");
}

Corpus synth_corpus(const CorpusSpec& spec) {
  validate(spec);
  std::vector<double> weights;
  for (const auto& g : spec.groups) {
    weights.push_back(g.weight);
  }
  Corpus corpus;
  corpus.reserve(spec.n_sequences);
  for (std::size_t n = 0; n < spec.n_sequences; ++n) {
    core::Rng rng = core::Rng(spec.seed).split("corpus").split(n);
    const std::size_t primary = rng.categorical(weights);
    std::optional<std::size_t> partner;
    for (const auto& l : spec.links) {
      if ((l.a == primary || l.b == primary) && rng.uniform() < l.weight) {
        partner = l.a == primary ? l.b : l.a;
        break;
      }
    }
    Sequence seq;
    seq.reserve(spec.seq_len);
    std::optional<std::size_t> prev_group;
    std::size_t prev_idx = 0;
    for (std::size_t t = 0; t < spec.seq_len; ++t) {
      if (spec.filler_rate > 0.0 && rng.uniform() < spec.filler_rate) {
        seq.push_back(spec.filler[rng.below(spec.filler.size())]);
        prev_group.reset();
        continue;
      }
      const std::size_t g = (partner && rng.uniform() < spec.mix_share) ? *partner : primary;
      const auto& toks = spec.groups[g].tokens;
      std::size_t idx;
      if (prev_group == g && rng.uniform() < spec.successor_bias) {
        idx = (prev_idx + 1) % toks.size();
      } else {
        idx = rng.below(toks.size());
      }
      seq.push_back(toks[idx]);
      prev_group = g;
      prev_idx = idx;
    }
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

std::vector<int> group_of_tokens(const CorpusSpec& spec) {
  std::vector<int> out(spec.vocab_size, -1);
  for (std::size_t g = 0; g < spec.groups.size(); ++g) {
    for (TokenId t : spec.groups[g].tokens) {
      if (t < out.size()) {
        out[t] = static_cast<int>(g);
      }
    }
  }
  return out;
}

std::vector<std::string> token_names(const CorpusSpec& spec) {
  std::vector<std::string> names(spec.vocab_size);
  for (std::size_t t = 0; t < spec.vocab_size; ++t) {
    names[t] = "f" + std::to_string(t);
  }
  for (std::size_t g = 0; g < spec.groups.size(); ++g) {
    const auto& toks = spec.groups[g].tokens;
    for (std::size_t k = 0; k < toks.size(); ++k) {
      if (toks[k] < names.size()) {
        names[toks[k]] = "g" + std::to_string(g) + "." + std::to_string(k);
      }
    }
  }
  return names;
}

std::vector<Sequence> sample_windows(const Corpus& corpus, std::size_t n, std::size_t length, std::uint64_t seed) {
  require(!corpus.empty(), ErrorCode::EmptyCorpus, "cannot sample windows from an empty corpus");
  require(length >= 1, ErrorCode::InvalidConfig, "window length must be >= 1");
  core::Rng rng = core::Rng(seed).split("windows");
  std::vector<Sequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Sequence& seq = corpus[rng.below(corpus.size())];
    require(!seq.empty(), ErrorCode::EmptyCorpus, "corpus contains an empty sequence");
    const std::size_t len = std::min(length, seq.size());
    const std::size_t start = rng.below(seq.size() - len + 1);
    out.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(start),
                     seq.begin() + static_cast<std::ptrdiff_t>(start + len));
  }
  return out;
}

std::vector<Sequence> sample_context_prompts(const Corpus& corpus, const std::set<TokenId>& targets, std::size_t n,
                                             std::size_t length, std::uint64_t seed) {
  require(length >= 1, ErrorCode::InvalidConfig, "prompt length must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> hits;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    for (std::size_t p = 1; p < corpus[s].size(); ++p) {
      if (targets.count(corpus[s][p])) {
        hits.emplace_back(s, p);
      }
    }
  }
  require(!hits.empty(), ErrorCode::EmptyTokenSet, "no target token occurs after a context");
  core::Rng rng = core::Rng(seed).split("context_prompts");
  std::vector<Sequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [s, p] = hits[rng.below(hits.size())];
    const std::size_t start = p > length ? p - length : 0;
    out.emplace_back(corpus[s].begin() + static_cast<std::ptrdiff_t>(start),
                     corpus[s].begin() + static_cast<std::ptrdiff_t>(p));
  }
  return out;
}

}  // namespace polyprobe::model
