#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyprobe/model/config.hpp"

namespace polyprobe::model {

using Sequence = std::vector<TokenId>;
using Corpus = std::vector<Sequence>;

// A "concept": a set of token ids that tend to co-occur within a sequence.
struct ConceptGroup {
  std::string name;
  std::vector<TokenId> tokens;
  double weight = 1.0;  // how often the group is a sequence's primary topic
};

// Two groups that are deliberately mixed into the same sequences. This is
// the planted interference: the model sees the pair together and is pushed
// to share directions between them.
struct CrossLink {
  std::size_t a = 0;
  std::size_t b = 0;
  double weight = 0.0;  // probability that a sequence on `a` (or `b`) also mixes in the other
};

struct CorpusSpec {
  std::size_t vocab_size = 256;
  std::vector<ConceptGroup> groups;
  std::vector<CrossLink> links;
  std::vector<TokenId> filler;
  double filler_rate = 0.0;
  // Share of non-filler tokens taken from the linked group when a sequence mixes.
  double mix_share = 0.35;
  // Chance that a group token is followed by its successor inside the group.
  double successor_bias = 0.5;
  std::size_t n_sequences = 512;
  std::size_t seq_len = 32;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

// Default planted layout: `n_groups` groups of `group_size` consecutive ids,
// remaining ids are filler, and groups (0,1), (2,3), ... are cross-linked.
CorpusSpec make_planted_spec(std::size_t vocab_size, std::size_t n_groups, std::size_t group_size,
                             std::size_t n_sequences, std::size_t seq_len, std::uint64_t seed);

// Throws EmptySpec when there are no groups, a group is empty, or no group has
// positive weight; ShapeMismatch when a token id is outside the vocabulary.
void validate(const CorpusSpec& spec);

Corpus synth_corpus(const CorpusSpec& spec);

// Group index per token id, -1 for tokens outside every group.
std::vector<int> group_of_tokens(const CorpusSpec& spec);

// Display strings: "g<group>.<k>" for group tokens, "f<id>" for the rest.
std::vector<std::string> token_names(const CorpusSpec& spec);

// `n` windows of `length` tokens cut at seeded random offsets.
std::vector<Sequence> sample_windows(const Corpus& corpus, std::size_t n, std::size_t length, std::uint64_t seed);

// `n` windows of up to `length` tokens that end just before an occurrence of a
// token from `targets`; the prompt is the context that preceded the target.
// Throws EmptyTokenSet when no occurrence has at least one preceding token.
std::vector<Sequence> sample_context_prompts(const Corpus& corpus, const std::set<TokenId>& targets, std::size_t n,
                                             std::size_t length, std::uint64_t seed);

}  // namespace polyprobe::model
