#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "groundgen/data.hpp"
#include "groundgen/kv_config.hpp"

namespace groundgen {

// Fact-lookup task. Each document passage lists facts "e a is v ." and the
// context asks "what is the a of e ?"; the target is "the a of e is v".
// The queried value is drawn per sample, so it can only be read off the
// document. An (entity, value) pair with (e + v) % holdout_every == 0 is
// reserved for valid/test queries and never occurs anywhere in train.
struct SyntheticTaskSpec {
  std::size_t num_entities = 40;
  std::size_t num_attributes = 6;
  std::size_t num_values = 30;
  std::size_t facts_per_document = 4;
  std::size_t distractor_count = 1;  // extra passages per sample
  std::size_t holdout_every = 5;
  std::uint64_t grammar_seed = 7;   // pseudo-word names
  std::size_t train_size = 5000;
  std::size_t valid_size = 300;
  std::size_t test_size = 500;

  // Throws ConfigError when the spec cannot produce disjoint splits.
  void validate() const;
  static SyntheticTaskSpec from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;
  static const std::vector<std::string>& keys();
};

struct SyntheticNames {
  std::vector<std::string> entities;
  std::vector<std::string> attributes;
  std::vector<std::string> values;
};

struct SyntheticCorpora {
  std::vector<GroundedSample> train;
  std::vector<GroundedSample> valid;
  std::vector<GroundedSample> test;
  SyntheticNames names;
};

// Distinct pronounceable pseudo-words for every entity, attribute and value.
SyntheticNames synthetic_names(const SyntheticTaskSpec& spec);

SyntheticCorpora generate_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed);

// (attribute, entity) asked by a context "what is the a of e ?".
struct SyntheticQuery {
  std::string attribute;
  std::string entity;
};
// Throws InputError for contexts that are not a synthetic query.
SyntheticQuery parse_synthetic_query(const std::string& context);

// The queried value: last word of a synthetic target.
std::string synthetic_answer(const std::string& target);

// True iff the value words appearing in `output` are exactly {expected}.
bool value_exact_match(const std::string& output, const std::string& expected,
                       const std::set<std::string>& value_vocabulary);

}  // namespace groundgen
