#include "groundgen/synthetic.hpp"

#include <algorithm>
#include <array>
#include <unordered_set>
#include <utility>

#include "groundgen/errors.hpp"
#include "groundgen/rng.hpp"

namespace groundgen {

const std::vector<std::string>& SyntheticTaskSpec::keys() {
  static const std::vector<std::string> k{"num_entities",     "num_attributes", "num_values", "facts_per_document",
                                          "distractor_count", "holdout_every",  "grammar_seed", "train_size",
                                          "valid_size",       "test_size"};
  return k;
}

void SyntheticTaskSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("synthetic spec too small: " + what); };
  if (num_entities == 0 || num_attributes == 0) fail("num_entities and num_attributes must be positive");
  if (facts_per_document == 0) fail("facts_per_document must be positive");
  if (holdout_every < 2) fail("holdout_every must be at least 2");
  // Each entity needs a held-out value for valid/test and another one for train.
  if (num_values < holdout_every + 1) fail("num_values must exceed holdout_every");
  if ((distractor_count + 1) * facts_per_document > num_entities * num_attributes) {
    fail("(distractor_count + 1) * facts_per_document exceeds num_entities * num_attributes");
  }
  if (train_size == 0 || valid_size == 0 || test_size == 0) fail("split sizes must be positive");
}

SyntheticTaskSpec SyntheticTaskSpec::from_kv(const KeyValueConfig& kv) {
  kv.require_known(keys(), "synthetic task spec");
  SyntheticTaskSpec s;
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string("synthetic spec key '") + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  s.num_entities = size("num_entities", s.num_entities);
  s.num_attributes = size("num_attributes", s.num_attributes);
  s.num_values = size("num_values", s.num_values);
  s.facts_per_document = size("facts_per_document", s.facts_per_document);
  s.distractor_count = size("distractor_count", s.distractor_count);
  s.holdout_every = size("holdout_every", s.holdout_every);
  s.grammar_seed = kv.get_uint("grammar_seed", s.grammar_seed);
  s.train_size = size("train_size", s.train_size);
  s.valid_size = size("valid_size", s.valid_size);
  s.test_size = size("test_size", s.test_size);
  s.validate();
  return s;
}

KeyValueConfig SyntheticTaskSpec::to_kv() const {
  KeyValueConfig kv;
  kv.set("num_entities", std::to_string(num_entities));
  kv.set("num_attributes", std::to_string(num_attributes));
  kv.set("num_values", std::to_string(num_values));
  kv.set("facts_per_document", std::to_string(facts_per_document));
  kv.set("distractor_count", std::to_string(distractor_count));
  kv.set("holdout_every", std::to_string(holdout_every));
  kv.set("grammar_seed", std::to_string(grammar_seed));
  kv.set("train_size", std::to_string(train_size));
  kv.set("valid_size", std::to_string(valid_size));
  kv.set("test_size", std::to_string(test_size));
  return kv;
}

SyntheticNames synthetic_names(const SyntheticTaskSpec& spec) {
  static const std::array<const char*, 16> onsets{"b", "d", "f", "g", "k", "l", "m", "n",
                                                  "p", "r", "s", "t", "v", "z", "br", "tr"};
  static const std::array<const char*, 5> vowels{"a", "e", "i", "o", "u"};
  Rng rng(spec.grammar_seed);
  std::unordered_set<std::string> used{"what", "is", "the", "of"};
  auto word = [&] {
    for (;;) {
      std::string w;
      const std::size_t syllables = 2 + rng.index(2);
      for (std::size_t s = 0; s < syllables; ++s) {
        w += onsets[rng.index(onsets.size())];
        w += vowels[rng.index(vowels.size())];
      }
      if (used.insert(w).second) return w;
    }
  };
  SyntheticNames names;
  for (std::size_t i = 0; i < spec.num_entities; ++i) names.entities.push_back(word());
  for (std::size_t i = 0; i < spec.num_attributes; ++i) names.attributes.push_back(word());
  for (std::size_t i = 0; i < spec.num_values; ++i) names.values.push_back(word());
  return names;
}

namespace {

struct Fact {
  std::size_t entity, attribute, value;
};

class SampleMaker {
 public:
  SampleMaker(const SyntheticTaskSpec& spec, const SyntheticNames& names, Rng& rng)
      : spec_(spec), names_(names), rng_(rng) {}

  GroundedSample make(bool held_out_query) {
    const std::size_t e = rng_.index(spec_.num_entities);
    const std::size_t a = rng_.index(spec_.num_attributes);
    const std::size_t v = draw_value(e, held_out_query);

    // Distinct (entity, attribute) keys across the whole sample, so no fact
    // contradicts the queried one.
    std::vector<std::pair<std::size_t, std::size_t>> keys{{e, a}};
    const std::size_t passages = 1 + spec_.distractor_count;
    std::vector<std::vector<Fact>> facts(passages);
    facts[0].push_back({e, a, v});
    for (std::size_t p = 0; p < passages; ++p) {
      while (facts[p].size() < spec_.facts_per_document) {
        // Half of the distractors share the entity or the attribute of the query.
        std::size_t fe = rng_.index(spec_.num_entities);
        std::size_t fa = rng_.index(spec_.num_attributes);
        const std::size_t kind = rng_.index(4);
        if (kind == 0) fe = e;
        if (kind == 1) fa = a;
        if (std::find(keys.begin(), keys.end(), std::make_pair(fe, fa)) != keys.end()) continue;
        keys.emplace_back(fe, fa);
        facts[p].push_back({fe, fa, draw_value(fe, false)});
      }
      rng_.shuffle(std::span<Fact>(facts[p]));
    }
    rng_.shuffle(std::span<std::vector<Fact>>(facts));

    GroundedSample s;
    for (const auto& passage : facts) {
      std::string text;
      for (const auto& f : passage) {
        if (!text.empty()) text += ' ';
        text += names_.entities[f.entity] + " " + names_.attributes[f.attribute] + " is " + names_.values[f.value] +
                " .";
      }
      s.documents.push_back(std::move(text));
    }
    const std::string& en = names_.entities[e];
    const std::string& an = names_.attributes[a];
    s.context.push_back("what is the " + an + " of " + en + " ?");
    s.target = "the " + an + " of " + en + " is " + names_.values[v];
    return s;
  }

 private:
  bool held_out(std::size_t e, std::size_t v) const { return (e + v) % spec_.holdout_every == 0; }

  std::size_t draw_value(std::size_t e, bool want_held_out) {
    for (;;) {
      const std::size_t v = rng_.index(spec_.num_values);
      if (held_out(e, v) == want_held_out) return v;
    }
  }

  const SyntheticTaskSpec& spec_;
  const SyntheticNames& names_;
  Rng& rng_;
};

}  // namespace

SyntheticCorpora generate_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticCorpora out;
  out.names = synthetic_names(spec);
  auto split = [&](std::uint64_t stream, std::size_t n, bool held_out_query) {
    Rng rng(mix_seed(seed, stream));
    SampleMaker maker(spec, out.names, rng);
    std::vector<GroundedSample> samples;
    samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) samples.push_back(maker.make(held_out_query));
    return samples;
  };
  out.train = split(1, spec.train_size, false);
  out.valid = split(2, spec.valid_size, true);
  out.test = split(3, spec.test_size, true);
  return out;
}

SyntheticQuery parse_synthetic_query(const std::string& context) {
  const auto w = split_words(context);
  if (w.size() != 7 || w[0] != "what" || w[1] != "is" || w[2] != "the" || w[4] != "of" || w[6] != "?") {
    throw InputError("not a synthetic query: '" + context + "'");
  }
  return {w[3], w[5]};
}

std::string synthetic_answer(const std::string& target) {
  const auto w = split_words(target);
  if (w.empty()) throw InputError("empty synthetic target");
  return w.back();
}

bool value_exact_match(const std::string& output, const std::string& expected,
                       const std::set<std::string>& value_vocabulary) {
  std::set<std::string> found;
  for (const auto& w : split_words(output)) {
    if (value_vocabulary.count(w)) found.insert(w);
  }
  return found == std::set<std::string>{expected};
}

}  // namespace groundgen
