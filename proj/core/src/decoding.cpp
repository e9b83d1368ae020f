#include "groundgen/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "groundgen/errors.hpp"

namespace groundgen {

std::string to_string(DecodeStrategy strategy) { return strategy == DecodeStrategy::Greedy ? "greedy" : "beam"; }

DecodeStrategy parse_decode_strategy(const std::string& text) {
  if (text == "greedy") return DecodeStrategy::Greedy;
  if (text == "beam") return DecodeStrategy::Beam;
  throw ConfigError("unknown decoding strategy '" + text + "' (expected greedy or beam)");
}

const std::vector<std::string>& DecodeConfig::keys() {
  static const std::vector<std::string> k{"strategy", "beam_size", "max_target_len", "length_penalty", "min_length"};
  return k;
}

void DecodeConfig::validate() const {
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (min_length < 1) throw ConfigError("min_length must be >= 1");
  if (max_target_len < min_length) throw ConfigError("max_target_len must be >= min_length");
  if (!std::isfinite(length_penalty)) throw ConfigError("length_penalty must be finite");
}

DecodeConfig DecodeConfig::from_kv(const KeyValueConfig& kv, const DecodeConfig& defaults) {
  DecodeConfig c = defaults;
  if (kv.contains("strategy")) c.strategy = parse_decode_strategy(kv.get_string("strategy", ""));
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string("decode key '") + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.beam_size = size("beam_size", c.beam_size);
  c.max_target_len = size("max_target_len", c.max_target_len);
  c.length_penalty = kv.get_double("length_penalty", c.length_penalty);
  c.min_length = size("min_length", c.min_length);
  c.validate();
  return c;
}

DecodeConfig DecodeConfig::from_kv(const KeyValueConfig& kv) { return from_kv(kv, DecodeConfig{}); }

KeyValueConfig DecodeConfig::to_kv() const {
  KeyValueConfig kv;
  std::ostringstream lp;
  lp.precision(17);
  lp << length_penalty;
  kv.set("strategy", to_string(strategy));
  kv.set("beam_size", std::to_string(beam_size));
  kv.set("max_target_len", std::to_string(max_target_len));
  kv.set("length_penalty", lp.str());
  kv.set("min_length", std::to_string(min_length));
  return kv;
}

namespace {

constexpr double kBlocked = -std::numeric_limits<double>::infinity();

// PAD and BOS are never generated; EOS waits for min_length tokens.
void apply_masks(std::vector<double>& logp, std::size_t generated, std::size_t min_length) {
  if (logp.size() <= static_cast<std::size_t>(kUnk)) throw InputError("scorer returned fewer than 5 log-probabilities");
  logp[kPad] = kBlocked;
  logp[kBos] = kBlocked;
  if (generated < min_length) logp[kEos] = kBlocked;
}

std::vector<TokenId> with_bos(const std::vector<TokenId>& tokens) {
  std::vector<TokenId> p;
  p.reserve(tokens.size() + 1);
  p.push_back(kBos);
  p.insert(p.end(), tokens.begin(), tokens.end());
  return p;
}

}  // namespace

std::vector<std::vector<TokenId>> greedy_decode(const PrefixScorer& scorer, std::size_t num_sources,
                                                const DecodeConfig& config) {
  config.validate();
  std::vector<std::vector<TokenId>> out(num_sources);
  std::vector<std::size_t> active(num_sources);
  for (std::size_t i = 0; i < num_sources; ++i) active[i] = i;
  for (std::size_t step = 0; step < config.max_target_len && !active.empty(); ++step) {
    std::vector<std::vector<TokenId>> prefixes;
    prefixes.reserve(active.size());
    for (std::size_t i : active) prefixes.push_back(with_bos(out[i]));
    auto scores = scorer(active, prefixes);
    std::vector<std::size_t> still;
    for (std::size_t k = 0; k < active.size(); ++k) {
      auto& logp = scores[k];
      apply_masks(logp, step, config.min_length);
      // max_element returns the first maximum, i.e. the lowest id.
      const auto best = static_cast<TokenId>(std::max_element(logp.begin(), logp.end()) - logp.begin());
      if (best == kEos) continue;
      out[active[k]].push_back(best);
      still.push_back(active[k]);
    }
    active = std::move(still);
  }
  return out;
}

double normalized_score(const Hypothesis& h, double length_penalty) {
  const double len = static_cast<double>(h.tokens.size() + (h.finished ? 1 : 0));
  if (len == 0) return h.logprob;
  return h.logprob / std::pow(len, length_penalty);
}

Hypothesis beam_search(const PrefixScorer& scorer, std::size_t owner, const DecodeConfig& config) {
  config.validate();
  struct Candidate {
    double total;
    double step;
    std::size_t beam;
    TokenId token;
  };
  std::vector<Hypothesis> beams{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < config.max_target_len; ++step) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& b : beams) prefixes.push_back(with_bos(b.tokens));
    const std::vector<std::size_t> owners(beams.size(), owner);
    auto scores = scorer(owners, prefixes);

    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      auto& logp = scores[b];
      apply_masks(logp, step, config.min_length);
      for (std::size_t t = 0; t < logp.size(); ++t) {
        if (logp[t] == kBlocked) continue;
        cands.push_back({beams[b].logprob + logp[t], logp[t], b, static_cast<TokenId>(t)});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.total != b.total) return a.total > b.total;
      if (a.beam != b.beam) return a.beam < b.beam;
      if (a.step != b.step) return a.step > b.step;
      return a.token < b.token;
    });

    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < config.beam_size; ++rank) {
      const Candidate& c = cands[rank];
      Hypothesis h{beams[c.beam].tokens, c.total, false};
      if (c.token == kEos) {
        if (rank < config.beam_size) {
          h.finished = true;
          finished.push_back(std::move(h));
        }
        continue;
      }
      h.tokens.push_back(c.token);
      next.push_back(std::move(h));
    }
    beams = std::move(next);
    if (finished.size() >= config.beam_size || beams.empty()) break;
  }

  const auto& pool = finished.empty() ? beams : finished;
  if (pool.empty()) return Hypothesis{};
  const Hypothesis* best = &pool.front();
  for (const auto& h : pool) {
    if (normalized_score(h, config.length_penalty) > normalized_score(*best, config.length_penalty)) best = &h;
  }
  return *best;
}

// ---- model adapter -----------------------------------------------------------------

template <typename T>
ModelScorer<T>::ModelScorer(const GroundedModel<T>& model, std::span<const PreparedSample> sources)
    : model_(model), mode_(model.mode()) {
  if (sources.empty()) throw InputError("ModelScorer: no sources");
  Graph<T> g;
  auto ctx = model.eval_context();
  auto enc = model.encode(g, sources, ctx);
  source_ = enc.source.value();
  source_spans_ = enc.source_spans;
  if (mode_ == GroundingMode::DoHA) {
    document_ = enc.document.value();
    document_spans_ = enc.document_spans;
  }
}

template <typename T>
std::vector<std::vector<double>> ModelScorer<T>::operator()(std::span<const std::size_t> owners,
                                                            std::span<const std::vector<TokenId>> prefixes) const {
  Graph<T> g;
  EncodedInputs<T> enc;
  enc.mode = mode_;
  enc.source = g.input(source_, false);
  if (mode_ == GroundingMode::DoHA) enc.document = g.input(document_, false);
  for (std::size_t o : owners) {
    enc.source_spans.push_back(source_spans_.at(o));
    if (mode_ == GroundingMode::DoHA) enc.document_spans.push_back(document_spans_.at(o));
  }
  auto ctx = model_.eval_context();
  Var<T> logits = model_.decode(g, enc, prefixes, ctx);
  const Tensor<T>& L = logits.value();
  const std::size_t V = L.cols();
  std::vector<std::vector<double>> out;
  out.reserve(prefixes.size());
  std::size_t row = 0;
  for (const auto& p : prefixes) {
    row += p.size();
    const T* x = L.data().data() + (row - 1) * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(x[v]));
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(x[v]) - mx);
    const double lz = mx + std::log(z);
    std::vector<double> lp(V);
    for (std::size_t v = 0; v < V; ++v) lp[v] = static_cast<double>(x[v]) - lz;
    out.push_back(std::move(lp));
  }
  return out;
}

template <typename T>
std::vector<std::vector<TokenId>> generate(const GroundedModel<T>& model, std::span<const PreparedSample> samples,
                                           const DecodeConfig& config) {
  if (samples.empty()) return {};
  DecodeConfig c = config;
  c.max_target_len = std::min(c.max_target_len, model.config().max_target_len);
  c.min_length = std::min(c.min_length, c.max_target_len);
  std::vector<std::vector<TokenId>> out;
  // Bounded chunks keep the cached encoder states small.
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    const auto chunk = samples.subspan(begin, std::min(kChunk, samples.size() - begin));
    ModelScorer<T> scorer(model, chunk);
    PrefixScorer fn = [&scorer](std::span<const std::size_t> o, std::span<const std::vector<TokenId>> p) {
      return scorer(o, p);
    };
    if (c.strategy == DecodeStrategy::Greedy) {
      for (auto& seq : greedy_decode(fn, chunk.size(), c)) out.push_back(std::move(seq));
    } else {
      for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(beam_search(fn, i, c).tokens);
    }
  }
  return out;
}

template class ModelScorer<float>;
template class ModelScorer<double>;
template std::vector<std::vector<TokenId>> generate<float>(const GroundedModel<float>&, std::span<const PreparedSample>,
                                                           const DecodeConfig&);
template std::vector<std::vector<TokenId>> generate<double>(const GroundedModel<double>&,
                                                            std::span<const PreparedSample>, const DecodeConfig&);

}  // namespace groundgen
