#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "groundgen/kv_config.hpp"
#include "groundgen/model.hpp"
#include "groundgen/tokens.hpp"

namespace groundgen {

enum class DecodeStrategy { Greedy, Beam };

std::string to_string(DecodeStrategy strategy);
DecodeStrategy parse_decode_strategy(const std::string& text);

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::Beam;
  std::size_t beam_size = 4;
  std::size_t max_target_len = 128;  // clamped to the model's positional range
  double length_penalty = 1.0;       // alpha in logprob / len^alpha
  std::size_t min_length = 1;        // EOS is blocked before this many tokens

  void validate() const;
  static DecodeConfig from_kv(const KeyValueConfig& kv, const DecodeConfig& defaults);
  static DecodeConfig from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;
  static const std::vector<std::string>& keys();
};

// Next-token log-probabilities for a set of prefixes. owners[i] names the
// source (sample) prefix i is conditioned on; every prefix starts with BOS.
// Returns one row of vocab-size log-probabilities per prefix.
using PrefixScorer = std::function<std::vector<std::vector<double>>(std::span<const std::size_t> owners,
                                                                    std::span<const std::vector<TokenId>> prefixes)>;

// Argmax decoding of `num_sources` sources in lockstep. PAD and BOS are never
// produced; ties go to the lowest token id. Outputs exclude BOS and EOS.
std::vector<std::vector<TokenId>> greedy_decode(const PrefixScorer& scorer, std::size_t num_sources,
                                                const DecodeConfig& config);

struct Hypothesis {
  std::vector<TokenId> tokens;  // without BOS/EOS
  double logprob = 0;
  bool finished = false;
};

// Length of a hypothesis for normalization: its tokens plus EOS when finished.
double normalized_score(const Hypothesis& h, double length_penalty);

// Beam search over one source. Candidates are ranked by total log-probability
// (ties: lower beam index, then higher step score, then lower token id); an EOS
// candidate ranked inside the beam is retired as finished. Search stops once
// beam_size hypotheses have finished or the length cap is reached. Returns the
// finished hypothesis with the best normalized score, else the best unfinished.
Hypothesis beam_search(const PrefixScorer& scorer, std::size_t owner, const DecodeConfig& config);

// Scores prefixes with a frozen model; each source is encoded once.
template <typename T>
class ModelScorer {
 public:
  ModelScorer(const GroundedModel<T>& model, std::span<const PreparedSample> sources);
  std::vector<std::vector<double>> operator()(std::span<const std::size_t> owners,
                                              std::span<const std::vector<TokenId>> prefixes) const;
  std::size_t num_sources() const { return source_spans_.size(); }

 private:
  const GroundedModel<T>& model_;
  GroundingMode mode_;
  Tensor<T> source_;
  Tensor<T> document_;
  std::vector<RowSpan> source_spans_;
  std::vector<RowSpan> document_spans_;
};

// Decodes every sample with the configured strategy.
template <typename T>
std::vector<std::vector<TokenId>> generate(const GroundedModel<T>& model, std::span<const PreparedSample> samples,
                                           const DecodeConfig& config);

}  // namespace groundgen
