#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "groundgen/model.hpp"
#include "groundgen/vocab.hpp"

namespace groundgen {

// One (document, context, target) record. documents may be empty or hold
// several passages; context holds one or more turns.
struct GroundedSample {
  std::vector<std::string> documents;
  std::vector<std::string> context;
  std::string target;

  friend bool operator==(const GroundedSample&, const GroundedSample&) = default;
};

// Throws InputError if context or target is empty.
void validate_sample(const GroundedSample& sample);

// JSONL, one {"documents": [...], "context": [...], "target": "..."} per line.
// Blank lines are skipped; malformed lines raise DataError with the line number.
std::vector<GroundedSample> read_jsonl(std::istream& in);
std::vector<GroundedSample> load_jsonl(const std::filesystem::path& path);
void write_jsonl(std::ostream& out, std::span<const GroundedSample> samples);
void save_jsonl(const std::filesystem::path& path, std::span<const GroundedSample> samples);

// Counts every word of documents, context and target.
Vocab build_vocab(std::span<const GroundedSample> corpus, std::size_t max_size = 0);

// Source/target caps of the three benchmark tasks.
struct LengthPreset {
  std::string name;
  std::size_t max_source_len;
  std::size_t max_context_len;
  std::size_t max_target_len;
};

const std::vector<LengthPreset>& length_presets();
// Applies the named preset (wikipedia_update, cmu_dog, wizard) to config.
void apply_length_preset(ModelConfig& config, const std::string& name);

// Token ids ready for the model:
//   context  = turn_1 SEP turn_2 ... (oldest turns dropped first, then the
//              tail kept, to fit max_context_len)
//   document = passage_1 SEP passage_2 ..., tail truncated so that
//              |context| + |document| <= max_source_len
//   target   = at most max_target_len - 1 tokens (room for EOS)
// Throws InputError when the context or target ends up empty.
PreparedSample prepare(const GroundedSample& sample, const Vocab& vocab, const ModelConfig& config);
std::vector<PreparedSample> prepare_all(std::span<const GroundedSample> corpus, const Vocab& vocab,
                                        const ModelConfig& config);

// Drops the documents of every sample (context-only ablation).
std::vector<GroundedSample> without_documents(std::span<const GroundedSample> corpus);

}  // namespace groundgen
