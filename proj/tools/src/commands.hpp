#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "groundgen/decoding.hpp"
#include "groundgen/kv_config.hpp"
#include "groundgen/metrics.hpp"
#include "groundgen/model.hpp"
#include "groundgen/training.hpp"

namespace groundgen::cli {

// Bad flags, missing inputs, invalid values: exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Runs `body`, reporting any exception on `err`; returns the exit code.
int run_guarded(const std::function<void()>& body, std::ostream& err);
int exit_code_for(const std::exception& e);

struct CommonOptions {
  std::optional<std::uint64_t> seed;
  std::vector<std::filesystem::path> configs;  // key-value files, later ones win
  std::vector<std::string> sets;               // key=value overrides, applied last
  std::filesystem::path out;
};

// Model, training and decoding settings resolved from config files and
// overrides. `raw` holds every key as written.
struct ResolvedConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  KeyValueConfig raw;
};

// Accepts model, train and decode keys plus length_preset. "seed" seeds both
// initialization and training; decode keys are strategy, beam_size,
// length_penalty, min_length and decode_max_target_len.
ResolvedConfig resolve_config(const KeyValueConfig& kv);
KeyValueConfig load_common_config(const CommonOptions& common, const std::vector<std::filesystem::path>& extra = {});

struct SynthOptions {
  CommonOptions common;
  std::optional<std::filesystem::path> spec;
};

struct TrainOptions {
  CommonOptions common;
  std::filesystem::path data_dir;
  std::optional<std::filesystem::path> model_config;
  std::optional<std::filesystem::path> train_config;
  std::optional<std::string> mode;
  std::optional<std::string> learning_rate;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> max_steps;
  bool resume = false;
};

struct GenerateOptions {
  CommonOptions common;  // out = output JSONL path
  std::filesystem::path checkpoint;
  std::filesystem::path input;
  std::optional<std::string> strategy;
  std::optional<std::size_t> beam_size;
  std::optional<std::size_t> max_target_len;
  std::optional<std::size_t> min_length;
  std::optional<double> length_penalty;
};

struct EvaluateOptions {
  CommonOptions common;  // out (optional) = directory for metrics files
  std::filesystem::path outputs;
  std::filesystem::path references;
  std::optional<std::filesystem::path> values;  // value vocabulary for exact match
  bool smoothing = false;
};

struct CompareOptions {
  CommonOptions common;
  std::filesystem::path data_dir;
  std::vector<std::string> modes{"concat", "codr", "doha"};
  bool context_only_ablation = false;
};

struct EvaluateResult {
  MetricReport metrics;
  std::optional<double> exact_match;
};

struct CompareRow {
  std::string label;  // mode, or "concat-ctx" for the context-only ablation
  std::uint64_t seed = 0;
  std::string learning_rate;
  double valid_bleu4 = 0;
  MetricReport test;
  std::optional<double> exact_match;
};

void cmd_synth(const SynthOptions& options, std::ostream& log);
void cmd_train(const TrainOptions& options, std::ostream& log);
void cmd_generate(const GenerateOptions& options, std::ostream& log);
EvaluateResult cmd_evaluate(const EvaluateOptions& options, std::ostream& out);
std::vector<CompareRow> cmd_compare(const CompareOptions& options, std::ostream& log);

// The consolidated table printed and written by cmd_compare.
std::string format_compare_table(const std::vector<CompareRow>& rows);

// Fraction of outputs whose value words are exactly the reference's answer.
double synthetic_exact_match(const std::vector<std::string>& outputs, const std::vector<std::string>& references,
                             const std::vector<std::string>& values);

std::vector<std::string> read_value_vocabulary(const std::filesystem::path& path);

}  // namespace groundgen::cli
