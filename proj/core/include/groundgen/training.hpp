#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "groundgen/kv_config.hpp"
#include "groundgen/model.hpp"
#include "groundgen/vocab.hpp"

namespace groundgen {

struct TrainConfig {
  double learning_rate = 5e-5;
  std::string learning_rate_text = "5e-5";  // as written by the user
  std::vector<std::string> learning_rate_grid{"5e-5", "2e-5"};
  std::size_t epochs = 25;
  std::size_t batch_size = 16;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 100;
  std::size_t eval_every = 0;    // steps between validations; 0 = epoch ends only
  std::size_t eval_samples = 0;  // validation samples decoded for BLEU-4; 0 = all
  std::size_t max_steps = 0;     // stop (as if interrupted) after this many steps; 0 = no limit
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  // Keys absent from kv keep the value from `defaults`.
  static TrainConfig from_kv(const KeyValueConfig& kv, const TrainConfig& defaults);
  static TrainConfig from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;
  static const std::vector<std::string>& keys();
  void set_learning_rate(const std::string& text);
};

struct LogRecord {
  std::size_t step = 0;
  std::string split;             // "train" or "valid"
  double loss = 0;
  std::optional<double> bleu4;   // valid records only

  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

std::string to_json_line(const LogRecord& record);
LogRecord log_record_from_json(const std::string& line);

// Optimizer and schedule state. m and v shadow the parameter store entry by
// entry.
template <typename T>
struct TrainState {
  std::size_t step = 0;
  double best_bleu4 = -1;
  std::size_t best_step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::vector<LogRecord> log;

  static TrainState zeros_like(const ParameterStore<T>& store);
};

// lr scaled by min(1, (step + 1) / warmup_steps).
double scheduled_learning_rate(const TrainConfig& config, std::size_t step);

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_gradients(ParameterStore<T>& store, double max_norm);

// One bias-corrected Adam update at time step state.step + 1 using the grads
// held by the store. Does not advance state.step.
template <typename T>
void adam_update(ParameterStore<T>& store, TrainState<T>& state, double lr, const TrainConfig& config);

// Teacher-forced forward/backward on the batch, clipping, Adam, step++.
// Dropout draws come from a generator seeded by (config.seed, state.step).
// Returns the batch loss; a non-finite loss raises NumericError.
template <typename T>
double train_step(GroundedModel<T>& model, std::span<const PreparedSample> batch, TrainState<T>& state,
                  const TrainConfig& config);

// Mean per-token cross-entropy over a corpus, no dropout.
template <typename T>
double evaluate_loss(const GroundedModel<T>& model, std::span<const PreparedSample> corpus, std::size_t batch_size);

struct FitOptions {
  // When set: best/, final/ and state/ checkpoints plus train_log.jsonl.
  std::optional<std::filesystem::path> checkpoint_dir;
  bool resume = false;  // continue from checkpoint_dir/state
  std::ostream* progress = nullptr;
};

struct FitResult {
  std::vector<LogRecord> log;
  double best_bleu4 = -1;
  std::size_t best_step = 0;
  std::size_t steps = 0;
  bool interrupted = false;  // stopped by max_steps before the last epoch ended
};

// Shuffled epochs of packed batches; the order of epoch e depends only on
// (seed, e), so a resumed run replays the same batches. Validation (loss and
// greedy BLEU-4) runs every eval_every steps and after each epoch; the best
// BLEU-4 (earliest on ties) is kept in best/.
template <typename T>
FitResult fit(GroundedModel<T>& model, std::span<const PreparedSample> train, std::span<const PreparedSample> valid,
              const Vocab& vocab, const TrainConfig& config, const FitOptions& options = {});

// Order of training samples in an epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace groundgen
