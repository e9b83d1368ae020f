#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "groundgen/kv_config.hpp"
#include "groundgen/model.hpp"
#include "groundgen/vocab.hpp"

namespace groundgen {

// A checkpoint is a directory:
//   manifest.txt  key = value lines: format_version, dtype, model.<config key>,
//                 param.<name> = <rows>x<cols>@<byte offset> (1-D: <n>@<offset>),
//                 plus caller-provided extra.<key> entries
//   params.bin    little-endian parameters in manifest order; float32 for f32
//                 models, float64 for f64 models
//   vocab.txt     optional vocabulary
inline constexpr int kCheckpointFormatVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const GroundedModel<T>& model, const Vocab* vocab = nullptr,
                     const KeyValueConfig& extra = {});

struct CheckpointManifest {
  ModelConfig config;
  KeyValueConfig extra;
  std::vector<std::pair<std::string, Shape>> params;  // manifest order
  bool has_vocab = false;
};

CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir);
Vocab load_checkpoint_vocab(const std::filesystem::path& dir);

// Copies checkpoint values into `model` by parameter name; values are
// converted to T. A DoHA model loading a checkpoint without cross_doc entries
// (Concat or CoDR) initializes them from cross_cxt. Any other missing or extra
// name, or a shape mismatch, is a ConfigError.
template <typename T>
void load_parameters(const std::filesystem::path& dir, GroundedModel<T>& model);

// Builds a model from the checkpoint's config, optionally switching the
// grounding mode, and loads its parameters.
template <typename T>
GroundedModel<T> load_checkpoint(const std::filesystem::path& dir);
template <typename T>
GroundedModel<T> load_checkpoint(const std::filesystem::path& dir, GroundingMode mode);

// Raw little-endian blobs of a sequence of tensors (used for optimizer state).
template <typename T>
void write_blob(const std::filesystem::path& path, std::span<const Tensor<T>* const> tensors);
template <typename T>
void read_blob(const std::filesystem::path& path, std::span<Tensor<T>* const> tensors);

// Writes `content` to path via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace groundgen
