#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "groundgen/autodiff.hpp"
#include "groundgen/kv_config.hpp"
#include "groundgen/parameters.hpp"
#include "groundgen/tokens.hpp"
#include "groundgen/transformer.hpp"

namespace groundgen {

enum class GroundingMode { Concat, CoDR, DoHA };
enum class Precision { F32, F64 };
// Starting values of the (always trainable) positional embedding tables.
// Sinusoidal tables draw from the rng like Normal ones, then get overwritten,
// so the choice leaves every other parameter value unchanged.
enum class PositionInit { Normal, Sinusoidal };

std::string to_string(GroundingMode mode);
GroundingMode parse_grounding_mode(const std::string& text);
std::string to_string(Precision precision);
Precision parse_precision(const std::string& text);
std::string to_string(DocNorm doc_norm);
DocNorm parse_doc_norm(const std::string& text);
std::string to_string(PositionInit init);
PositionInit parse_position_init(const std::string& text);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t num_encoder_layers = 2;
  std::size_t num_decoder_layers = 2;
  std::size_t ffn_dim = 256;
  double dropout = 0.1;
  std::size_t max_source_len = 512;
  std::size_t max_context_len = 256;
  std::size_t max_target_len = 128;
  GroundingMode grounding_mode = GroundingMode::Concat;
  Precision precision = Precision::F32;
  std::uint64_t seed = 0;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;
  DocNorm doc_norm = DocNorm::Shared;
  PositionInit position_init = PositionInit::Normal;

  // Throws ConfigError naming the violated constraint.
  void validate() const;

  // Keys absent from kv keep the value from `defaults`.
  static ModelConfig from_kv(const KeyValueConfig& kv, const ModelConfig& defaults);
  static ModelConfig from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;
  static const std::vector<std::string>& keys();
};

// Model-ready token ids of one sample. The target excludes BOS/EOS.
struct PreparedSample {
  std::vector<TokenId> context;
  std::vector<TokenId> document;
  std::vector<TokenId> target;
};

struct RowSpan {
  std::size_t begin = 0;
  std::size_t length = 0;
};

// Encoder-side representations consumed by the decoder, for a packed batch.
//   Concat: source = Encoder([c; d])
//   CoDR:   source = [Encoder(c); Encoder([c; d])]
//   DoHA:   source = h_c = Encoder(c), document = h_d = Encoder([c; d])
// source_spans[i] / document_spans[i] locate sample i's rows.
template <typename T>
struct EncodedInputs {
  GroundingMode mode = GroundingMode::Concat;
  Var<T> source;
  Var<T> document;
  std::vector<RowSpan> source_spans;
  std::vector<RowSpan> document_spans;

  std::size_t batch_size() const { return source_spans.size(); }
  // Rows of sample i copied out: Concat/CoDR h, DoHA h_c.
  Tensor<T> source_rows(std::size_t i) const;
  // DoHA h_d rows of sample i.
  Tensor<T> document_rows(std::size_t i) const;
};

// Encoder-decoder in one of the three grounding modes. The model owns its
// ParameterStore; forwards are const and may run concurrently on separate graphs
// as long as none of them records gradients.
template <typename T>
class GroundedModel {
 public:
  explicit GroundedModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  GroundingMode mode() const { return config_.grounding_mode; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  std::size_t parameter_count() const { return store_.scalar_count(); }

  const std::vector<EncoderLayer>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayerStd>& decoder_layers_std() const { return decoder_std_; }
  const std::vector<DecoderLayerDoHA>& decoder_layers_doha() const { return decoder_doha_; }

  // Re-initializes every parameter from config().seed (DoHA: then copies
  // cross_cxt into cross_doc).
  void initialize();

  EncodedInputs<T> encode(Graph<T>& g, std::span<const PreparedSample> batch, ForwardContext<T>& ctx) const;
  EncodedInputs<T> encode(Graph<T>& g, std::span<const TokenId> context, std::span<const TokenId> document,
                          ForwardContext<T>& ctx) const;

  // Decoder over packed prefixes; prefixes[i] belongs to encoded sample i and
  // must start with BOS. Returns next-token logits [sum |prefix_i| x V].
  Var<T> decode(Graph<T>& g, const EncodedInputs<T>& encoded, std::span<const std::vector<TokenId>> prefixes,
                ForwardContext<T>& ctx) const;

  // Single-sample forward: logits [|prefix| x V].
  Var<T> forward(Graph<T>& g, const PreparedSample& sample, std::span<const TokenId> prefix,
                 ForwardContext<T>& ctx) const;

  // Teacher-forced loss: decoder input BOS + target, labels target + EOS,
  // mean cross-entropy over every label in the batch.
  Var<T> loss(Graph<T>& g, std::span<const PreparedSample> batch, ForwardContext<T>& ctx) const;

  ForwardContext<T> eval_context() const;
  ForwardContext<T> train_context(Rng& rng) const;

 private:
  Var<T> embed(Graph<T>& g, ParamId positions, const LayerNormParams& norm, std::span<const TokenId> ids,
               std::span<const TokenId> pos, ForwardContext<T>& ctx) const;

  ModelConfig config_;
  ParameterStore<T> store_;
  ParamId token_embedding_ = 0;
  ParamId encoder_positions_ = 0;
  ParamId decoder_positions_ = 0;
  LayerNormParams encoder_embed_norm_;
  LayerNormParams decoder_embed_norm_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayerStd> decoder_std_;
  std::vector<DecoderLayerDoHA> decoder_doha_;
};

template <typename T>
GroundedModel<T> build_model(const ModelConfig& config) {
  return GroundedModel<T>(config);
}

// Teacher-forcing views of a sample.
std::vector<TokenId> decoder_input(const PreparedSample& sample);
std::vector<TokenId> decoder_labels(const PreparedSample& sample);

}  // namespace groundgen
