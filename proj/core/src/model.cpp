#include "groundgen/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace groundgen {

std::string to_string(GroundingMode mode) {
  switch (mode) {
    case GroundingMode::Concat: return "concat";
    case GroundingMode::CoDR: return "codr";
    case GroundingMode::DoHA: return "doha";
  }
  return "?";
}

GroundingMode parse_grounding_mode(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "concat") return GroundingMode::Concat;
  if (t == "codr") return GroundingMode::CoDR;
  if (t == "doha") return GroundingMode::DoHA;
  throw ConfigError("unknown grounding mode '" + text + "' (expected concat, codr or doha)");
}

std::string to_string(Precision precision) { return precision == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& text) {
  if (text == "f32" || text == "float32" || text == "32") return Precision::F32;
  if (text == "f64" || text == "float64" || text == "64") return Precision::F64;
  throw ConfigError("unknown precision '" + text + "' (expected f32 or f64)");
}

std::string to_string(DocNorm doc_norm) { return doc_norm == DocNorm::Shared ? "shared" : "separate"; }

DocNorm parse_doc_norm(const std::string& text) {
  if (text == "shared") return DocNorm::Shared;
  if (text == "separate") return DocNorm::Separate;
  throw ConfigError("unknown doc_norm '" + text + "' (expected shared or separate)");
}

std::string to_string(PositionInit init) { return init == PositionInit::Normal ? "normal" : "sinusoidal"; }

PositionInit parse_position_init(const std::string& text) {
  if (text == "normal") return PositionInit::Normal;
  if (text == "sinusoidal") return PositionInit::Sinusoidal;
  throw ConfigError("unknown position_init '" + text + "' (expected normal or sinusoidal)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) fail("vocab_size must exceed the 5 reserved tokens");
  if (d_model == 0) fail("d_model must be positive");
  if (num_heads == 0) fail("num_heads must be positive");
  if (d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
  if (num_decoder_layers == 0) fail("num_decoder_layers must be positive");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (max_source_len == 0) fail("max_source_len must be positive");
  if (max_context_len == 0) fail("max_context_len must be positive");
  if (max_target_len == 0) fail("max_target_len must be >= 1");
  if (max_context_len > max_source_len) fail("max_context_len must not exceed max_source_len");
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> k{
      "vocab_size",     "d_model",        "num_heads",      "num_encoder_layers", "num_decoder_layers",
      "ffn_dim",        "dropout",        "max_source_len", "max_context_len",    "max_target_len",
      "grounding_mode", "precision",      "seed",           "layer_norm_eps",     "init_std",
      "doc_norm",       "position_init"};
  return k;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv, const ModelConfig& defaults) {
  ModelConfig c = defaults;
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string("config key '") + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.vocab_size = size("vocab_size", c.vocab_size);
  c.d_model = size("d_model", c.d_model);
  c.num_heads = size("num_heads", c.num_heads);
  c.num_encoder_layers = size("num_encoder_layers", c.num_encoder_layers);
  c.num_decoder_layers = size("num_decoder_layers", c.num_decoder_layers);
  // BART convention: feed-forward width 4 * d_model unless given.
  c.ffn_dim = kv.contains("ffn_dim") ? size("ffn_dim", c.ffn_dim)
              : kv.contains("d_model") ? 4 * c.d_model
                                       : c.ffn_dim;
  c.dropout = kv.get_double("dropout", c.dropout);
  c.max_source_len = size("max_source_len", c.max_source_len);
  c.max_context_len = size("max_context_len", c.max_context_len);
  c.max_target_len = size("max_target_len", c.max_target_len);
  if (kv.contains("grounding_mode")) c.grounding_mode = parse_grounding_mode(kv.get_string("grounding_mode", ""));
  if (kv.contains("precision")) c.precision = parse_precision(kv.get_string("precision", ""));
  c.seed = kv.get_uint("seed", c.seed);
  c.layer_norm_eps = kv.get_double("layer_norm_eps", c.layer_norm_eps);
  c.init_std = kv.get_double("init_std", c.init_std);
  if (kv.contains("doc_norm")) c.doc_norm = parse_doc_norm(kv.get_string("doc_norm", ""));
  if (kv.contains("position_init")) c.position_init = parse_position_init(kv.get_string("position_init", ""));
  return c;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) { return from_kv(kv, ModelConfig{}); }

KeyValueConfig ModelConfig::to_kv() const {
  KeyValueConfig kv;
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv.set("vocab_size", std::to_string(vocab_size));
  kv.set("d_model", std::to_string(d_model));
  kv.set("num_heads", std::to_string(num_heads));
  kv.set("num_encoder_layers", std::to_string(num_encoder_layers));
  kv.set("num_decoder_layers", std::to_string(num_decoder_layers));
  kv.set("ffn_dim", std::to_string(ffn_dim));
  kv.set("dropout", num(dropout));
  kv.set("max_source_len", std::to_string(max_source_len));
  kv.set("max_context_len", std::to_string(max_context_len));
  kv.set("max_target_len", std::to_string(max_target_len));
  kv.set("grounding_mode", to_string(grounding_mode));
  kv.set("precision", to_string(precision));
  kv.set("seed", std::to_string(seed));
  kv.set("layer_norm_eps", num(layer_norm_eps));
  kv.set("init_std", num(init_std));
  kv.set("doc_norm", to_string(doc_norm));
  kv.set("position_init", to_string(position_init));
  return kv;
}

std::vector<TokenId> decoder_input(const PreparedSample& sample) {
  std::vector<TokenId> ids;
  ids.reserve(sample.target.size() + 1);
  ids.push_back(kBos);
  ids.insert(ids.end(), sample.target.begin(), sample.target.end());
  return ids;
}

std::vector<TokenId> decoder_labels(const PreparedSample& sample) {
  std::vector<TokenId> ids(sample.target.begin(), sample.target.end());
  ids.push_back(kEos);
  return ids;
}

// ---- EncodedInputs ---------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> copy_rows(const Tensor<T>& src, RowSpan span) {
  const std::size_t cols = src.cols();
  AlignedVector<T> data(src.data().begin() + span.begin * cols, src.data().begin() + (span.begin + span.length) * cols);
  return Tensor<T>(Shape{span.length, cols}, std::move(data));
}

// sin/cos pairs over geometric wavelengths, scaled so the table's RMS equals
// `rms` (the token embeddings' scale).
template <typename T>
void fill_sinusoidal(Tensor<T>& table, double rms) {
  const std::size_t d = table.cols();
  const double amplitude = rms * std::sqrt(2.0);
  for (std::size_t pos = 0; pos < table.rows(); ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      table.at(pos, i) = static_cast<T>(amplitude * (i % 2 == 0 ? std::sin(angle) : std::cos(angle)));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> EncodedInputs<T>::source_rows(std::size_t i) const {
  return copy_rows(source.value(), source_spans.at(i));
}

template <typename T>
Tensor<T> EncodedInputs<T>::document_rows(std::size_t i) const {
  if (mode != GroundingMode::DoHA) throw InputError("document rows exist only in DoHA mode");
  return copy_rows(document.value(), document_spans.at(i));
}

// ---- GroundedModel -----------------------------------------------------------------

template <typename T>
GroundedModel<T>::GroundedModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  token_embedding_ = store_.add("embed.tokens", {config_.vocab_size, d}, ParamInit::Normal);
  encoder_positions_ = store_.add("encoder.embed_positions", {config_.max_source_len, d}, ParamInit::Normal);
  encoder_embed_norm_ = register_layer_norm(store_, "encoder.embed_norm", d);
  for (std::size_t i = 0; i < config_.num_encoder_layers; ++i) {
    encoder_.push_back(register_encoder_layer(store_, "encoder.layer" + std::to_string(i), d, config_.num_heads,
                                              config_.ffn_dim));
  }
  decoder_positions_ = store_.add("decoder.embed_positions", {config_.max_target_len, d}, ParamInit::Normal);
  decoder_embed_norm_ = register_layer_norm(store_, "decoder.embed_norm", d);
  for (std::size_t i = 0; i < config_.num_decoder_layers; ++i) {
    const std::string prefix = "decoder.layer" + std::to_string(i);
    if (config_.grounding_mode == GroundingMode::DoHA) {
      decoder_doha_.push_back(
          register_decoder_layer_doha(store_, prefix, d, config_.num_heads, config_.ffn_dim, config_.doc_norm));
    } else {
      decoder_std_.push_back(register_decoder_layer_std(store_, prefix, d, config_.num_heads, config_.ffn_dim));
    }
  }
  initialize();
}

template <typename T>
void GroundedModel<T>::initialize() {
  Rng rng(config_.seed);
  store_.initialize(rng, config_.init_std);
  if (config_.position_init == PositionInit::Sinusoidal) {
    fill_sinusoidal(store_[encoder_positions_], config_.init_std);
    fill_sinusoidal(store_[decoder_positions_], config_.init_std);
  }
  for (const auto& layer : decoder_doha_) init_doha_from_cxt(store_, layer);
}

template <typename T>
ForwardContext<T> GroundedModel<T>::eval_context() const {
  ForwardContext<T> ctx;
  ctx.layer_norm_eps = static_cast<T>(config_.layer_norm_eps);
  return ctx;
}

template <typename T>
ForwardContext<T> GroundedModel<T>::train_context(Rng& rng) const {
  ForwardContext<T> ctx = eval_context();
  ctx.training = true;
  ctx.dropout = static_cast<T>(config_.dropout);
  ctx.rng = &rng;
  return ctx;
}

template <typename T>
Var<T> GroundedModel<T>::embed(Graph<T>& g, ParamId positions, const LayerNormParams& norm,
                               std::span<const TokenId> ids, std::span<const TokenId> pos,
                               ForwardContext<T>& ctx) const {
  Var<T> x = add(embedding(store_.bind(g, token_embedding_), ids), embedding(store_.bind(g, positions), pos));
  x = layer_norm(x, store_.bind(g, norm.gamma), store_.bind(g, norm.beta), ctx.layer_norm_eps);
  if (ctx.training && ctx.dropout > T(0)) x = dropout(x, ctx.dropout, true, *ctx.rng);
  return x;
}

template <typename T>
EncodedInputs<T> GroundedModel<T>::encode(Graph<T>& g, std::span<const PreparedSample> batch,
                                          ForwardContext<T>& ctx) const {
  if (batch.empty()) throw InputError("encode: empty batch");
  const GroundingMode mode = config_.grounding_mode;
  std::vector<TokenId> ids;
  std::vector<TokenId> pos;
  AttentionLayout layout;
  auto add_segment = [&](std::span<const TokenId> a, std::span<const TokenId> b) {
    const std::size_t begin = ids.size();
    ids.insert(ids.end(), a.begin(), a.end());
    ids.insert(ids.end(), b.begin(), b.end());
    const std::size_t len = ids.size() - begin;
    for (std::size_t p = 0; p < len; ++p) pos.push_back(static_cast<TokenId>(p));
    layout.push_back(AttentionBlock{begin, len, begin, len, false, {}});
    return RowSpan{begin, len};
  };

  std::vector<RowSpan> context_rows, combined_rows;
  for (const PreparedSample& s : batch) {
    if (s.context.empty()) throw InputError("encode: context must be non-empty");
    if (s.document.empty() && mode != GroundingMode::Concat) {
      throw InputError("encode: document may be empty only in concat mode");
    }
    if (s.context.size() + s.document.size() > config_.max_source_len) {
      throw InputError("encode: source of " + std::to_string(s.context.size() + s.document.size()) +
                       " tokens exceeds max_source_len " + std::to_string(config_.max_source_len) +
                       "; truncate before encoding");
    }
    if (mode != GroundingMode::Concat) context_rows.push_back(add_segment(s.context, {}));
    combined_rows.push_back(add_segment(s.context, s.document));
  }

  Var<T> x = embed(g, encoder_positions_, encoder_embed_norm_, ids, pos, ctx);
  Var<T> h = encoder_forward<T>(g, store_, encoder_, x, layout, ctx);

  EncodedInputs<T> out;
  out.mode = mode;
  switch (mode) {
    case GroundingMode::Concat:
      out.source = h;
      out.source_spans = std::move(combined_rows);
      break;
    case GroundingMode::CoDR:
      // Segments were packed as c_i, [c_i; d_i] so each sample's [h_c; h_d] is contiguous.
      out.source = h;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        out.source_spans.push_back({context_rows[i].begin, context_rows[i].length + combined_rows[i].length});
      }
      break;
    case GroundingMode::DoHA: {
      std::vector<std::size_t> c_rows, d_rows;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        out.source_spans.push_back({c_rows.size(), context_rows[i].length});
        for (std::size_t r = 0; r < context_rows[i].length; ++r) c_rows.push_back(context_rows[i].begin + r);
        out.document_spans.push_back({d_rows.size(), combined_rows[i].length});
        for (std::size_t r = 0; r < combined_rows[i].length; ++r) d_rows.push_back(combined_rows[i].begin + r);
      }
      out.source = gather_rows<T>(h, c_rows);
      out.document = gather_rows<T>(h, d_rows);
      break;
    }
  }
  return out;
}

template <typename T>
EncodedInputs<T> GroundedModel<T>::encode(Graph<T>& g, std::span<const TokenId> context,
                                          std::span<const TokenId> document, ForwardContext<T>& ctx) const {
  PreparedSample s{{context.begin(), context.end()}, {document.begin(), document.end()}, {}};
  return encode(g, std::span<const PreparedSample>(&s, 1), ctx);
}

template <typename T>
Var<T> GroundedModel<T>::decode(Graph<T>& g, const EncodedInputs<T>& encoded,
                                std::span<const std::vector<TokenId>> prefixes, ForwardContext<T>& ctx) const {
  if (prefixes.size() != encoded.batch_size()) {
    throw InputError("decode: " + std::to_string(prefixes.size()) + " prefixes for " +
                     std::to_string(encoded.batch_size()) + " encoded samples");
  }
  std::vector<TokenId> ids;
  std::vector<TokenId> pos;
  AttentionLayout self_layout, src_layout, doc_layout;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto& p = prefixes[i];
    if (p.empty() || p.front() != kBos) throw InputError("decode: target prefix must begin with BOS");
    if (p.size() > config_.max_target_len) {
      throw InputError("decode: prefix of " + std::to_string(p.size()) + " tokens exceeds max_target_len " +
                       std::to_string(config_.max_target_len));
    }
    const std::size_t begin = ids.size();
    ids.insert(ids.end(), p.begin(), p.end());
    for (std::size_t t = 0; t < p.size(); ++t) pos.push_back(static_cast<TokenId>(t));
    self_layout.push_back({begin, p.size(), begin, p.size(), true, {}});
    src_layout.push_back({begin, p.size(), encoded.source_spans[i].begin, encoded.source_spans[i].length, false, {}});
    if (encoded.mode == GroundingMode::DoHA) {
      doc_layout.push_back(
          {begin, p.size(), encoded.document_spans[i].begin, encoded.document_spans[i].length, false, {}});
    }
  }

  Var<T> h = embed(g, decoder_positions_, decoder_embed_norm_, ids, pos, ctx);
  if (config_.grounding_mode == GroundingMode::DoHA) {
    if (encoded.mode != GroundingMode::DoHA) throw InputError("decode: DoHA decoder needs separate h_c and h_d");
    for (const auto& layer : decoder_doha_) {
      h = decoder_layer_doha(g, store_, layer, h, self_layout, encoded.source, src_layout, encoded.document,
                             doc_layout, ctx);
    }
  } else {
    for (const auto& layer : decoder_std_) {
      h = decoder_layer_std(g, store_, layer, h, self_layout, encoded.source, src_layout, ctx);
    }
  }
  return matmul_transposed(h, store_.bind(g, token_embedding_));
}

template <typename T>
Var<T> GroundedModel<T>::forward(Graph<T>& g, const PreparedSample& sample, std::span<const TokenId> prefix,
                                 ForwardContext<T>& ctx) const {
  EncodedInputs<T> enc = encode(g, std::span<const PreparedSample>(&sample, 1), ctx);
  std::vector<TokenId> p(prefix.begin(), prefix.end());
  return decode(g, enc, std::span<const std::vector<TokenId>>(&p, 1), ctx);
}

template <typename T>
Var<T> GroundedModel<T>::loss(Graph<T>& g, std::span<const PreparedSample> batch, ForwardContext<T>& ctx) const {
  EncodedInputs<T> enc = encode(g, batch, ctx);
  std::vector<std::vector<TokenId>> inputs;
  std::vector<TokenId> labels;
  inputs.reserve(batch.size());
  for (const auto& s : batch) {
    inputs.push_back(decoder_input(s));
    const auto l = decoder_labels(s);
    labels.insert(labels.end(), l.begin(), l.end());
  }
  Var<T> logits = decode(g, enc, inputs, ctx);
  return cross_entropy(logits, std::span<const TokenId>(labels), kPad);
}

template struct EncodedInputs<float>;
template struct EncodedInputs<double>;
template class GroundedModel<float>;
template class GroundedModel<double>;

}  // namespace groundgen
