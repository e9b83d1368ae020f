#include "groundgen/transformer.hpp"

#include <array>

namespace groundgen {
namespace {

template <typename T>
Var<T> concat_params(Graph<T>& g, const ParameterStore<T>& store, const std::vector<ParamId>& ids, std::size_t axis) {
  if (ids.size() == 1) return store.bind(g, ids.front());
  std::vector<Var<T>> parts;
  parts.reserve(ids.size());
  for (ParamId id : ids) parts.push_back(store.bind(g, id));
  return concat<T>(parts, axis);
}

void check_source(const AttentionLayout& layout, const char* what) {
  for (const auto& block : layout) {
    if (block.k_len == 0) throw InputError(std::string(what) + ": empty source sequence");
  }
}

template <typename T>
void trace(ForwardContext<T>& ctx, const char* name, Var<T> out) {
  if (ctx.trace) ctx.trace->emplace_back(name);
  if (ctx.sublayer_outputs) ctx.sublayer_outputs->push_back(out);
}

}  // namespace

template <typename T>
MultiHeadParams register_multi_head(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t heads, bool document) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t d_head = d_model / heads;
  const std::string tag = document ? "d" : "";
  // The document head is a copy of the context head, so it draws no random values.
  const ParamInit weight_init = document ? ParamInit::Copied : ParamInit::Normal;
  MultiHeadParams p;
  p.heads = heads;
  const std::array<std::pair<std::vector<ParamId>*, std::vector<ParamId>*>, 3> slots{
      {{&p.w_q, &p.b_q}, {&p.w_k, &p.b_k}, {&p.w_v, &p.b_v}}};
  const std::array<const char*, 3> letters{"Q", "K", "V"};
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t j = 0; j < heads; ++j) {
      const std::string head = ".head" + std::to_string(j);
      slots[s].first->push_back(store.add(prefix + ".W" + tag + letters[s] + head, {d_model, d_head}, weight_init));
      slots[s].second->push_back(store.add(prefix + ".b" + tag + letters[s] + head, {d_head}, ParamInit::Zeros));
    }
  }
  p.w_o = store.add(prefix + ".W" + tag + "o", {d_model, d_model}, weight_init);
  p.b_o = store.add(prefix + ".b" + tag + "o", {d_model}, ParamInit::Zeros);
  return p;
}

template <typename T>
LayerNormParams register_layer_norm(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model) {
  return {store.add(prefix + ".gamma", {d_model}, ParamInit::Ones), store.add(prefix + ".beta", {d_model}, ParamInit::Zeros)};
}

template <typename T>
FeedForwardParams register_feed_forward(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                        std::size_t ffn_dim) {
  FeedForwardParams p;
  p.w1 = store.add(prefix + ".W1", {d_model, ffn_dim}, ParamInit::Normal);
  p.b1 = store.add(prefix + ".b1", {ffn_dim}, ParamInit::Zeros);
  p.w2 = store.add(prefix + ".W2", {ffn_dim, d_model}, ParamInit::Normal);
  p.b2 = store.add(prefix + ".b2", {d_model}, ParamInit::Zeros);
  return p;
}

template <typename T>
EncoderLayer register_encoder_layer(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t heads, std::size_t ffn_dim) {
  EncoderLayer layer;
  layer.self_attn = register_multi_head(store, prefix + ".self_attn", d_model, heads);
  layer.self_attn_norm = register_layer_norm(store, prefix + ".self_attn_norm", d_model);
  layer.ffn = register_feed_forward(store, prefix + ".ffn", d_model, ffn_dim);
  layer.ffn_norm = register_layer_norm(store, prefix + ".ffn_norm", d_model);
  return layer;
}

template <typename T>
DecoderLayerStd register_decoder_layer_std(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                           std::size_t heads, std::size_t ffn_dim) {
  DecoderLayerStd layer;
  layer.self_attn = register_multi_head(store, prefix + ".self_attn", d_model, heads);
  layer.self_attn_norm = register_layer_norm(store, prefix + ".self_attn_norm", d_model);
  layer.cross_cxt = register_multi_head(store, prefix + ".cross_cxt", d_model, heads);
  layer.cross_cxt_norm = register_layer_norm(store, prefix + ".cross_cxt_norm", d_model);
  layer.ffn = register_feed_forward(store, prefix + ".ffn", d_model, ffn_dim);
  layer.ffn_norm = register_layer_norm(store, prefix + ".ffn_norm", d_model);
  return layer;
}

template <typename T>
DecoderLayerDoHA register_decoder_layer_doha(ParameterStore<T>& store, const std::string& prefix,
                                             std::size_t d_model, std::size_t heads, std::size_t ffn_dim,
                                             DocNorm doc_norm) {
  DecoderLayerDoHA layer;
  layer.self_attn = register_multi_head(store, prefix + ".self_attn", d_model, heads);
  layer.self_attn_norm = register_layer_norm(store, prefix + ".self_attn_norm", d_model);
  layer.cross_cxt = register_multi_head(store, prefix + ".cross_cxt", d_model, heads);
  layer.cross_cxt_norm = register_layer_norm(store, prefix + ".cross_cxt_norm", d_model);
  layer.cross_doc = register_multi_head(store, prefix + ".cross_doc", d_model, heads, /*document=*/true);
  layer.cross_doc_norm = doc_norm == DocNorm::Shared ? layer.cross_cxt_norm
                                                     : register_layer_norm(store, prefix + ".cross_doc_norm", d_model);
  layer.ffn = register_feed_forward(store, prefix + ".ffn", d_model, ffn_dim);
  layer.ffn_norm = register_layer_norm(store, prefix + ".ffn_norm", d_model);
  return layer;
}

template <typename T>
void init_doha_from_cxt(ParameterStore<T>& store, const DecoderLayerDoHA& layer) {
  const MultiHeadParams& cxt = layer.cross_cxt;
  const MultiHeadParams& doc = layer.cross_doc;
  for (std::size_t j = 0; j < cxt.heads; ++j) {
    store.copy_values(cxt.w_q[j], doc.w_q[j]);
    store.copy_values(cxt.w_k[j], doc.w_k[j]);
    store.copy_values(cxt.w_v[j], doc.w_v[j]);
    store.copy_values(cxt.b_q[j], doc.b_q[j]);
    store.copy_values(cxt.b_k[j], doc.b_k[j]);
    store.copy_values(cxt.b_v[j], doc.b_v[j]);
  }
  store.copy_values(cxt.w_o, doc.w_o);
  store.copy_values(cxt.b_o, doc.b_o);
  if (layer.cross_doc_norm.gamma != layer.cross_cxt_norm.gamma) {
    store.copy_values(layer.cross_cxt_norm.gamma, layer.cross_doc_norm.gamma);
    store.copy_values(layer.cross_cxt_norm.beta, layer.cross_doc_norm.beta);
  }
}

template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const ParameterStore<T>& store, const MultiHeadParams& params, Var<T> q_in,
                            Var<T> k_in, Var<T> v_in, const AttentionLayout& layout) {
  Var<T> q = linear(q_in, concat_params(g, store, params.w_q, 1), concat_params(g, store, params.b_q, 0));
  Var<T> k = linear(k_in, concat_params(g, store, params.w_k, 1), concat_params(g, store, params.b_k, 0));
  Var<T> v = linear(v_in, concat_params(g, store, params.w_v, 1), concat_params(g, store, params.b_v, 0));
  Var<T> heads = attention(q, k, v, params.heads, layout);
  return linear(heads, store.bind(g, params.w_o), store.bind(g, params.b_o));
}

template <typename T>
Var<T> feed_forward(Graph<T>& g, const ParameterStore<T>& store, const FeedForwardParams& params, Var<T> x) {
  Var<T> hidden = gelu(linear(x, store.bind(g, params.w1), store.bind(g, params.b1)));
  return linear(hidden, store.bind(g, params.w2), store.bind(g, params.b2));
}

template <typename T>
Var<T> residual_norm(Graph<T>& g, const ParameterStore<T>& store, const LayerNormParams& norm, Var<T> residual,
                     Var<T> h, ForwardContext<T>& ctx) {
  Var<T> dropped = h;
  if (ctx.training && ctx.dropout > T(0)) {
    if (!ctx.rng) throw ConfigError("training forward with dropout needs an rng");
    dropped = dropout(h, ctx.dropout, true, *ctx.rng);
  }
  return layer_norm(add(residual, dropped), store.bind(g, norm.gamma), store.bind(g, norm.beta), ctx.layer_norm_eps);
}

template <typename T>
Var<T> encoder_forward(Graph<T>& g, const ParameterStore<T>& store, std::span<const EncoderLayer> layers, Var<T> x,
                       const AttentionLayout& layout, ForwardContext<T>& ctx) {
  Var<T> h = x;
  for (const EncoderLayer& layer : layers) {
    h = residual_norm(g, store, layer.self_attn_norm, h, multi_head_attention(g, store, layer.self_attn, h, h, h, layout), ctx);
    h = residual_norm(g, store, layer.ffn_norm, h, feed_forward(g, store, layer.ffn, h), ctx);
  }
  return h;
}

template <typename T>
Var<T> decoder_layer_std(Graph<T>& g, const ParameterStore<T>& store, const DecoderLayerStd& layer, Var<T> h_x,
                         const AttentionLayout& self_layout, Var<T> h_src, const AttentionLayout& src_layout,
                         ForwardContext<T>& ctx) {
  check_source(src_layout, "decoder cross-attention");
  Var<T> h = residual_norm(g, store, layer.self_attn_norm, h_x,
                           multi_head_attention(g, store, layer.self_attn, h_x, h_x, h_x, self_layout), ctx);
  trace(ctx, "Self", h);
  h = residual_norm(g, store, layer.cross_cxt_norm, h,
                    multi_head_attention(g, store, layer.cross_cxt, h, h_src, h_src, src_layout), ctx);
  trace(ctx, "Cross", h);
  h = residual_norm(g, store, layer.ffn_norm, h, feed_forward(g, store, layer.ffn, h), ctx);
  trace(ctx, "FFN", h);
  return h;
}

template <typename T>
Var<T> decoder_layer_doha(Graph<T>& g, const ParameterStore<T>& store, const DecoderLayerDoHA& layer, Var<T> h_x,
                          const AttentionLayout& self_layout, Var<T> h_c, const AttentionLayout& cxt_layout,
                          Var<T> h_d, const AttentionLayout& doc_layout, ForwardContext<T>& ctx) {
  check_source(cxt_layout, "context cross-attention");
  check_source(doc_layout, "document cross-attention");
  Var<T> h = residual_norm(g, store, layer.self_attn_norm, h_x,
                           multi_head_attention(g, store, layer.self_attn, h_x, h_x, h_x, self_layout), ctx);
  trace(ctx, "Self", h);
  h = residual_norm(g, store, layer.cross_cxt_norm, h,
                    multi_head_attention(g, store, layer.cross_cxt, h, h_c, h_c, cxt_layout), ctx);
  trace(ctx, "Cxt", h);
  h = residual_norm(g, store, layer.cross_doc_norm, h,
                    multi_head_attention(g, store, layer.cross_doc, h, h_d, h_d, doc_layout), ctx);
  trace(ctx, "Doc", h);
  h = residual_norm(g, store, layer.ffn_norm, h, feed_forward(g, store, layer.ffn, h), ctx);
  trace(ctx, "FFN", h);
  return h;
}

#define GROUNDGEN_INSTANTIATE_TRANSFORMER(T)                                                                          \
  template MultiHeadParams register_multi_head<T>(ParameterStore<T>&, const std::string&, std::size_t, std::size_t,  \
                                                  bool);                                                             \
  template LayerNormParams register_layer_norm<T>(ParameterStore<T>&, const std::string&, std::size_t);              \
  template FeedForwardParams register_feed_forward<T>(ParameterStore<T>&, const std::string&, std::size_t,           \
                                                      std::size_t);                                                  \
  template EncoderLayer register_encoder_layer<T>(ParameterStore<T>&, const std::string&, std::size_t, std::size_t,  \
                                                  std::size_t);                                                      \
  template DecoderLayerStd register_decoder_layer_std<T>(ParameterStore<T>&, const std::string&, std::size_t,        \
                                                         std::size_t, std::size_t);                                  \
  template DecoderLayerDoHA register_decoder_layer_doha<T>(ParameterStore<T>&, const std::string&, std::size_t,      \
                                                           std::size_t, std::size_t, DocNorm);                       \
  template void init_doha_from_cxt<T>(ParameterStore<T>&, const DecoderLayerDoHA&);                                  \
  template Var<T> multi_head_attention<T>(Graph<T>&, const ParameterStore<T>&, const MultiHeadParams&, Var<T>,       \
                                          Var<T>, Var<T>, const AttentionLayout&);                                   \
  template Var<T> feed_forward<T>(Graph<T>&, const ParameterStore<T>&, const FeedForwardParams&, Var<T>);            \
  template Var<T> residual_norm<T>(Graph<T>&, const ParameterStore<T>&, const LayerNormParams&, Var<T>, Var<T>,      \
                                   ForwardContext<T>&);                                                              \
  template Var<T> encoder_forward<T>(Graph<T>&, const ParameterStore<T>&, std::span<const EncoderLayer>, Var<T>,     \
                                     const AttentionLayout&, ForwardContext<T>&);                                    \
  template Var<T> decoder_layer_std<T>(Graph<T>&, const ParameterStore<T>&, const DecoderLayerStd&, Var<T>,          \
                                       const AttentionLayout&, Var<T>, const AttentionLayout&, ForwardContext<T>&);  \
  template Var<T> decoder_layer_doha<T>(Graph<T>&, const ParameterStore<T>&, const DecoderLayerDoHA&, Var<T>,        \
                                        const AttentionLayout&, Var<T>, const AttentionLayout&, Var<T>,              \
                                        const AttentionLayout&, ForwardContext<T>&);

GROUNDGEN_INSTANTIATE_TRANSFORMER(float)
GROUNDGEN_INSTANTIATE_TRANSFORMER(double)

}  // namespace groundgen
