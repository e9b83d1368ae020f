#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "groundgen/autodiff.hpp"
#include "groundgen/parameters.hpp"
#include "groundgen/rng.hpp"

namespace groundgen {

// Names of sublayers in execution order, appended by the layer forwards when a
// trace is attached to the context.
using SublayerTrace = std::vector<std::string>;

template <typename T>
struct ForwardContext {
  bool training = false;
  T dropout = T(0);
  T layer_norm_eps = T(1e-5);
  Rng* rng = nullptr;
  SublayerTrace* trace = nullptr;
  // When set, each decoder sublayer's post-norm output is appended here.
  std::vector<Var<T>>* sublayer_outputs = nullptr;
};

// Per-head projections W^Q_j, W^K_j, W^V_j (d_model x d_head) with biases,
// and the output projection W^o (d_model x d_model).
struct MultiHeadParams {
  std::size_t heads = 0;
  std::vector<ParamId> w_q, w_k, w_v;
  std::vector<ParamId> b_q, b_k, b_v;
  ParamId w_o = 0;
  ParamId b_o = 0;
};

struct LayerNormParams {
  ParamId gamma = 0;
  ParamId beta = 0;
};

struct FeedForwardParams {
  ParamId w1 = 0, b1 = 0, w2 = 0, b2 = 0;
};

struct EncoderLayer {
  MultiHeadParams self_attn;
  LayerNormParams self_attn_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct DecoderLayerStd {
  MultiHeadParams self_attn;
  LayerNormParams self_attn_norm;
  MultiHeadParams cross_cxt;
  LayerNormParams cross_cxt_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

// Standard layer plus the document cross-attention (W^dQ_j, W^dK_j, W^dV_j, W^do).
struct DecoderLayerDoHA {
  MultiHeadParams self_attn;
  LayerNormParams self_attn_norm;
  MultiHeadParams cross_cxt;
  LayerNormParams cross_cxt_norm;
  MultiHeadParams cross_doc;
  LayerNormParams cross_doc_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

// How the document sublayer of a DoHA layer gets its layer-norm pair.
enum class DocNorm {
  Shared,    // reuses the cross_cxt_norm tensors
  Separate,  // own tensors, copied from cross_cxt_norm at init
};

// ---- registration -----------------------------------------------------------

// `document` selects the WdQ/WdK/WdV/Wdo naming of the document head.
template <typename T>
MultiHeadParams register_multi_head(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t heads, bool document = false);
template <typename T>
LayerNormParams register_layer_norm(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model);
template <typename T>
FeedForwardParams register_feed_forward(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                        std::size_t ffn_dim);
template <typename T>
EncoderLayer register_encoder_layer(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t heads, std::size_t ffn_dim);
template <typename T>
DecoderLayerStd register_decoder_layer_std(ParameterStore<T>& store, const std::string& prefix, std::size_t d_model,
                                           std::size_t heads, std::size_t ffn_dim);
template <typename T>
DecoderLayerDoHA register_decoder_layer_doha(ParameterStore<T>& store, const std::string& prefix,
                                             std::size_t d_model, std::size_t heads, std::size_t ffn_dim,
                                             DocNorm doc_norm);

// Copies every cross_cxt tensor of the layer into its cross_doc counterpart
// (and the norm pair when the document norm is separate). Idempotent.
template <typename T>
void init_doha_from_cxt(ParameterStore<T>& store, const DecoderLayerDoHA& layer);

// ---- forward ------------------------------------------------------------------

// [H_1; ...; H_m] W^o with H_j = Attention(q W^Q_j, k W^K_j, v W^V_j).
// q_in may be a packed batch; the layout pairs query rows with key rows.
template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const ParameterStore<T>& store, const MultiHeadParams& params, Var<T> q_in,
                            Var<T> k_in, Var<T> v_in, const AttentionLayout& layout);

template <typename T>
Var<T> feed_forward(Graph<T>& g, const ParameterStore<T>& store, const FeedForwardParams& params, Var<T> x);

// F(h): LayerNorm(residual + dropout(h)).
template <typename T>
Var<T> residual_norm(Graph<T>& g, const ParameterStore<T>& store, const LayerNormParams& norm, Var<T> residual,
                     Var<T> h, ForwardContext<T>& ctx);

// Post-norm encoder stack. `layout` describes the self-attention blocks (one
// per packed sequence, key padding via AttentionBlock::allowed).
template <typename T>
Var<T> encoder_forward(Graph<T>& g, const ParameterStore<T>& store, std::span<const EncoderLayer> layers, Var<T> x,
                       const AttentionLayout& layout, ForwardContext<T>& ctx);

// F(SelfAttention) -> F(CrossAttention over h_src) -> F(FFN).
template <typename T>
Var<T> decoder_layer_std(Graph<T>& g, const ParameterStore<T>& store, const DecoderLayerStd& layer, Var<T> h_x,
                         const AttentionLayout& self_layout, Var<T> h_src, const AttentionLayout& src_layout,
                         ForwardContext<T>& ctx);

// F(SelfAttention) -> F(CrossAttention_Cxt over h_c) -> F(CrossAttention_Doc over h_d,
// queried by the Cxt sublayer's output) -> F(FFN).
template <typename T>
Var<T> decoder_layer_doha(Graph<T>& g, const ParameterStore<T>& store, const DecoderLayerDoHA& layer, Var<T> h_x,
                          const AttentionLayout& self_layout, Var<T> h_c, const AttentionLayout& cxt_layout,
                          Var<T> h_d, const AttentionLayout& doc_layout, ForwardContext<T>& ctx);

}  // namespace groundgen
