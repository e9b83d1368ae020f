#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "groundgen/rng.hpp"
#include "groundgen/tensor.hpp"
#include "groundgen/tokens.hpp"

namespace groundgen {

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  explicit operator bool() const { return graph != nullptr; }
};

// One query/key pairing inside a (possibly packed) attention call. Rows
// [q_begin, q_begin + q_len) of the queries attend over rows
// [k_begin, k_begin + k_len) of the keys/values. `allowed`, when non-empty, is a
// q_len x k_len row-major 0/1 mask; `causal` additionally blocks keys after the
// query position and requires q_len == k_len.
struct AttentionBlock {
  std::size_t q_begin = 0;
  std::size_t q_len = 0;
  std::size_t k_begin = 0;
  std::size_t k_len = 0;
  bool causal = false;
  std::vector<std::uint8_t> allowed;
};

using AttentionLayout = std::vector<AttentionBlock>;

inline AttentionLayout single_block_layout(std::size_t q_len, std::size_t k_len, bool causal = false,
                                           std::vector<std::uint8_t> allowed = {}) {
  return {AttentionBlock{0, q_len, 0, k_len, causal, std::move(allowed)}};
}

// Layout that hides padded keys: every query row may attend to key j iff key_valid[j].
AttentionLayout key_padding_layout(std::size_t q_len, std::span<const std::uint8_t> key_valid);

// Ordered record of executed ops. Every node's inputs precede it, so a reverse
// sweep replays adjoints in a valid order. Single-threaded by contract.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var<T> self)>;

  explicit Graph(bool record_backward = true) : recording_(record_backward) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  // Leaf with no gradient.
  Var<T> constant(Tensor<T> value);
  // Leaf owned by the graph whose gradient can be read back with grad().
  Var<T> input(Tensor<T> value, bool requires_grad = true);
  // Binds an external parameter tensor. Gradients accumulate into param.grad()
  // when the tensor requires grad. Repeated binds of the same tensor return the
  // same node.
  Var<T> parameter(Tensor<T>& param, std::string_view name = {});

  const Tensor<T>& value(Var<T> v) const;
  bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
  std::span<T> grad(Var<T> v);

  // Appends an op output. The finite-value check runs here; the backward closure
  // is kept only if some input needs a gradient.
  Var<T> record(std::string_view op, Tensor<T> out, std::span<const Var<T>> inputs, BackwardFn fn);
  Var<T> record(std::string_view op, Tensor<T> out, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(op, std::move(out), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
  }

  // Reverse sweep from a single-element loss. May be called once.
  void backward(Var<T> loss);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t backward_visits() const { return backward_visits_; }
  std::string_view op_name(std::uint32_t id) const { return nodes_[id].op; }
  const std::vector<std::uint32_t>& inputs_of(std::uint32_t id) const { return nodes_[id].inputs; }
  bool has_backward(std::uint32_t id) const { return static_cast<bool>(nodes_[id].backward); }
  // Names passed to parameter(), in first-bind order.
  const std::vector<std::string>& bound_parameters() const { return bound_names_; }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> owned;
    Tensor<T>* external = nullptr;
    AlignedVector<T> grad;
    bool needs_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
  };

  Var<T> push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::uint32_t> bound_;
  std::vector<std::string> bound_names_;
  bool recording_;
  bool backward_done_ = false;
  std::size_t backward_visits_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(*this);
}

// ---- ops -------------------------------------------------------------------
// All ops treat a tensor as a matrix whose columns are the last axis.

// a[m x k] . b[k x n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
// a[m x k] . b[n x k]^T
template <typename T>
Var<T> matmul_transposed(Var<T> a, Var<T> b);
// x . w + b (b broadcast over rows)
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
template <typename T>
Var<T> transpose(Var<T> a);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
// bias[n] added to every row of a[m x n]
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
// Sum of all elements, shape [1].
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count);
// Row gather; the adjoint scatter-adds.
template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows);
// table[V x d] looked up at ids -> [len(ids) x d]. Ids outside [0, V) raise VocabularyError.
template <typename T>
Var<T> embedding(Var<T> table, std::span<const TokenId> ids);
// Per-row normalization over the last axis with biased variance.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);
// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x);
// Inverted dropout. Identity when !training or p == 0; p outside [0, 1) is a ConfigError.
template <typename T>
Var<T> dropout(Var<T> x, T p, bool training, Rng& rng);
// Softmax over the last axis. `allowed` has one 0/1 entry per logit (row-major,
// same shape as logits); 0 blocks the position, empty blocks nothing. Blocked positions come out exactly 0; a fully blocked row is an InputError.
template <typename T>
Var<T> masked_softmax(Var<T> logits, std::span<const std::uint8_t> allowed);
// Mean over non-pad rows of -log softmax(logits)[target]. Shape [1].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const TokenId> targets, TokenId pad_id);
// Fused multi-head scaled dot-product attention over pre-projected q[Nq x d],
// k[Nk x d], v[Nk x d]: head j uses columns [j*d/heads, (j+1)*d/heads), scores are
// scaled by 1/sqrt(d/heads). Output is the column-concatenation of the heads.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionLayout& layout);

// Row softmax with max-subtraction, shared by masked_softmax and attention.
// `allowed` may be null. Returns false if every position is blocked.
template <typename T>
bool softmax_row(const T* logits, const std::uint8_t* allowed, std::size_t n, T* out);

}  // namespace groundgen
