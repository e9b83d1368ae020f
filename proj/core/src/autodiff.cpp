#include "groundgen/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace groundgen {
namespace {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatrixRM<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> as_matrix(std::span<T> buffer, std::size_t rows, std::size_t cols) {
  return MatMap<T>(buffer.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}

template <typename T>
Graph<T>& graph_of(std::initializer_list<Var<T>> vars) {
  Graph<T>* g = vars.begin()->graph;
  for (const auto& v : vars) {
    if (v.graph != g) throw InputError("ops mix variables from different graphs");
  }
  return *g;
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

AttentionLayout key_padding_layout(std::size_t q_len, std::span<const std::uint8_t> key_valid) {
  AttentionBlock block{0, q_len, 0, key_valid.size(), false, {}};
  block.allowed.reserve(q_len * key_valid.size());
  for (std::size_t i = 0; i < q_len; ++i) block.allowed.insert(block.allowed.end(), key_valid.begin(), key_valid.end());
  return {std::move(block)};
}

// ---- Graph -------------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw InputError("graph too large");
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node node;
  node.op = "constant";
  node.owned = std::move(value);
  return push(std::move(node));
}

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value, bool requires_grad) {
  Node node;
  node.op = "input";
  node.owned = std::move(value);
  node.needs_grad = recording_ && requires_grad;
  return push(std::move(node));
}

template <typename T>
Var<T> Graph<T>::parameter(Tensor<T>& param, std::string_view name) {
  auto it = bound_.find(&param);
  if (it != bound_.end()) return Var<T>{this, it->second};
  Node node;
  node.op = "parameter";
  node.external = &param;
  node.needs_grad = recording_ && param.requires_grad();
  Var<T> v = push(std::move(node));
  bound_.emplace(&param, v.id);
  bound_names_.emplace_back(name);
  return v;
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var<T> v) const {
  const Node& node = nodes_[v.id];
  return node.external ? *node.external : node.owned;
}

template <typename T>
std::span<T> Graph<T>::grad(Var<T> v) {
  Node& node = nodes_[v.id];
  if (node.external) return node.external->grad();
  return node.grad;
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, Tensor<T> out, std::span<const Var<T>> inputs, BackwardFn fn) {
  for (T x : out.data()) {
    if (!std::isfinite(x)) throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
  }
  Node node;
  node.op = op;
  node.owned = std::move(out);
  if (recording_) {
    for (const auto& in : inputs) {
      node.inputs.push_back(in.id);
      node.needs_grad = node.needs_grad || nodes_[in.id].needs_grad;
    }
    if (node.needs_grad) node.backward = std::move(fn);
  }
  return push(std::move(node));
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (!recording_) throw InputError("backward on a graph that does not record");
  if (backward_done_) throw InputError("backward may only run once per graph");
  if (value(loss).size() != 1) throw ShapeError("backward needs a single-element loss, got " + shape_string(value(loss).shape()));
  backward_done_ = true;
  for (std::uint32_t i = 0; i <= loss.id; ++i) {
    Node& node = nodes_[i];
    if (node.needs_grad && !node.external) node.grad.assign(node.owned.size(), T(0));
  }
  if (!nodes_[loss.id].needs_grad) return;
  grad(loss)[0] += T(1);
  for (std::uint32_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward) continue;
    node.backward(*this, Var<T>{this, i});
    ++backward_visits_;
  }
}

// ---- ops ----------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of({a, b});
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  if (B.rank() != 2 || A.cols() != B.shape()[0]) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  Tensor<T> out(with_last<T>(A.shape(), B.cols()));
  as_matrix(out).noalias() = as_matrix(A) * as_matrix(B);
  return g.record("matmul", std::move(out), {a, b}, [a, b](Graph<T>& g, Var<T> self) {
    const Tensor<T>& A = g.value(a);
    const Tensor<T>& B = g.value(b);
    auto dC = as_matrix(g.grad(self), A.rows(), B.cols());
    if (g.needs_grad(a)) as_matrix(g.grad(a), A.rows(), A.cols()).noalias() += dC * as_matrix(B).transpose();
    if (g.needs_grad(b)) as_matrix(g.grad(b), B.rows(), B.cols()).noalias() += as_matrix(A).transpose() * dC;
  });
}

template <typename T>
Var<T> matmul_transposed(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of({a, b});
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  if (B.rank() != 2 || A.cols() != B.cols()) {
    throw ShapeError("matmul_transposed: inner dimensions differ, " + shape_string(A.shape()) + " x " +
                     shape_string(B.shape()) + "^T");
  }
  Tensor<T> out(with_last<T>(A.shape(), B.rows()));
  as_matrix(out).noalias() = as_matrix(A) * as_matrix(B).transpose();
  return g.record("matmul_transposed", std::move(out), {a, b}, [a, b](Graph<T>& g, Var<T> self) {
    const Tensor<T>& A = g.value(a);
    const Tensor<T>& B = g.value(b);
    auto dC = as_matrix(g.grad(self), A.rows(), B.rows());
    if (g.needs_grad(a)) as_matrix(g.grad(a), A.rows(), A.cols()).noalias() += dC * as_matrix(B);
    if (g.needs_grad(b)) as_matrix(g.grad(b), B.rows(), B.cols()).noalias() += dC.transpose() * as_matrix(A);
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Graph<T>& g = graph_of({x, w, b});
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& W = g.value(w);
  const Tensor<T>& B = g.value(b);
  if (W.rank() != 2 || X.cols() != W.shape()[0]) {
    throw ShapeError("linear: inner dimensions differ, " + shape_string(X.shape()) + " x " + shape_string(W.shape()));
  }
  if (B.size() != W.cols()) {
    throw ShapeError("linear: bias " + shape_string(B.shape()) + " does not match output width " + std::to_string(W.cols()));
  }
  Tensor<T> out(with_last<T>(X.shape(), W.cols()));
  auto Y = as_matrix(out);
  Y.noalias() = as_matrix(X) * as_matrix(W);
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(B.data().data(), W.cols());
  return g.record("linear", std::move(out), {x, w, b}, [x, w, b](Graph<T>& g, Var<T> self) {
    const Tensor<T>& X = g.value(x);
    const Tensor<T>& W = g.value(w);
    auto dY = as_matrix(g.grad(self), X.rows(), W.cols());
    if (g.needs_grad(x)) as_matrix(g.grad(x), X.rows(), X.cols()).noalias() += dY * as_matrix(W).transpose();
    if (g.needs_grad(w)) as_matrix(g.grad(w), W.rows(), W.cols()).noalias() += as_matrix(X).transpose() * dY;
    if (g.needs_grad(b)) {
      auto db = g.grad(b);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db.data(), W.cols()) += dY.colwise().sum();
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& A = g.value(a);
  if (A.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_string(A.shape()));
  Tensor<T> out(Shape{A.cols(), A.rows()});
  as_matrix(out) = as_matrix(A).transpose();
  return g.record("transpose", std::move(out), {a}, [a](Graph<T>& g, Var<T> self) {
    const Tensor<T>& A = g.value(a);
    as_matrix(g.grad(a), A.rows(), A.cols()) += as_matrix(g.grad(self), A.cols(), A.rows()).transpose();
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& A = g.value(a);
  if (shape_size(shape) != A.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(A.shape()) + " as " + shape_string(shape));
  }
  Tensor<T> out(std::move(shape), A.storage());
  return g.record("reshape", std::move(out), {a}, [a](Graph<T>& g, Var<T> self) {
    auto ga = g.grad(a);
    auto gs = g.grad(self);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs[i];
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of({a, b});
  require_same_shape("add", g.value(a), g.value(b));
  Tensor<T> out = g.value(a);
  out.set_requires_grad(false);
  const auto bd = g.value(b).data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return g.record("add", std::move(out), {a, b}, [a, b](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    for (Var<T> in : {a, b}) {
      if (!g.needs_grad(in)) continue;
      auto gi = g.grad(in);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gs[i];
    }
  });
}

template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  Graph<T>& g = graph_of({a, bias});
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(bias);
  if (B.size() != A.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(B.shape()) + " vs rows of width " + std::to_string(A.cols()));
  }
  Tensor<T> out(A.shape());
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) out.at(r, c) = A.at(r, c) + B[c];
  return g.record("add_bias", std::move(out), {a, bias}, [a, bias](Graph<T>& g, Var<T> self) {
    const Tensor<T>& A = g.value(a);
    auto gs = g.grad(self);
    if (g.needs_grad(a)) {
      auto ga = g.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs[i];
    }
    if (g.needs_grad(bias)) {
      auto gb = g.grad(bias);
      for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t c = 0; c < A.cols(); ++c) gb[c] += gs[r * A.cols() + c];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of({a, b});
  require_same_shape("mul", g.value(a), g.value(b));
  Tensor<T> out(g.value(a).shape());
  const auto ad = g.value(a).data();
  const auto bd = g.value(b).data();
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
  return g.record("mul", std::move(out), {a, b}, [a, b](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    const auto ad = g.value(a).data();
    const auto bd = g.value(b).data();
    if (g.needs_grad(a)) {
      auto ga = g.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs[i] * bd[i];
    }
    if (g.needs_grad(b)) {
      auto gb = g.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gs[i] * ad[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Graph<T>& g = *a.graph;
  Tensor<T> out(g.value(a).shape());
  const auto ad = g.value(a).data();
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  return g.record("scale", std::move(out), {a}, [a, factor](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    auto ga = g.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs[i] * factor;
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Graph<T>& g = *a.graph;
  T total = 0;
  for (T x : g.value(a).data()) total += x;
  return g.record("sum", Tensor<T>(Shape{1}, total), {a}, [a](Graph<T>& g, Var<T> self) {
    const T gs = g.grad(self)[0];
    for (T& x : g.grad(a)) x += gs;
  });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph<T>& g = *parts.front().graph;
  const Shape& first = g.value(parts.front()).shape();
  if (axis >= first.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.graph != &g) throw InputError("ops mix variables from different graphs");
    const Shape& s = g.value(p).shape();
    bool compatible = s.size() == first.size();
    for (std::size_t d = 0; compatible && d < s.size(); ++d) compatible = d == axis || s[d] == first[d];
    if (!compatible) throw ShapeError("concat: incompatible shapes " + shape_string(first) + " and " + shape_string(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_stride = out_shape[axis] * inner;

  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor<T>& src = g.value(p);
    const std::size_t chunk = src.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data().begin() + o * chunk, chunk, out.data().begin() + o * out_stride + offset);
    }
    offsets.push_back(offset);
    offset += chunk;
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return g.record("concat", std::move(out), parts, [inputs, offsets, outer, inner, axis, out_stride](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!g.needs_grad(inputs[i])) continue;
      auto gi = g.grad(inputs[i]);
      const std::size_t chunk = g.value(inputs[i]).shape()[axis] * inner;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < chunk; ++j) gi[o * chunk + j] += gs[o * out_stride + offsets[i] + j];
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& A = g.value(a);
  if (A.rank() != 2 || count == 0 || begin + count > A.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_string(A.shape()));
  }
  const std::size_t cols = A.cols();
  Tensor<T> out(Shape{count, cols});
  std::copy_n(A.data().begin() + begin * cols, count * cols, out.data().begin());
  return g.record("slice_rows", std::move(out), {a}, [a, begin, count, cols](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    auto ga = g.grad(a);
    for (std::size_t i = 0; i < count * cols; ++i) ga[begin * cols + i] += gs[i];
  });
}

template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& A = g.value(a);
  if (A.rank() != 2) throw ShapeError("gather_rows: expected a matrix, got " + shape_string(A.shape()));
  if (rows.empty()) throw ShapeError("gather_rows: empty row list");
  const std::size_t cols = A.cols();
  Tensor<T> out(Shape{rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= A.rows()) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(A.data().begin() + rows[i] * cols, cols, out.data().begin() + i * cols);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return g.record("gather_rows", std::move(out), {a}, [a, idx = std::move(idx), cols](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    auto ga = g.grad(a);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) ga[idx[i] * cols + c] += gs[i * cols + c];
  });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const TokenId> ids) {
  Graph<T>& g = *table.graph;
  const Tensor<T>& E = g.value(table);
  if (E.rank() != 2) throw ShapeError("embedding: table must be a matrix, got " + shape_string(E.shape()));
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  const std::size_t d = E.cols();
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= E.rows()) {
      throw VocabularyError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " + std::to_string(E.rows()));
    }
    std::copy_n(E.data().begin() + static_cast<std::size_t>(ids[i]) * d, d, out.data().begin() + i * d);
  }
  std::vector<TokenId> idx(ids.begin(), ids.end());
  return g.record("embedding", std::move(out), {table}, [table, idx = std::move(idx), d](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    auto gt = g.grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gt[static_cast<std::size_t>(idx[i]) * d + c] += gs[i * d + c];
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Graph<T>& g = graph_of({x, gamma, beta});
  const Tensor<T>& X = g.value(x);
  const std::size_t d = X.cols();
  if (d == 0) throw ShapeError("layer_norm: empty last axis");
  if (g.value(gamma).size() != d || g.value(beta).size() != d) {
    throw ShapeError("layer_norm: gain/shift must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = X.rows();
  Tensor<T> out(X.shape());
  AlignedVector<T> xhat(X.size());
  AlignedVector<T> rstd(rows);
  const auto gm = g.value(gamma).data();
  const auto bt = g.value(beta).data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = X.data().data() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * rstd[r];
      xhat[r * d + c] = h;
      out[r * d + c] = h * gm[c] + bt[c];
    }
  }
  return g.record("layer_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), d, rows](Graph<T>& g, Var<T> self) {
                    auto gs = g.grad(self);
                    const auto gm = g.value(gamma).data();
                    if (g.needs_grad(gamma) || g.needs_grad(beta)) {
                      std::span<T> ggm = g.needs_grad(gamma) ? g.grad(gamma) : std::span<T>{};
                      std::span<T> gbt = g.needs_grad(beta) ? g.grad(beta) : std::span<T>{};
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < d; ++c) {
                          if (!ggm.empty()) ggm[c] += gs[r * d + c] * xhat[r * d + c];
                          if (!gbt.empty()) gbt[c] += gs[r * d + c];
                        }
                    }
                    if (!g.needs_grad(x)) return;
                    auto gx = g.grad(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T mean_dy = 0;
                      T mean_dy_xhat = 0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const T dy = gs[r * d + c] * gm[c];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat[r * d + c];
                      }
                      mean_dy /= static_cast<T>(d);
                      mean_dy_xhat /= static_cast<T>(d);
                      for (std::size_t c = 0; c < d; ++c) {
                        const T dy = gs[r * d + c] * gm[c];
                        gx[r * d + c] += rstd[r] * (dy - mean_dy - xhat[r * d + c] * mean_dy_xhat);
                      }
                    }
                  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& X = g.value(x);
  Tensor<T> out(X.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = T(0.5) * X[i] * (T(1) + std::erf(X[i] * inv_sqrt2));
  return g.record("gelu", std::move(out), {x}, [x, inv_sqrt2](Graph<T>& g, Var<T> self) {
    const Tensor<T>& X = g.value(x);
    auto gs = g.grad(self);
    auto gx = g.grad(x);
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    for (std::size_t i = 0; i < X.size(); ++i) {
      const T v = X[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      gx[i] += gs[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> dropout(Var<T> x, T p, bool training, Rng& rng) {
  if (!(p >= T(0) && p < T(1))) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == T(0)) return x;
  Graph<T>& g = *x.graph;
  const Tensor<T>& X = g.value(x);
  const T keep_scale = T(1) / (T(1) - p);
  AlignedVector<T> mask(X.size());
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    mask[i] = rng.uniform() < static_cast<double>(p) ? T(0) : keep_scale;
    out[i] = X[i] * mask[i];
  }
  return g.record("dropout", std::move(out), {x}, [x, mask = std::move(mask)](Graph<T>& g, Var<T> self) {
    auto gs = g.grad(self);
    auto gx = g.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gs[i] * mask[i];
  });
}

template <typename T>
bool softmax_row(const T* logits, const std::uint8_t* allowed, std::size_t n, T* out) {
  T max_logit = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed && !allowed[j]) continue;
    any = true;
    max_logit = std::max(max_logit, logits[j]);
  }
  if (!any) return false;
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed && !allowed[j]) {
      out[j] = T(0);
      continue;
    }
    out[j] = std::exp(logits[j] - max_logit);
    total += out[j];
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  return true;
}

template <typename T>
Var<T> masked_softmax(Var<T> logits, std::span<const std::uint8_t> allowed) {
  Graph<T>& g = *logits.graph;
  const Tensor<T>& L = g.value(logits);
  if (!allowed.empty() && allowed.size() != L.size()) {
    throw ShapeError("masked_softmax: mask has " + std::to_string(allowed.size()) + " entries for logits " +
                     shape_string(L.shape()));
  }
  const std::size_t n = L.cols();
  Tensor<T> out(L.shape());
  for (std::size_t r = 0; r < L.rows(); ++r) {
    const std::uint8_t* row_mask = allowed.empty() ? nullptr : allowed.data() + r * n;
    if (!softmax_row(L.data().data() + r * n, row_mask, n, out.data().data() + r * n)) {
      throw InputError("masked_softmax: row " + std::to_string(r) + " has every position masked");
    }
  }
  return g.record("masked_softmax", std::move(out), {logits}, [logits, n](Graph<T>& g, Var<T> self) {
    const Tensor<T>& P = g.value(self);
    auto gs = g.grad(self);
    auto gl = g.grad(logits);
    for (std::size_t r = 0; r < P.rows(); ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gs[r * n + j] * P[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gl[r * n + j] += P[r * n + j] * (gs[r * n + j] - dot);
    }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const TokenId> targets, TokenId pad_id) {
  Graph<T>& g = *logits.graph;
  const Tensor<T>& L = g.value(logits);
  const std::size_t V = L.cols();
  if (targets.size() != L.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_string(L.shape()));
  }
  std::size_t count = 0;
  for (TokenId t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw VocabularyError("cross_entropy: target id " + std::to_string(t) + " outside [0, " + std::to_string(V) + ")");
    }
    ++count;
  }
  if (count == 0) throw InputError("cross_entropy: every target position is padding");

  AlignedVector<T> probs(L.size(), T(0));
  double total = 0;
  for (std::size_t r = 0; r < L.rows(); ++r) {
    if (targets[r] == pad_id) continue;
    const T* row = L.data().data() + r * V;
    softmax_row<T>(row, nullptr, V, probs.data() + r * V);
    T max_logit = *std::max_element(row, row + V);
    T sum_exp = 0;
    for (std::size_t j = 0; j < V; ++j) sum_exp += std::exp(row[j] - max_logit);
    total += static_cast<double>(max_logit + std::log(sum_exp) - row[targets[r]]);
  }
  const T inv_count = T(1) / static_cast<T>(count);
  Tensor<T> out(Shape{1}, static_cast<T>(total) * inv_count);
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  return g.record("cross_entropy", std::move(out), {logits},
                  [logits, probs = std::move(probs), tgt = std::move(tgt), pad_id, V, inv_count](Graph<T>& g, Var<T> self) {
                    const T gs = g.grad(self)[0] * inv_count;
                    auto gl = g.grad(logits);
                    for (std::size_t r = 0; r < tgt.size(); ++r) {
                      if (tgt[r] == pad_id) continue;
                      for (std::size_t j = 0; j < V; ++j) gl[r * V + j] += gs * probs[r * V + j];
                      gl[r * V + static_cast<std::size_t>(tgt[r])] -= gs;
                    }
                  });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionLayout& layout) {
  Graph<T>& g = graph_of({q, k, v});
  const Tensor<T>& Q = g.value(q);
  const Tensor<T>& K = g.value(k);
  const Tensor<T>& Vt = g.value(v);
  const std::size_t d = Q.cols();
  if (Q.rank() != 2 || K.rank() != 2 || Vt.rank() != 2 || K.cols() != d || Vt.cols() != d) {
    throw ShapeError("attention: q/k/v must be matrices of equal width, got " + shape_string(Q.shape()) + ", " +
                     shape_string(K.shape()) + ", " + shape_string(Vt.shape()));
  }
  if (K.rows() != Vt.rows()) {
    throw ShapeError("attention: key and value lengths differ, " + std::to_string(K.rows()) + " vs " +
                     std::to_string(Vt.rows()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const T score_scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<std::uint8_t> covered(Q.rows(), 0);
  std::vector<std::size_t> prob_offsets;
  std::size_t prob_total = 0;
  for (const auto& b : layout) {
    if (b.k_len == 0) throw InputError("attention: empty key set");
    if (b.q_len == 0 || b.q_begin + b.q_len > Q.rows() || b.k_begin + b.k_len > K.rows()) {
      throw ShapeError("attention: block out of range");
    }
    if (b.causal && b.q_len != b.k_len) throw ShapeError("attention: causal block must be square");
    if (!b.allowed.empty() && b.allowed.size() != b.q_len * b.k_len) throw ShapeError("attention: mask size mismatch");
    for (std::size_t i = b.q_begin; i < b.q_begin + b.q_len; ++i) {
      if (covered[i]++) throw ShapeError("attention: query row " + std::to_string(i) + " in more than one block");
    }
    prob_offsets.push_back(prob_total);
    prob_total += heads * b.q_len * b.k_len;
  }
  for (std::size_t i = 0; i < covered.size(); ++i) {
    if (!covered[i]) throw ShapeError("attention: query row " + std::to_string(i) + " not covered by the layout");
  }

  AlignedVector<T> probs(prob_total);
  Tensor<T> out(Shape{Q.rows(), d});
  auto Qm = as_matrix(Q);
  auto Km = as_matrix(K);
  auto Vm = as_matrix(Vt);
  auto Om = as_matrix(out);
  std::vector<std::uint8_t> row_mask;
  MatrixRM<T> scores;
  for (std::size_t bi = 0; bi < layout.size(); ++bi) {
    const auto& b = layout[bi];
    const auto ql = static_cast<Eigen::Index>(b.q_len);
    const auto kl = static_cast<Eigen::Index>(b.k_len);
    row_mask.assign(b.k_len, 1);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      scores.noalias() = Qm.block(b.q_begin, col, ql, w) * Km.block(b.k_begin, col, kl, w).transpose();
      scores *= score_scale;
      MatMap<T> P(probs.data() + prob_offsets[bi] + h * b.q_len * b.k_len, ql, kl);
      for (std::size_t i = 0; i < b.q_len; ++i) {
        const std::uint8_t* mask = nullptr;
        if (b.causal || !b.allowed.empty()) {
          for (std::size_t j = 0; j < b.k_len; ++j) {
            row_mask[j] = (!b.causal || j <= i) && (b.allowed.empty() || b.allowed[i * b.k_len + j]);
          }
          mask = row_mask.data();
        }
        if (!softmax_row(scores.data() + i * b.k_len, mask, b.k_len, P.data() + i * b.k_len)) {
          throw InputError("attention: query row " + std::to_string(b.q_begin + i) + " has every key masked");
        }
      }
      Om.block(b.q_begin, col, ql, w).noalias() = P * Vm.block(b.k_begin, col, kl, w);
    }
  }

  return g.record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, heads, dh, score_scale, layout, probs = std::move(probs), prob_offsets = std::move(prob_offsets)](
          Graph<T>& g, Var<T> self) {
        const Tensor<T>& Q = g.value(q);
        const Tensor<T>& K = g.value(k);
        const Tensor<T>& Vt = g.value(v);
        const std::size_t d = Q.cols();
        auto Qm = as_matrix(Q);
        auto Km = as_matrix(K);
        auto Vm = as_matrix(Vt);
        auto dO = as_matrix(g.grad(self), Q.rows(), d);
        const bool need_q = g.needs_grad(q);
        const bool need_k = g.needs_grad(k);
        const bool need_v = g.needs_grad(v);
        std::span<T> gq = need_q ? g.grad(q) : std::span<T>{};
        std::span<T> gk = need_k ? g.grad(k) : std::span<T>{};
        std::span<T> gv = need_v ? g.grad(v) : std::span<T>{};
        MatrixRM<T> dP;
        for (std::size_t bi = 0; bi < layout.size(); ++bi) {
          const auto& b = layout[bi];
          const auto ql = static_cast<Eigen::Index>(b.q_len);
          const auto kl = static_cast<Eigen::Index>(b.k_len);
          for (std::size_t h = 0; h < heads; ++h) {
            const auto col = static_cast<Eigen::Index>(h * dh);
            const auto w = static_cast<Eigen::Index>(dh);
            ConstMatMap<T> P(probs.data() + prob_offsets[bi] + h * b.q_len * b.k_len, ql, kl);
            auto dOb = dO.block(b.q_begin, col, ql, w);
            if (need_v) as_matrix(gv, Vt.rows(), d).block(b.k_begin, col, kl, w).noalias() += P.transpose() * dOb;
            if (!need_q && !need_k) continue;
            dP.noalias() = dOb * Vm.block(b.k_begin, col, kl, w).transpose();
            // dS = P .* (dP - rowsum(dP .* P))
            for (Eigen::Index i = 0; i < ql; ++i) {
              T dot = 0;
              for (Eigen::Index j = 0; j < kl; ++j) dot += dP(i, j) * P(i, j);
              for (Eigen::Index j = 0; j < kl; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * score_scale;
            }
            if (need_q) as_matrix(gq, Q.rows(), d).block(b.q_begin, col, ql, w).noalias() += dP * Km.block(b.k_begin, col, kl, w);
            if (need_k)
              as_matrix(gk, K.rows(), d).block(b.k_begin, col, kl, w).noalias() += dP.transpose() * Qm.block(b.q_begin, col, ql, w);
          }
        }
      });
}

// ---- instantiations -------------------------------------------------------------

#define GROUNDGEN_INSTANTIATE_OPS(T)                                                                   \
  template class Graph<T>;                                                                             \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                           \
  template Var<T> matmul_transposed<T>(Var<T>, Var<T>);                                                \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                                   \
  template Var<T> transpose<T>(Var<T>);                                                                \
  template Var<T> reshape<T>(Var<T>, Shape);                                                           \
  template Var<T> add<T>(Var<T>, Var<T>);                                                              \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                                         \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                              \
  template Var<T> scale<T>(Var<T>, T);                                                                 \
  template Var<T> sum<T>(Var<T>);                                                                      \
  template Var<T> concat<T>(std::span<const Var<T>>, std::size_t);                                    \
  template Var<T> slice_rows<T>(Var<T>, std::size_t, std::size_t);                                    \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                                \
  template Var<T> embedding<T>(Var<T>, std::span<const TokenId>);                                      \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                            \
  template Var<T> gelu<T>(Var<T>);                                                                     \
  template Var<T> dropout<T>(Var<T>, T, bool, Rng&);                                                   \
  template Var<T> masked_softmax<T>(Var<T>, std::span<const std::uint8_t>);                            \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const TokenId>, TokenId);                         \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, std::size_t, const AttentionLayout&);           \
  template bool softmax_row<T>(const T*, const std::uint8_t*, std::size_t, T*);

GROUNDGEN_INSTANTIATE_OPS(float)
GROUNDGEN_INSTANTIATE_OPS(double)

}  // namespace groundgen
