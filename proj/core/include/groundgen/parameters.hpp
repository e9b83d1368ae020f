#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "groundgen/autodiff.hpp"
#include "groundgen/errors.hpp"
#include "groundgen/rng.hpp"
#include "groundgen/tensor.hpp"

namespace groundgen {

// Copied tensors are filled from another parameter after initialize(); they
// draw nothing from the rng, so adding them leaves every other value unchanged.
enum class ParamInit { Normal, Zeros, Ones, Copied };

using ParamId = std::size_t;

// Named, ordered collection of every learnable tensor of a model. Names are
// stable dotted paths (e.g. decoder.layer1.cross_doc.WdQ.head2); order is
// registration order, which is also the checkpoint order.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    ParamInit init = ParamInit::Normal;
  };

  ParamId add(std::string name, Shape shape, ParamInit init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    Tensor<T> t(std::move(shape));
    t.set_requires_grad(true);
    entries_.push_back(Entry{std::move(name), std::move(t), init});
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  Tensor<T>& operator[](ParamId id) { return entries_[id].tensor; }
  const Tensor<T>& operator[](ParamId id) const { return entries_[id].tensor; }
  const std::string& name(ParamId id) const { return entries_[id].name; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::optional<ParamId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto id = find(name);
    if (!id) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[*id].tensor;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto id = find(name);
    if (!id) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[*id].tensor;
  }

  // Graph nodes alias the stored tensor, so the store must outlive the graph
  // and must not gain entries while the graph is alive.
  // The graph accumulates into the tensor's grad buffer, hence the const_cast:
  // a forward never modifies parameter values.
  Var<T> bind(Graph<T>& g, ParamId id) const {
    return g.parameter(const_cast<Tensor<T>&>(entries_[id].tensor), entries_[id].name);
  }

  // Weight matrices ~ truncated normal(0, stddev), biases 0, gains 1, in
  // registration order.
  void initialize(Rng& rng, double stddev) {
    for (auto& e : entries_) {
      for (T& x : e.tensor.data()) {
        switch (e.init) {
          case ParamInit::Normal: x = static_cast<T>(rng.truncated_normal(stddev)); break;
          case ParamInit::Zeros: x = T(0); break;
          case ParamInit::Ones: x = T(1); break;
          case ParamInit::Copied: x = T(0); break;
        }
      }
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Element-wise copy of one tensor into another of identical shape.
  void copy_values(ParamId from, ParamId to) {
    if (entries_[from].tensor.shape() != entries_[to].tensor.shape()) {
      throw ShapeError("copy_values: " + entries_[from].name + " and " + entries_[to].name + " differ in shape");
    }
    auto src = entries_[from].tensor.data();
    std::copy(src.begin(), src.end(), entries_[to].tensor.data().begin());
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, ParamId> index_;
};

}  // namespace groundgen
