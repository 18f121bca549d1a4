#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "c2t/error.hpp"
#include "c2t/rng.hpp"
#include "c2t/numerics/tensor.hpp"

namespace c2t::nn {

template <class S>
struct Parameter {
  BasicTensor<S> value;
  Buffer<S> grad;

  void zero_grad() { grad.assign(value.size(), S(0)); }
};

/// Named parameter collection. Iteration is in name order, which fixes the
/// order of initialization, optimizer updates and checkpoint records.
template <class S>
class ParamStore {
 public:
  Parameter<S>& add(const std::string& name, BasicTensor<S> value) {
    if (params_.count(name)) raise(ErrorKind::InvalidInput, "duplicate parameter " + name);
    auto& p = params_[name];
    p.value = std::move(value);
    p.value.requires_grad = true;
    p.zero_grad();
    return p;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<S>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) raise(ErrorKind::NotFound, "no parameter named " + name);
    return it->second;
  }
  const Parameter<S>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) raise(ErrorKind::NotFound, "no parameter named " + name);
    return it->second;
  }

  void erase(const std::string& name) { params_.erase(name); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Parameter<S>> params_;
};

template <class S>
class BasicGraph;

/// Handle to a node of a graph. Cheap to copy; valid while the graph lives.
template <class S>
struct BasicVar {
  BasicGraph<S>* graph = nullptr;
  std::size_t id = std::numeric_limits<std::size_t>::max();

  bool valid() const { return graph != nullptr; }
  const BasicTensor<S>& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Define-by-run tape. Each op appends a node holding its forward value and
/// a closure that pushes the node's gradient into its inputs.
template <class S>
class BasicGraph {
 public:
  using Var = BasicVar<S>;
  using Tensor = BasicTensor<S>;
  using BackwardFn = std::function<void(BasicGraph&, std::size_t)>;

  struct Node {
    Tensor value;
    Buffer<S> grad;
    std::vector<std::size_t> inputs;
    bool needs_grad = false;
    Parameter<S>* param = nullptr;
    BackwardFn backward;
    const char* op = "";
  };

  BasicGraph() = default;
  explicit BasicGraph(bool training, std::uint64_t seed = 0) : training_(training), rng_(seed) {}

  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  Var constant(Tensor value) { return leaf(std::move(value), false, nullptr, "constant"); }
  Var input(Tensor value, bool requires_grad = false) {
    return leaf(std::move(value), requires_grad, nullptr, "input");
  }
  Var param(Parameter<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Var v = leaf(p.value, true, &p, "param");
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  Var add_node(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward, const char* op) {
    if (backward_done_) raise(ErrorKind::StateError, "graph already differentiated");
    Node n;
    n.value = std::move(value);
    for (std::size_t in : inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    n.inputs = std::move(inputs);
    if (n.needs_grad) n.backward = std::move(backward);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(Var v) const { return node(v.id).value; }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer of a node, allocated on first use.
  Buffer<S>& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), S(0));
    return n.grad;
  }

  /// Gradient of a node after backward (zeros if it received none).
  Buffer<S> grad(Var v) {
    if (!backward_done_) raise(ErrorKind::StateError, "gradient requested before backward");
    return grad_of(v.id);
  }

  /// Reverse pass from a scalar node. Parameter leaves accumulate into their
  /// Parameter::grad so several graphs can contribute to one update.
  void backward(Var loss) {
    if (loss.graph != this || loss.id >= nodes_.size())
      raise(ErrorKind::StateError, "backward called before any forward on this graph");
    if (backward_done_) raise(ErrorKind::StateError, "backward already executed on this graph");
    if (nodes_[loss.id].value.size() != 1)
      raise(ErrorKind::ShapeError, "backward requires a scalar loss, got " +
                                       shape_str(nodes_[loss.id].value.shape));
    backward_done_ = true;
    grad_of(loss.id)[0] = S(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& pg = n.param->grad;
        if (pg.size() != n.grad.size()) pg.assign(n.grad.size(), S(0));
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  bool training() const { return training_; }
  Rng& rng() { return rng_; }

 private:
  Var leaf(Tensor value, bool needs_grad, Parameter<S>* p, const char* op) {
    if (backward_done_) raise(ErrorKind::StateError, "graph already differentiated");
    value.check();
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.param = p;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<const Parameter<S>*, std::size_t> param_nodes_;
  bool backward_done_ = false;
  bool training_ = false;
  Rng rng_{0};
};

template <class S>
const BasicTensor<S>& BasicVar<S>::value() const {
  return graph->node(id).value;
}

using Graph = BasicGraph<float>;
using Var = BasicVar<float>;

}  // namespace c2t::nn
