#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include "lusoforge/core/tensor.hpp"

namespace lusoforge::ad {

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid until the graph is reset.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  std::size_t id() const noexcept { return id_; }
  Graph<T>& graph() const { return *graph_; }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of operator records. Nodes are appended in evaluation order, so the
/// tape index is a topological order; backward walks it in reverse once.
template <class T>
class Graph {
 public:
  /// Receives the gradient of the node's output and accumulates into its inputs.
  using BackwardFn = std::function<void(Graph&, const std::vector<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) {
    auto& n = nodes_.emplace_back();
    n.owned = std::move(value);
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter; its gradient accumulates straight into param.grad.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    auto& n = nodes_.emplace_back();
    n.param = &p;
    n.requires_grad = grad_enabled_ && p.requires_grad;
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Appends an operator output. The backward rule is kept only when some input
  /// needs a gradient and recording is enabled.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) needs = needs || requires_grad(in.id());
    }
    auto& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const auto& n = nodes_.at(id);
    return n.param ? n.param->value : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulator of a node, zero-initialised on first access.
  std::vector<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.param) return n.param->grad.storage();
    if (n.grad.empty()) n.grad.assign(n.owned.size(), T{});
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.size() != 1) {
      throw contract_error("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (backward_done_) throw contract_error("graph already differentiated; call reset() before reuse");
    backward_done_ = true;
    if (!requires_grad(loss.id())) return;
    grad(loss.id())[0] += T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  void reset() {
    nodes_.clear();
    param_nodes_.clear();
    backward_done_ = false;
  }

  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    std::vector<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool backward_done_ = false;
  bool grad_enabled_ = true;
};

/// Disables gradient recording for its lifetime.
template <class T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph<T>& g) : graph_(g), previous_(g.grad_enabled()) { g.set_grad_enabled(false); }
  ~NoGradGuard() { graph_.set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph<T>& graph_;
  bool previous_;
};

}  // namespace lusoforge::ad
