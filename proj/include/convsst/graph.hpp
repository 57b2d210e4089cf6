#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "convsst/tensor.hpp"

namespace convsst {

template <typename Scalar>
class Graph;

/// Handle to a value recorded on a Graph.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Tensor<Scalar>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Everything a backward closure may read or write.
template <typename Scalar>
struct BackwardArgs {
  const Tensor<Scalar>& grad;    // d loss / d output
  const Tensor<Scalar>& output;
  std::span<const Tensor<Scalar>* const> inputs;
  std::span<Tensor<Scalar>* const> input_grads;  // nullptr where no grad is needed
};

/// Define-by-run tape. Ops append nodes in execution order; `backward` walks
/// them in exact reverse order and accumulates into Parameter::grad.
///
/// A graph built with `record = false` evaluates values only and stores no
/// closures (inference and finite-difference passes).
template <typename Scalar>
class Graph {
 public:
  using BackwardFn = std::function<void(const BackwardArgs<Scalar>&)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  // Validation hook: when set, every recorded value is checked for NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }

  Var<Scalar> constant(Tensor<Scalar> value) {
    Node node;
    node.value = std::move(value);
    return push(std::move(node), "constant");
  }

  /// Leaf for a parameter. Frozen parameters and non-recording graphs see a
  /// constant; otherwise backward accumulates into `p.grad`.
  Var<Scalar> parameter(Parameter<Scalar>& p) {
    Node node;
    node.external = &p.value;
    if (record_ && p.trainable) {
      node.param = &p;
      node.requires_grad = true;
    }
    return push(std::move(node), p.name.c_str());
  }

  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn fn, const char* op = "op") {
    return record(std::move(value), std::vector<Var<Scalar>>(inputs), std::move(fn), op);
  }

  Var<Scalar> record(Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs, BackwardFn fn,
                     const char* op = "op") {
    Node node;
    node.value = std::move(value);
    if (record_) {
      for (const auto& in : inputs) {
        if (&in.graph() != this) throw Error("op inputs belong to a different graph");
        node.requires_grad = node.requires_grad || requires_grad(in.id());
      }
      if (node.requires_grad) {
        node.inputs.reserve(inputs.size());
        for (const auto& in : inputs) node.inputs.push_back(in.id());
        node.backward = std::move(fn);
      }
    }
    return push(std::move(node), op);
  }

  const Tensor<Scalar>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss. Gradients add onto whatever the
  /// parameters already hold.
  void backward(const Var<Scalar>& loss) {
    if (!record_) throw Error("backward on a non-recording graph");
    if (loss.value().size() != 1) {
      throw ShapeError("backward needs a scalar loss, got " + to_string(loss.shape()));
    }
    const std::size_t root = loss.id();
    std::vector<std::optional<Tensor<Scalar>>> grads(root + 1);
    grads[root] = Tensor<Scalar>(loss.shape(), Scalar(1));

    std::vector<const Tensor<Scalar>*> in_values;
    std::vector<Tensor<Scalar>*> in_grads;
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.requires_grad || !grads[i]) continue;
      const Tensor<Scalar>& g = *grads[i];
      if (node.param) {
        node.param->grad.array() += g.array();
      }
      if (node.backward) {
        in_values.clear();
        in_grads.clear();
        for (std::size_t in : node.inputs) {
          in_values.push_back(&value(in));
          if (nodes_[in].requires_grad) {
            if (!grads[in]) grads[in] = Tensor<Scalar>(value(in).shape());
            in_grads.push_back(&*grads[in]);
          } else {
            in_grads.push_back(nullptr);
          }
        }
        node.backward(BackwardArgs<Scalar>{g, value(i), in_values, in_grads});
      }
      grads[i].reset();
    }
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    const Tensor<Scalar>* external = nullptr;
    Parameter<Scalar>* param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var<Scalar> push(Node node, const char* op) {
    if (check_finite_) {
      const Tensor<Scalar>& v = node.external ? *node.external : node.value;
      if (!v.all_finite()) throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool record_ = true;
  bool check_finite_ = false;
};

}  // namespace convsst
