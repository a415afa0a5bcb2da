#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fabric/nn/param_store.hpp"
#include "fabric/tensor.hpp"

namespace fabric::nn {

/// Handle to a node in a Graph.
struct Var {
    int id = -1;
    bool valid() const noexcept { return id >= 0; }
};

class Graph;
using BackwardFn = std::function<void(Graph&, int node)>;

/// Reverse-mode tape built by a single forward pass. With gradients disabled
/// the tape only holds values and records no backward closures.
class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var constant(Tensor value);
    /// Leaf bound to a ParamStore entry (no copy). The store must outlive the graph.
    Var param(const ParamStore& store, const std::string& name);
    /// Leaf that participates in differentiation without a store (used by gradient checks).
    Var input(Tensor value, bool requires_grad);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;

    /// Creates an op node. `fn` is dropped when no parent requires grad.
    Var make(Tensor value, std::vector<Var> parents, BackwardFn fn);

    /// Gradient buffer for a node, allocated as zeros on first use.
    Tensor& grad(int node);
    Tensor& grad(Var v) { return grad(v.id); }
    const std::vector<Var>& parents(int node) const { return nodes_.at(static_cast<std::size_t>(node)).parents; }

    /// Runs reverse accumulation from a scalar loss. Returns gradients for every
    /// parameter leaf in the graph; leaves not reachable from the loss get zeros.
    Grad backward(Var loss);
    /// Gradient w.r.t. an input leaf after backward().
    const Tensor& input_grad(Var v);

    std::size_t node_count() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor own;
        const Tensor* ext = nullptr;
        Tensor grad;
        std::vector<Var> parents;
        BackwardFn backward;
        bool requires_grad = false;
        std::string param_name;
    };

    Node& node(Var v);
    const Node& node(Var v) const;

    bool grad_enabled_;
    std::vector<Node> nodes_;
};

}  // namespace fabric::nn
