#include "fabric/nn/graph.hpp"

#include <stdexcept>

namespace fabric::nn {

Graph::Node& Graph::node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("invalid graph var");
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("invalid graph var");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Graph::constant(Tensor value) {
    Node n;
    n.own = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(const ParamStore& store, const std::string& name) {
    Node n;
    n.ext = &store.at(name);
    n.requires_grad = grad_enabled_;
    n.param_name = name;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value, bool requires_grad) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const {
    const Node& n = node(v);
    return n.ext ? *n.ext : n.own;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Var Graph::make(Tensor value, std::vector<Var> parents, BackwardFn fn) {
    Node n;
    n.own = std::move(value);
    if (grad_enabled_) {
        for (Var p : parents) n.requires_grad = n.requires_grad || node(p).requires_grad;
    }
    if (n.requires_grad) {
        n.backward = std::move(fn);
        n.parents = std::move(parents);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

Tensor& Graph::grad(int id) {
    Node& n = node(Var{id});
    if (n.grad.shape() != value(Var{id}).shape()) n.grad = Tensor(value(Var{id}).shape());
    return n.grad;
}

Grad Graph::backward(Var loss) {
    if (!grad_enabled_) throw std::logic_error("backward on a graph built without gradients");
    if (value(loss).size() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
    }
    grad(loss.id)[0] = 1.0f;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
        n.backward(*this, i);
    }
    Grad out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.param_name.empty()) continue;
        Tensor g = n.grad.empty() ? Tensor(n.ext->shape()) : n.grad;
        auto [it, inserted] = out.emplace(n.param_name, g);
        if (!inserted) {
            for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
        }
    }
    return out;
}

const Tensor& Graph::input_grad(Var v) { return grad(v.id); }

}  // namespace fabric::nn
