#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "spottunet/core/tensor.hpp"

namespace spottunet::ad {

template <typename T>
class Tape;

/// Lightweight handle into a tape node.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const { return tape->value(*this); }
    const Tensor<T>& grad() const { return tape->grad_of(*this); }
};

/// Define-by-run reverse-mode tape. Node creation order is a topological
/// order, so backward() is a single reverse sweep. Intermediate values and
/// gradients are released as the sweep passes them; leaf gradients survive
/// for the optimizer.
template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        bool is_leaf = false;
        std::function<void(Tape&, Node&)> backward;
    };

    Var<T> leaf(Tensor<T> v, bool requires_grad) {
        Node nd;
        nd.value = std::move(v);
        nd.requires_grad = requires_grad;
        nd.is_leaf = true;
        nodes_.push_back(std::move(nd));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

    Var<T> make(Tensor<T> v, bool requires_grad, std::function<void(Tape&, Node&)> backward) {
        Node nd;
        nd.value = std::move(v);
        nd.requires_grad = requires_grad;
        if (requires_grad) nd.backward = std::move(backward);
        nodes_.push_back(std::move(nd));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    const Tensor<T>& value(Var<T> v) const { return node(v.id).value; }

    const Tensor<T>& grad_of(Var<T> v) const { return node(v.id).grad; }

    /// Gradient buffer of `id`, zero-allocated on first use.
    Tensor<T>& accum_grad(int id) {
        Node& nd = node(id);
        if (nd.grad.empty()) nd.grad = Tensor<T>(nd.value.shape());
        return nd.grad;
    }

    bool requires_grad(int id) const { return node(id).requires_grad; }

    /// Reverse sweep from a scalar root. When free_memory is set, values and
    /// gradients of interior nodes are dropped once consumed.
    void backward(Var<T> root, bool free_memory = true) {
        if (node(root.id).value.numel() != 1)
            throw DimensionError("backward root must be a scalar");
        accum_grad(root.id).fill(T(1));
        for (int id = root.id; id >= 0; --id) {
            Node& nd = node(id);
            if (nd.requires_grad && nd.backward && !nd.grad.empty()) nd.backward(*this, nd);
            if (free_memory && !nd.is_leaf) {
                if (id != root.id) nd.value = Tensor<T>();
                nd.grad = Tensor<T>();
                nd.backward = nullptr;
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

}  // namespace spottunet::ad
