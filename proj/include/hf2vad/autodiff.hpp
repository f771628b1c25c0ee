#pragma once

// Reverse-mode automatic differentiation over float32 tensors. The graph is
// rebuilt on every forward pass; nodes own their inputs through shared
// pointers, so releasing the loss root frees the whole graph while leaf
// parameters (owned by the model) survive.

#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <vector>

#include "hf2vad/tensor.hpp"

namespace hf2vad {

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily; same shape as value
    // double-precision shadow for scalar losses; keeps finite-difference
    // probes above the float32 quantization floor
    double hi_value = std::numeric_limits<double>::quiet_NaN();
    bool requires_grad = false;
    std::vector<Value> inputs;
    // Propagates this node's grad into inputs' grads. Never captures `self`.
    std::function<void(Node&)> backward_fn;

    explicit Node(Tensor v) : value(std::move(v)) {}

    Tensor& ensure_grad() {
        if (grad.empty() && value.numel() > 0) grad = Tensor(value.shape());
        return grad;
    }
    void zero_grad() {
        if (!grad.empty()) grad.fill(0.0f);
    }
};

inline Value make_leaf(Tensor v, bool requires_grad = false) {
    auto n = std::make_shared<Node>(std::move(v));
    n->requires_grad = requires_grad;
    return n;
}

// Thread-local switch to build inference-only graphs (no inputs recorded,
// no backward closures).
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Value make_op(Tensor v, std::vector<Value> inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>(std::move(v));
    if (grad_enabled()) {
        bool any = false;
        for (const auto& in : inputs)
            if (in->requires_grad) any = true;
        if (any) {
            n->requires_grad = true;
            n->inputs = std::move(inputs);
            n->backward_fn = std::move(backward);
        }
    }
    return n;
}

// Runs reverse-mode accumulation from `root`, seeding d(root)/d(root) = 1.
// Leaf gradients accumulate; call zero_grad on parameters between steps.
inline void backward(const Value& root) {
    if (root->value.numel() != 1) throw ShapeError("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // iterative post-order topological sort
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node* next = node->inputs[idx++].get();
            if (next->requires_grad && !visited.count(next)) {
                visited.insert(next);
                stack.emplace_back(next, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.fill(1.0f);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace hf2vad
