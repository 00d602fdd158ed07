// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense tensor with reverse-mode autodiff. Scalar type is a template
// parameter: float for training, double for finite-difference gradient
// checking. Graphs are built per training step and discarded; a graph is
// confined to one thread, while individual ops may parallelize internally.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "gemma/error.hpp"

namespace gemma {

namespace detail {
// Thread-local autodiff switch. Ops skip tape construction while disabled.
inline thread_local int no_grad_depth = 0;
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// RAII scope that disables graph construction (teacher forward, evaluation).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<T> data;
    std::vector<T> grad;  // same size as data when requires_grad, else empty
    bool requires_grad = false;
    bool consumed = false;  // backward() already ran through this node

    // tape
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void(TensorNode&)> backprop;  // adds into inputs' grads
};

// Value-semantic handle onto a shared node. Data is written only while an op
// constructs its output; afterwards tensors are read-only except grad buffers.
template <class T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(static_cast<size_t>(numel_of(t.node_->shape)), T{});
        t.node_->requires_grad = requires_grad;
        if (requires_grad) {
            t.node_->grad.assign(t.node_->data.size(), T{});
        }
        return t;
    }

    static Tensor from_data(std::vector<int64_t> shape, std::vector<T> data,
                            bool requires_grad = false) {
        if (numel_of(shape) != static_cast<int64_t>(data.size())) {
            throw ShapeError(str_cat("tensor data size ", data.size(),
                                     " does not match shape product ", numel_of(shape)));
        }
        Tensor t = zeros(std::move(shape), requires_grad);
        t.node_->data = std::move(data);
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int64_t>& shape() const { return node_->shape; }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    size_t ndim() const { return node_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }

    std::vector<T>& grad() {
        if (!node_->requires_grad) {
            throw ContractError("grad() on a tensor without requires_grad");
        }
        return node_->grad;
    }
    const std::vector<T>& grad() const { return const_cast<Tensor*>(this)->grad(); }

    bool requires_grad() const { return node_->requires_grad; }

    void zero_grad() {
        if (node_->requires_grad) {
            std::fill(node_->grad.begin(), node_->grad.end(), T{});
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

    static int64_t numel_of(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }

    // Used by op implementations: allocates the output, wires parents and the
    // backward closure. requires_grad propagates from inputs unless autodiff
    // is disabled for this thread.
    static Tensor make_op_result(std::vector<int64_t> shape, std::vector<Tensor> inputs,
                                 std::function<void(Node&)> backprop) {
        bool rg = false;
        if (grad_enabled()) {
            for (const auto& in : inputs) {
                rg = rg || in.requires_grad();
            }
        }
        Tensor out = zeros(std::move(shape), rg);
        if (rg) {
            out.node_->inputs.reserve(inputs.size());
            for (auto& in : inputs) {
                out.node_->inputs.push_back(in.node_);
            }
            out.node_->backprop = std::move(backprop);
        }
        return out;
    }

private:
    std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Topological order is derived from
// the (deterministic) graph construction order, so gradient accumulation is
// bit-reproducible. A second backward over the same graph throws.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ContractError(str_cat("backward() requires a scalar loss, got ",
                                    loss.numel(), " elements"));
    }
    auto root = loss.node();
    if (root->consumed) {
        throw ContractError("backward() called twice on the same graph");
    }
    if (!root->requires_grad) {
        return;  // nothing reachable requires grad
    }

    // iterative post-order DFS; each node visited exactly once
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorNode<T>* child = node->inputs[next].get();
            ++next;
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad.assign(1, T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* node = *it;
        if (node->backprop) {
            node->backprop(*node);
            node->backprop = nullptr;  // release saved buffers
        }
        node->consumed = true;
    }
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace gemma
