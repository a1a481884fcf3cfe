#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "iceseg/common.hpp"

namespace iceseg {

namespace detail {

template <typename T>
struct NodeT {
    Shape4 shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;

    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Whether freshly created ops record the graph. Cleared during inference so
// activations are freed as soon as the last consumer releases them.
inline thread_local bool g_grad_enabled = true;

}  // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

// Dense (N,C,H,W) float tensor participating in a reverse-mode graph.
// Value-semantic handle; the payload is shared and treated as immutable once
// written by its producing op (leaf parameters are mutated only by the
// optimizer between graph builds).
template <typename T>
class TensorT {
public:
    using Node = detail::NodeT<T>;

    TensorT() = default;

    static TensorT zeros(Shape4 s, bool requires_grad = false) {
        return filled(s, T(0), requires_grad);
    }

    static TensorT filled(Shape4 s, T v, bool requires_grad = false) {
        TensorT t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = s;
        t.node_->data.assign(static_cast<std::size_t>(s.numel()), v);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static TensorT from_data(Shape4 s, std::vector<T> data, bool requires_grad = false) {
        require(static_cast<std::int64_t>(data.size()) == s.numel(),
                "tensor data length " + std::to_string(data.size()) +
                    " does not match shape " + s.str());
        TensorT t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = s;
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape4& shape() const { return node_->shape; }
    int n() const { return node_->shape.n; }
    int c() const { return node_->shape.c; }
    int h() const { return node_->shape.h; }
    int w() const { return node_->shape.w; }
    std::int64_t numel() const { return node_->shape.numel(); }

    T* data() { return node_->data.data(); }
    const T* data() const { return node_->data.data(); }
    std::vector<T>& vec() { return node_->data; }
    const std::vector<T>& vec() const { return node_->data; }

    T& at(int in, int ic, int iy, int ix) {
        return node_->data[idx(in, ic, iy, ix)];
    }
    const T& at(int in, int ic, int iy, int ix) const {
        return node_->data[idx(in, ic, iy, ix)];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    T* grad() {
        node_->ensure_grad();
        return node_->grad.data();
    }
    const std::vector<T>& grad_vec() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        require(numel() == 1, "item() requires a single-element tensor, got " + shape().str());
        return node_->data[0];
    }

    // Copy of the values, detached from any graph.
    TensorT detach() const {
        TensorT t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        return t;
    }

    // Reverse-mode sweep from a scalar root. Grads accumulate across calls;
    // callers reset with zero_grad between optimization steps.
    void backward() const {
        require(numel() == 1, "backward() requires a scalar root, got " + shape().str());
        require(node_->requires_grad || node_->backward_fn,
                "backward() through a detached graph: root does not require grad");

        std::vector<Node*> order;
        topo_order(order);

        // Interior grads are scratch space for this sweep; only leaves
        // (parameters, inputs) accumulate across calls.
        for (Node* nd : order) {
            if (nd->backward_fn) {
                nd->ensure_grad();
                std::fill(nd->grad.begin(), nd->grad.end(), T(0));
            }
        }

        node_->ensure_grad();
        node_->grad[0] += T(1);

        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* nd = *it;
            if (nd->backward_fn) nd->backward_fn(*nd);
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

    static TensorT wrap(std::shared_ptr<Node> n) {
        TensorT t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::size_t idx(int in, int ic, int iy, int ix) const {
        const Shape4& s = node_->shape;
        return ((static_cast<std::size_t>(in) * s.c + ic) * s.h + iy) * s.w + ix;
    }

    void topo_order(std::vector<Node*>& order) const {
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [nd, next] = stack.back();
            if (next < nd->parents.size()) {
                Node* p = nd->parents[next++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(nd);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;

// Builds the output node of an op: links parents and the backward closure
// only when the graph is being recorded and some input needs gradients.
template <typename T>
TensorT<T> make_op_output(Shape4 shape, std::vector<TensorT<T>> inputs,
                          std::function<void(detail::NodeT<T>&)> backward_fn) {
    TensorT<T> out = TensorT<T>::zeros(shape);
    bool needs = false;
    for (const auto& in : inputs)
        if (in.defined() && in.requires_grad()) needs = true;
    if (needs && grad_enabled()) {
        auto node = out.node();
        node->requires_grad = true;
        for (const auto& in : inputs)
            if (in.defined()) node->parents.push_back(in.node());
        node->backward_fn = std::move(backward_fn);
    }
    return out;
}

}  // namespace iceseg
