#pragma once

// Dense tensors and a small tape-free reverse-mode differentiation core.
// Every op returns a Var whose node remembers its parents and a closure that
// pushes the output gradient back to them; backward() walks the graph in
// reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "renalseg/errors.hpp"

namespace renalseg::nn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {
        if (shape.size() > 5) throw UsageError("tensor: rank above 5");
    }

    std::size_t size() const { return data.size(); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    /// Product of the axes after the first two (the spatial volume of an NCDHW tensor).
    std::int64_t spatial() const {
        std::int64_t v = 1;
        for (std::size_t i = 2; i < shape.size(); ++i) v *= shape[i];
        return v;
    }
    T* channel(std::int64_t n, std::int64_t c) { return data.data() + (n * shape[1] + c) * spatial(); }
    const T* channel(std::int64_t n, std::int64_t c) const { return data.data() + (n * shape[1] + c) * spatial(); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

template <class T>
struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T{});
        return grad;
    }
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool valid() const { return static_cast<bool>(node_); }

    /// Gradient buffer; zero-filled if backward never reached this node.
    std::vector<T>& grad() { return node_->ensure_grad(); }
    void zero_grad() {
        if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T{});
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

    /// Creates a result node. `fn` receives the result node and accumulates
    /// into the parents' gradients; it is dropped if no parent needs gradients.
    static Var make(Tensor<T> value, std::vector<Var> parents, std::function<void(Node<T>&)> fn) {
        Var out(std::move(value));
        bool needs = false;
        for (auto& p : parents) needs = needs || p.requires_grad();
        if (needs) {
            out.node_->requires_grad = true;
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward_fn = std::move(fn);
        }
        return out;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Back-propagates `seed` (dL/droot) through the graph rooted at `root`.
template <class T>
void backward(const Var<T>& root, const std::vector<T>& seed) {
    if (!root.requires_grad()) return;
    if (seed.size() != root.value().size()) throw UsageError("backward: seed size mismatch");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = root.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

}  // namespace renalseg::nn
