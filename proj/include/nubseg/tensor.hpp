#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nubseg/common.hpp"

namespace nubseg {

// One record in the reverse-mode graph. Non-leaf nodes carry a backward
// closure that pulls the node's gradient into its parents' accumulators.
template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

    bool is_leaf() const { return !backward; }

    // Gradient accumulator, zero-initialised on first touch.
    T* grad_data() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

// Value-semantics handle onto a graph node. A Tensor without lineage is just
// a dense array; parameters are leaf tensors with requires_grad set.
template <class T>
class Tensor {
public:
    Tensor() : n_(std::make_shared<Node<T>>()) {}
    explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

    static Tensor full(Shape shape, T v) {
        auto n = std::make_shared<Node<T>>();
        n->value.assign(static_cast<std::size_t>(nubseg::numel(shape)), v);
        n->shape = std::move(shape);
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<T> values) {
        check(nubseg::numel(shape) == static_cast<std::int64_t>(values.size()),
              "tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                  shape_str(shape));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        return Tensor(std::move(n));
    }

    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t numel() const { return n_->numel(); }

    T* data() { return n_->value.data(); }
    const T* data() const { return n_->value.data(); }
    std::vector<T>& values() { return n_->value; }
    const std::vector<T>& values() const { return n_->value; }

    T item() const {
        check(numel() == 1, "item: tensor " + shape_str(shape()) + " is not scalar");
        return n_->value[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        n_->requires_grad = on;
        return *this;
    }

    const std::vector<T>& grad() const {
        n_->grad_data();
        return n_->grad;
    }

    void zero_grad() { n_->grad.assign(n_->value.size(), T(0)); }

    // Same data, no lineage.
    Tensor detached() const {
        auto n = std::make_shared<Node<T>>();
        n->shape = n_->shape;
        n->value = n_->value;
        return Tensor(std::move(n));
    }

    const std::shared_ptr<Node<T>>& node() const { return n_; }

private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
inline void assert_finite(const Node<T>& n) {
#ifndef NDEBUG
    for (T v : n.value) assert(std::isfinite(static_cast<double>(v)) && "non-finite op output");
#else
    (void)n;
#endif
}

// Allocates the result node for an op. Lineage is recorded only when grad
// mode is on and at least one parent requires it.
template <class T>
std::shared_ptr<Node<T>> make_result(Shape shape,
                                      std::vector<std::shared_ptr<Node<T>>> parents,
                                      std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value.resize(static_cast<std::size_t>(numel(shape)));
    n->shape = std::move(shape);
    if (GradMode::enabled()) {
        bool need = false;
        for (const auto& p : parents)
            if (p->requires_grad) need = true;
        if (need) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward = std::move(backward);
        }
    }
    return n;
}

}  // namespace detail

// Reverse pass from a scalar loss. Gradients accumulate into every reachable
// node; leaves keep theirs (the optimizer reads them), interior buffers are
// released as soon as they have been consumed.
template <class T>
void backward(const Tensor<T>& loss) {
    check(loss.numel() == 1,
          "backward: loss must be scalar, got " + shape_str(loss.shape()));
    const std::shared_ptr<Node<T>>& root = loss.node();
    if (!root->requires_grad) return;

    // Topological order (parents first) by iterative DFS. The order holds
    // shared ownership so nodes survive their consumers being torn down.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& top = stack.back();
        Node<T>* node = top.first.get();
        if (top.second < node->parents.size()) {
            std::shared_ptr<Node<T>> p = node->parents[top.second++];
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(std::move(top.first));
            stack.pop_back();
        }
    }

    root->grad_data();
    root->grad[0] = T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = it->get();
        if (!node->backward) continue;
        node->grad_data();
        node->backward(*node);
        // Interior activations are dead past this point.
        std::vector<T>().swap(node->value);
        std::vector<T>().swap(node->grad);
        node->backward = nullptr;
        node->parents.clear();
    }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace nubseg
