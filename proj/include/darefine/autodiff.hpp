#ifndef DAREFINE_AUTODIFF_HPP
#define DAREFINE_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace darefine {

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a value in the reverse-mode graph.
///
/// Leaves created with `requires_grad` keep their node alive across steps and
/// are how learnable parameters are represented. Intermediate nodes are owned
/// by their children and vanish with the last handle to the output.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
    bool requires_grad() const { return node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T(0));
    }

    /// Builds an op node. `backward` is dropped when no parent needs gradients
    /// or recording is disabled, so inference keeps no intermediates alive.
    static Var make(Tensor<T> value, std::vector<Var> parents, std::function<void(Node<T>&)> backward) {
        Var out(std::move(value));
        if (!detail::grad_mode()) return out;
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (!any) return out;
        out.node_->requires_grad = true;
        out.node_->parents.reserve(parents.size());
        for (auto& p : parents) out.node_->parents.push_back(p.node_);
        out.node_->backward = std::move(backward);
        return out;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Runs reverse accumulation from a scalar output.
template <class T>
void backward(const Var<T>& root) {
    if (root.value().size() != 1) throw ConfigError("backward: root must be a scalar");
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>& n = **it;
        if (n.backward && !n.grad.empty()) n.backward(n);
    }
    // Interior grads are released; leaves keep theirs for the optimizer.
    for (Node<T>* n : order)
        if (n->backward) n->grad = Tensor<T>();
}

}  // namespace darefine

#endif
