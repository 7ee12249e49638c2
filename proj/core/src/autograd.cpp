#include "xmreg/autograd.hpp"

#include <cassert>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace xmreg {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void Node::accumulate_grad(const Tensor& g) {
    if (grad.empty()) {
        grad = g;
        return;
    }
    assert(grad.same_shape(g));
    double* dst = grad.data();
    const double* src = g.data();
    for (int64_t i = 0, n = grad.numel(); i < n; ++i) dst[i] += src[i];
}

Tensor& Node::ensure_grad() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
}

Var leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>(std::move(v), requires_grad);
    return n;
}

Var constant(Tensor v) { return leaf(std::move(v), false); }

Var detach(const Var& v) { return constant(v->value); }

namespace detail {
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>(std::move(value));
    bool need = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) need = need || p->requires_grad;
    }
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}
} // namespace detail

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::logic_error("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // iterative post-order topological sort
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::unordered_map<Node*, Var> keep; // keeps shared ownership during the sweep
    std::vector<std::pair<Var, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    keep[root.get()] = root;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Var p = node->parents[idx++];
            if (p->requires_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                keep[p.get()] = p;
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(node.get());
            stack.pop_back();
        }
    }

    root->ensure_grad().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

} // namespace xmreg
