#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "xmreg/tensor.hpp"

namespace xmreg {

class Node;
/// Handle to a value in the autograd graph.
using Var = std::shared_ptr<Node>;

class Node {
public:
    Tensor value;
    Tensor grad; // allocated on first accumulation
    bool requires_grad = false;

    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Node() = default;
    explicit Node(Tensor v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

    void accumulate_grad(const Tensor& g);
    Tensor& ensure_grad();
};

/// Leaf that participates in gradient computation (a parameter or an input
/// whose gradient is wanted).
Var leaf(Tensor v, bool requires_grad = true);

/// Constant: never receives a gradient.
Var constant(Tensor v);

/// Copy of the value, cut off from the graph.
Var detach(const Var& v);

/// Whether ops currently record the graph (thread-local).
bool grad_enabled();

/// RAII guard disabling graph recording, for inference paths.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Reverse-mode sweep from a scalar root; seeds d(root)/d(root) = 1.
void backward(const Var& root);

namespace detail {
/// Builds an op node. `bw` runs with the node's grad already populated.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw);
} // namespace detail

} // namespace xmreg
