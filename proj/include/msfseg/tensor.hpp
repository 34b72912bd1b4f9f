#pragma once

// Minimal reverse-mode autodiff over dense double tensors.
//
// A Var is a shared handle to a graph node. Ops build new nodes and, when any
// input requires a gradient (and recording is enabled on this thread), attach
// a backward closure that accumulates into the inputs' grad buffers.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msf::ag {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows back
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::size_t numel() const noexcept { return value.size(); }
    /// Lazily zero-allocates the gradient buffer.
    double* grad_buf();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Shape shape, std::vector<double> value);
    static Var zeros(Shape shape);
    static Var parameter(Shape shape, std::vector<double> value);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> value() const { return node_->value; }
    std::span<double> mutable_value() { return node_->value; }
    /// Empty span when no gradient reached this node.
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    double item() const;

    Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Seeds d(root)/d(root) = 1 and runs every reachable backward closure once.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Builds an op result; the closure is dropped when no input needs a gradient.
Var make_result(Shape shape, std::vector<double> value, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn);

}  // namespace msf::ag
