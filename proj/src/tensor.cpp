#include "msfseg/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "msfseg/errors.hpp"

namespace msf::ag {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw InputError("negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

double* Node::grad_buf() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
}

Var Var::constant(Shape shape, std::vector<double> value) {
    if (numel_of(shape) != value.size())
        throw InputError("constant: value size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::zeros(Shape shape) {
    const std::size_t count = numel_of(shape);
    return constant(std::move(shape), std::vector<double>(count, 0.0));
}

Var Var::parameter(Shape shape, std::vector<double> value) {
    Var v = constant(std::move(shape), std::move(value));
    v.node()->requires_grad = true;
    return v;
}

double Var::item() const {
    if (numel() != 1) throw InputError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var make_result(Shape shape, std::vector<double> value, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (t_grad_enabled) {
        for (const Var& in : inputs)
            if (in.defined() && in.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        n->parents.reserve(inputs.size());
        for (const Var& in : inputs) n->parents.push_back(in.ptr());
        n->backward = std::move(backward_fn);
    }
    return Var(std::move(n));
}

void backward(const Var& root) {
    if (!root.defined() || !root.requires_grad()) return;
    if (root.numel() != 1) throw InputError("backward() needs a scalar root");

    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !seen.contains(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

}  // namespace msf::ag
