#include "dadrop/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "dadrop/errors.hpp"

namespace dadrop {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::vector<float>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
    return grad;
}

Tensor::Tensor(Shape shape, float fill) : node_(std::make_shared<Node>()) {
    node_->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : node_(std::make_shared<Node>()) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw ShapeError("tensor values size " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    node_->value = std::move(values);
    node_->shape = std::move(shape);
}

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

Tensor Tensor::from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

float Tensor::item() const {
    if (node_->value.size() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(node_->shape));
    }
    return node_->value[0];
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value); }

Tensor Tensor::reshape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(node_->shape) + " to " + shape_str(shape));
    }
    return make_result(std::move(shape), node_->value, {*this}, [](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

void Tensor::backward() const {
    if (node_->value.size() != 1) {
        throw ShapeError("backward() requires a scalar, got " + shape_str(node_->shape));
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->grad_buffer()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Intermediate gradients are not needed after the sweep.
    for (Node* n : order) {
        if (n->backward_fn) std::vector<float>().swap(n->grad);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<float> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->inputs.reserve(inputs.size());
            for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor::from_node(std::move(node));
}

}  // namespace dadrop
