#pragma once

// Minimal reverse-mode autograd over dense float tensors.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dadrop {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
    std::vector<float> value;
    std::vector<float> grad;  // empty until first accumulation
    Shape shape;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    // Returns a writable gradient buffer, zero-initialized on first use.
    std::vector<float>& grad_buffer();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    static Tensor parameter(Shape shape, std::vector<float> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::span<float> data() { return node_->value; }
    std::span<const float> data() const { return node_->value; }
    std::span<const float> grad() const { return node_->grad; }
    std::vector<float>& grad_buffer() { return node_->grad_buffer(); }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    float item() const;
    bool requires_grad() const { return node_->requires_grad; }

    // Shares storage-less copy: new leaf holding the same values, no history.
    Tensor detach() const;
    // Same values, new shape; differentiable.
    Tensor reshape(Shape shape) const;

    // Runs reverse-mode accumulation from this scalar.
    void backward() const;

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    static Tensor from_node(std::shared_ptr<Node> node);

private:
    std::shared_ptr<Node> node_;
};

// Global switch for graph recording on the current thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Creates an op output. When any input requires grad and recording is on,
// the output remembers its inputs and backward closure.
Tensor make_result(Shape shape, std::vector<float> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn);

}  // namespace dadrop
