#pragma once

// Differentiable tensor operations used by the backbone and drop units.
//
// Layouts: feature maps are NCHW, token sequences are (B, N, D), linear
// layers act on the last axis.

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "dadrop/tensor.hpp"

namespace dadrop {

enum class OpKind : std::size_t {
    add,
    relu,
    gelu,
    conv2d,
    batch_norm,
    max_pool,
    linear,
    layer_norm,
    attention,
    to_tokens,
    add_position,
    mean_tokens,
    mean_features,
    mean_spatial,
    mask_channels,
    mask_tokens,
    scale,
    grad_reversal,
    slice_batch,
    concat_batch,
    au_loss,
    domain_head,
    count_
};

// Process-wide invocation counters, one per op kind.
class OpCounters {
public:
    static OpCounters& instance();
    void bump(OpKind kind) { counts_[static_cast<std::size_t>(kind)].fetch_add(1, std::memory_order_relaxed); }
    void reset();
    std::map<std::string, std::uint64_t> snapshot() const;
    std::uint64_t get(OpKind kind) const { return counts_[static_cast<std::size_t>(kind)].load(); }

private:
    std::array<std::atomic<std::uint64_t>, static_cast<std::size_t>(OpKind::count_)> counts_{};
};

const char* op_name(OpKind kind);

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
// tanh approximation
Tensor gelu(const Tensor& x);
Tensor scale(const Tensor& x, float factor);

// x (B,Cin,H,W), weight (Cout,Cin,k,k), optional bias (Cout).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int pad);

struct BatchNormState {
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;
};
// Per-channel normalization; batch statistics when training (and running
// statistics updated), running statistics otherwise.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad);

// x (..., in), weight (out, in), optional bias (out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);

// qkv (B, N, 3D) packed as [q | k | v]; returns softmax(qk^T/sqrt(d_h)) v per head, (B, N, D).
Tensor attention(const Tensor& qkv, int heads);

// (B,C,H,W) -> (B, H*W, C); token index is row-major over (h, w).
Tensor to_tokens(const Tensor& x);
// x (B,N,D) + pos (N,D)
Tensor add_position(const Tensor& x, const Tensor& pos);

// (B,N,D) -> (B,D)
Tensor mean_tokens(const Tensor& x);
// (B,N,D) -> (B,N)
Tensor mean_features(const Tensor& x);
// (B,C,H,W) -> (B,C)
Tensor mean_spatial(const Tensor& x);

// Multiplies x (B,C,H,W) channel-wise by constant masks (B,C).
Tensor mask_channels(const Tensor& x, std::span<const float> masks);
// Multiplies x (B,N,D) token-wise by constant masks (B,N).
Tensor mask_tokens(const Tensor& x, std::span<const float> masks);

// Identity forward; backward multiplies the upstream gradient by -lambda.
Tensor gradient_reversal(const Tensor& x, float lambda);

// Rows [begin, end) along axis 0.
Tensor slice_batch(const Tensor& x, std::int64_t begin, std::int64_t end);
Tensor concat_batch(const Tensor& a, const Tensor& b);

// Mean over the batch of per-sample summed sigmoid cross-entropy.
Tensor au_loss(const Tensor& logits, std::span<const float> labels);

// Linear 2-way domain head followed by the per-domain averaged log loss.
// pooled (B,K), weight (2,K), bias (2); domains[b] in {0,1}.
Tensor domain_head_loss(const Tensor& pooled, const Tensor& weight, const Tensor& bias,
                        std::span<const int> domains);

}  // namespace ops
}  // namespace dadrop
