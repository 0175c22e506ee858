#pragma once

// Channel and token drop units: a domain discriminator (GAP -> gradient
// reversal -> 2-way FC) per insertion point, sensitivity scores read off the
// discriminator's true-domain weight row, and weighted random selection of
// the units to zero.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dadrop/rng.hpp"
#include "dadrop/tensor.hpp"

namespace dadrop {

enum class Granularity { channel, token };

enum class Domain : int { source = 0, target = 1 };

inline constexpr double kScoreShiftEps = 1e-6;

struct DomainDiscriminator {
    Granularity granularity = Granularity::channel;
    int block = 1;        // 1..3
    int input_width = 0;  // C_i for channel points, N for token points
    Tensor fc_weight;     // (2, input_width); row 0 source, row 1 target
    Tensor fc_bias;       // (2)
    float grl_lambda = 0.25f;

    static DomainDiscriminator create(Granularity granularity, int block, int input_width, float grl_lambda,
                                      Rng& rng);
    // "cd1".."cd3" for channel points, "td1".."td3" for token points.
    std::string name() const;
};

// Discriminator input: (B,C,H,W) -> (B,C) channel means; (B,N,D) -> (B,N)
// per-token feature means.
Tensor gap(const Tensor& feature);
// (B,N,D) -> (B,D), mean over the token axis.
Tensor gap_sequence(const Tensor& tokens);

// Identity forward, -lambda scaled gradient backward.
Tensor grl(const Tensor& x, float lambda);

// softmax(fc(grl(gap(feature)))) without recording gradients, (B,2) row-major.
std::vector<double> domain_forward(const DomainDiscriminator& disc, const Tensor& feature);

// Differentiable per-domain averaged log loss of the discriminator. The
// backbone sees the reversed gradient; the FC layer trains normally.
Tensor domain_loss(const DomainDiscriminator& disc, const Tensor& feature, std::span<const int> domains);

// Loss over already computed probabilities (B,2).
double domain_loss(std::span<const double> probs, std::span<const int> domains);

struct ScoreVector {
    std::vector<double> scores;
    Domain domain = Domain::source;
    Granularity granularity = Granularity::channel;
};

// One score per channel/token and sample: true-domain weight row times the
// pooled sub-feature. Bias excluded; no gradient recorded.
std::vector<ScoreVector> sensitivity_scores(const DomainDiscriminator& disc, const Tensor& feature,
                                            std::span<const int> domains);

struct DropMask {
    std::vector<std::uint8_t> mask;  // 1 keep, 0 drop
    int n_dropped = 0;

    std::size_t size() const { return mask.size(); }
};

// round(gamma * K) clamped to [0, K-1].
int drop_count(double gamma, int units);

// Weighted random selection: shift scores to be positive, draw one uniform r
// per unit in index order, key = r^(1/s'), drop the drop_count() largest keys.
DropMask wrs_mask(std::span<const double> scores, double gamma, Rng& rng);

struct MaskOptions {
    bool rescale_kept = false;
    double gamma = 0.0;  // used for the 1/(1-gamma) rescale
};

// One mask per sample, applied along the channel axis of (B,C,H,W).
Tensor apply_channel_mask(const Tensor& feature, std::span<const DropMask> masks, const MaskOptions& options = {});
// One mask per sample, applied along the token axis of (B,N,D).
Tensor apply_token_mask(const Tensor& tokens, std::span<const DropMask> masks, const MaskOptions& options = {});

// Counts discriminator evaluations (loss or probability) process-wide.
std::uint64_t discriminator_forward_count();

}  // namespace dadrop
