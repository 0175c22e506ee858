#pragma once

// Double-precision loss kernels. The autograd ops in ops.hpp wrap these, so
// gradient checks against finite differences run on the same code path that
// training uses.

#include <span>
#include <vector>

namespace dadrop::losses {

inline constexpr double kProbEps = 1e-7;

double logistic(double z);

enum class Reduction { batch_mean, sum };

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad;  // same layout as the differentiated input
};

// Multi-label sigmoid cross-entropy: per sample, the sum over labels of
// -[y log p + (1-y) log(1-p)], p = logistic(logit) clamped to [eps, 1-eps];
// reduced over the batch. The gradient is that of the unclamped objective,
// (p - y) / B, which coincides with the clamped one away from saturation.
// Throws ConfigError on non-binary labels.
LossAndGrad au_loss(std::span<const double> logits, std::span<const double> labels, int batch,
                    int num_labels, Reduction reduction = Reduction::batch_mean);

// Per-domain averaged log loss over true-domain probabilities:
//   -1/2 (mean_{d=0} log p_0 + mean_{d=1} log p_1)
// A domain absent from the batch contributes 0. probs is (B,2) row-major.
double domain_loss(std::span<const double> probs, std::span<const int> domains);

// Softmax over each row of (B,2) logits.
std::vector<double> softmax2(std::span<const double> logits);

// Domain loss from logits with gradient w.r.t. the logits.
LossAndGrad domain_loss_from_logits(std::span<const double> logits, std::span<const int> domains);

struct DomainHeadGrads {
    double loss = 0.0;
    std::vector<double> d_pooled;  // (B,K)
    std::vector<double> d_weight;  // (2,K)
    std::vector<double> d_bias;    // (2)
};

// logits = pooled * weight^T + bias, then domain_loss_from_logits.
DomainHeadGrads domain_head(std::span<const double> pooled, std::span<const double> weight,
                            std::span<const double> bias, std::span<const int> domains, int batch,
                            int width);

// L_total = au + alpha * cd + beta * td
double total_loss(double au, double cd_domain, double td_domain, double alpha, double beta);

}  // namespace dadrop::losses
