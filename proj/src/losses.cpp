#include "dadrop/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dadrop/errors.hpp"

namespace dadrop::losses {

double logistic(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

LossAndGrad au_loss(std::span<const double> logits, std::span<const double> labels, int batch,
                    int num_labels, Reduction reduction) {
    const auto n = static_cast<std::size_t>(batch) * static_cast<std::size_t>(num_labels);
    if (batch < 1 || logits.size() != n || labels.size() != n) {
        throw ShapeError("au_loss: expected " + std::to_string(batch) + "x" + std::to_string(num_labels) +
                         " logits and labels");
    }
    const double norm = reduction == Reduction::batch_mean ? 1.0 / batch : 1.0;
    LossAndGrad out;
    out.grad.resize(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double y = labels[i];
        if (y != 0.0 && y != 1.0) {
            throw ConfigError("au_loss: label at flat index " + std::to_string(i) + " is not binary");
        }
        const double p_raw = logistic(logits[i]);
        const double p = std::clamp(p_raw, kProbEps, 1.0 - kProbEps);
        total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        out.grad[i] = (p_raw - y) * norm;
    }
    out.loss = total * norm;
    return out;
}

double domain_loss(std::span<const double> probs, std::span<const int> domains) {
    const std::size_t batch = domains.size();
    if (probs.size() != 2 * batch) throw ShapeError("domain_loss: probs must be (B,2)");
    double sum[2] = {0.0, 0.0};
    int count[2] = {0, 0};
    for (std::size_t b = 0; b < batch; ++b) {
        const int d = domains[b];
        if (d != 0 && d != 1) throw ConfigError("domain_loss: domain label must be 0 or 1");
        sum[d] += std::log(std::max(probs[2 * b + d], kProbEps));
        ++count[d];
    }
    double loss = 0.0;
    for (int d = 0; d < 2; ++d) {
        if (count[d] > 0) loss += sum[d] / count[d];
    }
    return -0.5 * loss;
}

std::vector<double> softmax2(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    for (std::size_t b = 0; b + 1 < logits.size(); b += 2) {
        const double m = std::max(logits[b], logits[b + 1]);
        const double e0 = std::exp(logits[b] - m);
        const double e1 = std::exp(logits[b + 1] - m);
        out[b] = e0 / (e0 + e1);
        out[b + 1] = e1 / (e0 + e1);
    }
    return out;
}

LossAndGrad domain_loss_from_logits(std::span<const double> logits, std::span<const int> domains) {
    const std::size_t batch = domains.size();
    if (logits.size() != 2 * batch) throw ShapeError("domain loss: logits must be (B,2)");
    const auto probs = softmax2(logits);
    LossAndGrad out;
    out.loss = domain_loss(probs, domains);
    int count[2] = {0, 0};
    for (int d : domains) ++count[d];
    out.grad.resize(2 * batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const int d = domains[b];
        const double w = 0.5 / count[d];
        for (int c = 0; c < 2; ++c) {
            out.grad[2 * b + c] = w * (probs[2 * b + c] - (c == d ? 1.0 : 0.0));
        }
    }
    return out;
}

DomainHeadGrads domain_head(std::span<const double> pooled, std::span<const double> weight,
                            std::span<const double> bias, std::span<const int> domains, int batch,
                            int width) {
    const auto b_n = static_cast<std::size_t>(batch);
    const auto k_n = static_cast<std::size_t>(width);
    if (pooled.size() != b_n * k_n || weight.size() != 2 * k_n || bias.size() != 2 ||
        domains.size() != b_n) {
        throw ShapeError("domain_head: width mismatch");
    }
    std::vector<double> logits(2 * b_n);
    for (std::size_t b = 0; b < b_n; ++b) {
        for (std::size_t c = 0; c < 2; ++c) {
            double z = bias[c];
            for (std::size_t k = 0; k < k_n; ++k) z += weight[c * k_n + k] * pooled[b * k_n + k];
            logits[2 * b + c] = z;
        }
    }
    const auto lg = domain_loss_from_logits(logits, domains);
    DomainHeadGrads out;
    out.loss = lg.loss;
    out.d_pooled.assign(b_n * k_n, 0.0);
    out.d_weight.assign(2 * k_n, 0.0);
    out.d_bias.assign(2, 0.0);
    for (std::size_t b = 0; b < b_n; ++b) {
        for (std::size_t c = 0; c < 2; ++c) {
            const double g = lg.grad[2 * b + c];
            out.d_bias[c] += g;
            for (std::size_t k = 0; k < k_n; ++k) {
                out.d_weight[c * k_n + k] += g * pooled[b * k_n + k];
                out.d_pooled[b * k_n + k] += g * weight[c * k_n + k];
            }
        }
    }
    return out;
}

double total_loss(double au, double cd_domain, double td_domain, double alpha, double beta) {
    return au + alpha * cd_domain + beta * td_domain;
}

}  // namespace dadrop::losses
