#pragma once

// Straightforward nested-loop reference implementations. They share no code
// with the library kernels they are compared against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace dadrop::oracle {

inline double clamp_prob(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

// Mean over samples of the per-sample label-summed binary cross-entropy.
inline double au_loss(const std::vector<double>& logits, const std::vector<double>& labels, int batch, int labels_per) {
    double total = 0.0;
    for (int b = 0; b < batch; ++b) {
        double sample = 0.0;
        for (int j = 0; j < labels_per; ++j) {
            const double z = logits[b * labels_per + j];
            const double y = labels[b * labels_per + j];
            const double p = clamp_prob(1.0 / (1.0 + std::exp(-z)));
            sample -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        }
        total += sample;
    }
    return total / batch;
}

// -1/2 * (mean log p_source over source rows + mean log p_target over target rows).
inline double domain_loss(const std::vector<double>& probs, const std::vector<int>& domains) {
    double sum[2] = {0.0, 0.0};
    int count[2] = {0, 0};
    for (std::size_t b = 0; b < domains.size(); ++b) {
        const int d = domains[b];
        sum[d] += std::log(clamp_prob(probs[2 * b + d]));
        ++count[d];
    }
    double loss = 0.0;
    for (int d = 0; d < 2; ++d) {
        if (count[d] > 0) loss -= 0.5 * sum[d] / count[d];
    }
    return loss;
}

// Channel scores: weight[d_b][c] * mean_{h,w} x[b][c][h][w].
inline std::vector<std::vector<double>> channel_scores(const std::vector<float>& x, int batch, int channels, int h,
                                                       int w, const std::vector<float>& weight,
                                                       const std::vector<int>& domains) {
    std::vector<std::vector<double>> out(batch, std::vector<double>(channels));
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < channels; ++c) {
            double m = 0.0;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) m += x[((b * channels + c) * h + i) * w + j];
            m /= h * w;
            out[b][c] = weight[domains[b] * channels + c] * m;
        }
    }
    return out;
}

// Token scores: weight[d_b][n] * mean_k x[b][n][k].
inline std::vector<std::vector<double>> token_scores(const std::vector<float>& x, int batch, int tokens, int dim,
                                                     const std::vector<float>& weight,
                                                     const std::vector<int>& domains) {
    std::vector<std::vector<double>> out(batch, std::vector<double>(tokens));
    for (int b = 0; b < batch; ++b) {
        for (int n = 0; n < tokens; ++n) {
            double m = 0.0;
            for (int k = 0; k < dim; ++k) m += x[(b * tokens + n) * dim + k];
            out[b][n] = weight[domains[b] * tokens + n] * m / dim;
        }
    }
    return out;
}

struct Confusion {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Per-label F1 from an explicit confusion matrix, 0/0 taken as 0.
inline std::vector<double> f1(const std::vector<float>& probs, const std::vector<float>& labels, int batch,
                              int labels_per, double threshold) {
    std::vector<double> out;
    for (int j = 0; j < labels_per; ++j) {
        Confusion c;
        for (int b = 0; b < batch; ++b) {
            const bool predicted = probs[b * labels_per + j] >= threshold;
            const bool actual = labels[b * labels_per + j] == 1.0f;
            if (predicted && actual) ++c.tp;
            if (predicted && !actual) ++c.fp;
            if (!predicted && actual) ++c.fn;
            if (!predicted && !actual) ++c.tn;
        }
        const double p = c.tp + c.fp == 0 ? 0.0 : double(c.tp) / double(c.tp + c.fp);
        const double r = c.tp + c.fn == 0 ? 0.0 : double(c.tp) / double(c.tp + c.fn);
        out.push_back(p + r == 0.0 ? 0.0 : 2.0 * r * p / (r + p));
    }
    return out;
}

}  // namespace dadrop::oracle
