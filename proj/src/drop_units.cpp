#include "dadrop/drop_units.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#include "dadrop/errors.hpp"
#include "dadrop/losses.hpp"
#include "dadrop/ops.hpp"

namespace dadrop {

namespace {
std::atomic<std::uint64_t> g_disc_forwards{0};

void check_width(const DomainDiscriminator& disc, const Tensor& pooled) {
    if (pooled.dim(1) != disc.input_width) {
        throw ShapeError("discriminator " + disc.name() + " expects width " + std::to_string(disc.input_width) +
                         ", feature gives " + std::to_string(pooled.dim(1)));
    }
}

void check_domains(std::span<const int> domains, std::int64_t batch) {
    if (static_cast<std::int64_t>(domains.size()) != batch) {
        throw ShapeError("domain labels: expected " + std::to_string(batch) + ", got " + std::to_string(domains.size()));
    }
    for (int d : domains) {
        if (d != 0 && d != 1) throw ConfigError("unknown domain label " + std::to_string(d));
    }
}
}  // namespace

DomainDiscriminator DomainDiscriminator::create(Granularity granularity, int block, int input_width,
                                                float grl_lambda, Rng& rng) {
    if (block < 1 || block > 3) throw ConfigError("discriminator block must be in 1..3");
    if (input_width < 1) throw ConfigError("discriminator input width must be positive");
    if (grl_lambda < 0.0f) throw ConfigError("GRL lambda must be >= 0");
    DomainDiscriminator d;
    d.granularity = granularity;
    d.block = block;
    d.input_width = input_width;
    d.grl_lambda = grl_lambda;
    const double bound = 1.0 / std::sqrt(static_cast<double>(input_width));
    std::vector<float> w(2 * static_cast<std::size_t>(input_width));
    for (auto& v : w) v = static_cast<float>((2.0 * uniform_open(rng) - 1.0) * bound);
    d.fc_weight = Tensor::parameter({2, input_width}, std::move(w));
    d.fc_bias = Tensor::parameter({2}, {0.0f, 0.0f});
    return d;
}

std::string DomainDiscriminator::name() const {
    return (granularity == Granularity::channel ? "cd" : "td") + std::to_string(block);
}

Tensor gap(const Tensor& feature) {
    if (feature.rank() == 4) return ops::mean_spatial(feature);
    if (feature.rank() == 3) return ops::mean_features(feature);
    throw ShapeError("gap: expected (B,C,H,W) or (B,N,D), got " + shape_str(feature.shape()));
}

Tensor gap_sequence(const Tensor& tokens) { return ops::mean_tokens(tokens); }

Tensor grl(const Tensor& x, float lambda) { return ops::gradient_reversal(x, lambda); }

std::vector<double> domain_forward(const DomainDiscriminator& disc, const Tensor& feature) {
    NoGradGuard no_grad;
    g_disc_forwards.fetch_add(1, std::memory_order_relaxed);
    OpCounters::instance().bump(OpKind::domain_head);
    const Tensor pooled = grl(gap(feature), disc.grl_lambda);
    check_width(disc, pooled);
    const auto batch = pooled.dim(0);
    const auto k = pooled.dim(1);
    const auto w = disc.fc_weight.data();
    const auto b = disc.fc_bias.data();
    std::vector<double> logits(2 * static_cast<std::size_t>(batch));
    for (std::int64_t i = 0; i < batch; ++i) {
        for (int c = 0; c < 2; ++c) {
            double z = b[c];
            for (std::int64_t j = 0; j < k; ++j) z += static_cast<double>(w[c * k + j]) * pooled.data()[i * k + j];
            logits[2 * i + c] = z;
        }
    }
    return losses::softmax2(logits);
}

Tensor domain_loss(const DomainDiscriminator& disc, const Tensor& feature, std::span<const int> domains) {
    g_disc_forwards.fetch_add(1, std::memory_order_relaxed);
    const Tensor pooled = gap(feature);
    check_width(disc, pooled);
    check_domains(domains, pooled.dim(0));
    return ops::domain_head_loss(grl(pooled, disc.grl_lambda), disc.fc_weight, disc.fc_bias, domains);
}

double domain_loss(std::span<const double> probs, std::span<const int> domains) {
    return losses::domain_loss(probs, domains);
}

std::vector<ScoreVector> sensitivity_scores(const DomainDiscriminator& disc, const Tensor& feature,
                                            std::span<const int> domains) {
    NoGradGuard no_grad;
    const Tensor pooled = gap(feature);
    check_width(disc, pooled);
    check_domains(domains, pooled.dim(0));
    const auto batch = pooled.dim(0);
    const auto k = pooled.dim(1);
    const auto w = disc.fc_weight.data();
    std::vector<ScoreVector> out(static_cast<std::size_t>(batch));
    for (std::int64_t i = 0; i < batch; ++i) {
        auto& sv = out[i];
        sv.domain = static_cast<Domain>(domains[i]);
        sv.granularity = disc.granularity;
        sv.scores.resize(static_cast<std::size_t>(k));
        const float* row = w.data() + domains[i] * k;
        for (std::int64_t j = 0; j < k; ++j) {
            sv.scores[j] = static_cast<double>(row[j]) * pooled.data()[i * k + j];
        }
    }
    return out;
}

int drop_count(double gamma, int units) {
    if (!(gamma >= 0.0 && gamma < 1.0)) {
        throw ConfigError("drop fraction gamma must be in [0, 1), got " + std::to_string(gamma));
    }
    if (units < 1) throw ConfigError("drop mask needs at least one unit");
    const auto n = static_cast<int>(std::lround(gamma * units));
    return std::clamp(n, 0, units - 1);
}

DropMask wrs_mask(std::span<const double> scores, double gamma, Rng& rng) {
    const int k = static_cast<int>(scores.size());
    const int n_drop = drop_count(gamma, k);
    const double min_score = *std::min_element(scores.begin(), scores.end());
    // Keys r^(1/s) compared in log space: log(r) / s.
    std::vector<double> log_keys(scores.size());
    for (int i = 0; i < k; ++i) {
        const double shifted = scores[i] - min_score + kScoreShiftEps;
        log_keys[i] = std::log(uniform_open(rng)) / shifted;
    }
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + n_drop, order.end(), [&](int a, int b) {
        return log_keys[a] > log_keys[b] || (log_keys[a] == log_keys[b] && a < b);
    });
    DropMask m;
    m.mask.assign(scores.size(), 1);
    for (int i = 0; i < n_drop; ++i) m.mask[order[i]] = 0;
    m.n_dropped = n_drop;
    return m;
}

namespace {
std::vector<float> flatten_masks(std::span<const DropMask> masks, std::int64_t batch, std::int64_t units,
                                 const MaskOptions& options, const char* what) {
    if (static_cast<std::int64_t>(masks.size()) != batch) {
        throw ShapeError(std::string(what) + ": need one mask per sample");
    }
    const float keep = options.rescale_kept ? static_cast<float>(1.0 / (1.0 - options.gamma)) : 1.0f;
    std::vector<float> flat;
    flat.reserve(static_cast<std::size_t>(batch * units));
    for (const auto& m : masks) {
        if (static_cast<std::int64_t>(m.size()) != units) {
            throw ShapeError(std::string(what) + ": mask length " + std::to_string(m.size()) + " != " +
                             std::to_string(units));
        }
        for (auto v : m.mask) flat.push_back(v ? keep : 0.0f);
    }
    return flat;
}
}  // namespace

Tensor apply_channel_mask(const Tensor& feature, std::span<const DropMask> masks, const MaskOptions& options) {
    if (feature.rank() != 4) throw ShapeError("apply_channel_mask: expected (B,C,H,W)");
    const auto flat = flatten_masks(masks, feature.dim(0), feature.dim(1), options, "apply_channel_mask");
    return ops::mask_channels(feature, flat);
}

Tensor apply_token_mask(const Tensor& tokens, std::span<const DropMask> masks, const MaskOptions& options) {
    if (tokens.rank() != 3) throw ShapeError("apply_token_mask: expected (B,N,D)");
    const auto flat = flatten_masks(masks, tokens.dim(0), tokens.dim(1), options, "apply_token_mask");
    return ops::mask_tokens(tokens, flat);
}

std::uint64_t discriminator_forward_count() { return g_disc_forwards.load(); }

}  // namespace dadrop
