#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dadrop/drop_units.hpp"
#include "dadrop/errors.hpp"
#include "dadrop/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dadrop;

namespace {

DomainDiscriminator make_disc(Granularity g, int width, Rng& rng, float lambda = 0.25f) {
    return DomainDiscriminator::create(g, 1, width, lambda, rng);
}

std::vector<int> random_domains(int B, Rng& rng) {
    std::vector<int> d(B);
    for (auto& v : d) v = static_cast<int>(uniform_index(rng, 2));
    return d;
}

}  // namespace

TEST_CASE("discriminator names and shapes") {
    Rng rng(1);
    auto cd = DomainDiscriminator::create(Granularity::channel, 2, 32, 0.25f, rng);
    auto td = DomainDiscriminator::create(Granularity::token, 3, 16, 0.25f, rng);
    CHECK(cd.name() == "cd2");
    CHECK(td.name() == "td3");
    CHECK(cd.fc_weight.shape() == Shape{2, 32});
    CHECK(td.fc_bias.shape() == Shape{2});
}

TEST_CASE("gap pools channels spatially and tokens over features") {
    Tensor x({1, 2, 2, 2}, std::vector<float>{1, 2, 3, 4, 10, 10, 10, 10});
    const auto g = gap(x);
    CHECK(g.shape() == Shape{1, 2});
    CHECK(g.data()[0] == doctest::Approx(2.5));
    CHECK(g.data()[1] == doctest::Approx(10.0));
    Tensor t({1, 2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    CHECK(gap(t).shape() == Shape{1, 2});
    CHECK(gap(t).data()[1] == doctest::Approx(5.0));
    CHECK(gap_sequence(t).shape() == Shape{1, 3});
    CHECK(gap_sequence(t).data()[0] == doctest::Approx(2.5));
}

TEST_CASE("domain forward of a zero discriminator is uniform") {
    Rng rng(2);
    auto disc = make_disc(Granularity::channel, 4, rng);
    std::fill(disc.fc_weight.data().begin(), disc.fc_weight.data().end(), 0.0f);
    std::fill(disc.fc_bias.data().begin(), disc.fc_bias.data().end(), 0.0f);
    const auto feature = test::random_tensor({3, 4, 2, 2}, rng);
    const auto p = domain_forward(disc, feature);
    REQUIRE(p.size() == 6);
    for (double v : p) CHECK(v == doctest::Approx(0.5));
    const std::vector<int> d{0, 1, 1};
    CHECK(domain_loss(p, d) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK(domain_loss(disc, feature, d).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("bias (0, ln 3) gives target probability 0.75") {
    Rng rng(3);
    auto disc = make_disc(Granularity::token, 5, rng);
    std::fill(disc.fc_weight.data().begin(), disc.fc_weight.data().end(), 0.0f);
    disc.fc_bias.data()[0] = 0.0f;
    disc.fc_bias.data()[1] = static_cast<float>(std::log(3.0));
    const auto p = domain_forward(disc, test::random_tensor({1, 5, 4}, rng));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("domain loss gradient reaches the feature reversed and the head unreversed") {
    Rng rng(4);
    const float lambda = 0.5f;
    auto disc = make_disc(Granularity::channel, 3, rng, lambda);
    auto feature = test::random_parameter({4, 3, 2, 2}, rng);
    const std::vector<int> d{0, 1, 0, 1};
    domain_loss(disc, feature, d).backward();

    // Analytic oracle: with p = softmax(W g + b), dL/dg_b = w_b * (p_b - onehot_b) W
    // where w_b = 1/(2 n_d); the reversal multiplies it by -lambda, and the
    // spatial mean spreads it over the 4 positions.
    std::vector<double> pooled(12);
    for (int b = 0; b < 4; ++b)
        for (int c = 0; c < 3; ++c) {
            double m = 0.0;
            for (int i = 0; i < 4; ++i) m += feature.data()[(b * 3 + c) * 4 + i];
            pooled[b * 3 + c] = m / 4.0;
        }
    const auto W = disc.fc_weight.data();
    for (int b = 0; b < 4; ++b) {
        double z[2];
        for (int k = 0; k < 2; ++k) {
            z[k] = disc.fc_bias.data()[k];
            for (int c = 0; c < 3; ++c) z[k] += W[k * 3 + c] * pooled[b * 3 + c];
        }
        const double p1 = 1.0 / (1.0 + std::exp(z[0] - z[1]));
        const double dz[2] = {0.25 * ((1.0 - p1) - (d[b] == 0)), 0.25 * (p1 - (d[b] == 1))};
        for (int c = 0; c < 3; ++c) {
            const double dg = dz[0] * W[c] + dz[1] * W[3 + c];
            for (int i = 0; i < 4; ++i) {
                CHECK(feature.grad()[(b * 3 + c) * 4 + i] == doctest::Approx(-lambda * dg / 4.0).epsilon(1e-4));
            }
        }
    }
    CHECK(disc.fc_weight.has_grad());
}

TEST_CASE("sensitivity scores match the nested-loop oracle") {
    Rng rng(5);
    for (int trial = 0; trial < 60; ++trial) {
        const int B = 1 + static_cast<int>(uniform_index(rng, 4));
        const int C = 1 + static_cast<int>(uniform_index(rng, 8));
        const int H = 1 + static_cast<int>(uniform_index(rng, 5));
        const int W = 1 + static_cast<int>(uniform_index(rng, 5));
        auto disc = make_disc(Granularity::channel, C, rng);
        const auto x = test::random_tensor({B, C, H, W}, rng);
        const auto d = random_domains(B, rng);
        const auto scores = sensitivity_scores(disc, x, d);
        const auto expected = oracle::channel_scores({x.data().begin(), x.data().end()}, B, C, H, W,
                                                     {disc.fc_weight.data().begin(), disc.fc_weight.data().end()}, d);
        REQUIRE(scores.size() == static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            CHECK(scores[b].domain == static_cast<Domain>(d[b]));
            for (int c = 0; c < C; ++c) CHECK(scores[b].scores[c] == doctest::Approx(expected[b][c]).epsilon(1e-5));
        }
    }
    for (int trial = 0; trial < 60; ++trial) {
        const int B = 1 + static_cast<int>(uniform_index(rng, 4));
        const int N = 1 + static_cast<int>(uniform_index(rng, 10));
        const int D = 1 + static_cast<int>(uniform_index(rng, 6));
        auto disc = make_disc(Granularity::token, N, rng);
        const auto x = test::random_tensor({B, N, D}, rng);
        const auto d = random_domains(B, rng);
        const auto scores = sensitivity_scores(disc, x, d);
        const auto expected = oracle::token_scores({x.data().begin(), x.data().end()}, B, N, D,
                                                   {disc.fc_weight.data().begin(), disc.fc_weight.data().end()}, d);
        for (int b = 0; b < B; ++b)
            for (int n = 0; n < N; ++n) CHECK(scores[b].scores[n] == doctest::Approx(expected[b][n]).epsilon(1e-5));
    }
}

TEST_CASE("sensitivity scores ignore the bias and record no gradient") {
    Rng rng(6);
    auto disc = make_disc(Granularity::channel, 4, rng);
    auto x = test::random_parameter({2, 4, 2, 2}, rng);
    const std::vector<int> d{0, 1};
    const auto a = sensitivity_scores(disc, x, d);
    disc.fc_bias.data()[0] += 5.0f;
    const auto b = sensitivity_scores(disc, x, d);
    for (int i = 0; i < 2; ++i) CHECK(a[i].scores == b[i].scores);
    CHECK_FALSE(x.has_grad());
}

TEST_CASE("drop count rounds and clamps") {
    CHECK(drop_count(0.33, 16) == 5);
    CHECK(drop_count(0.3, 10) == 3);
    CHECK(drop_count(0.0, 10) == 0);
    CHECK(drop_count(0.99, 4) == 3);
    CHECK(drop_count(0.5, 1) == 0);
    CHECK_THROWS_AS(drop_count(1.0, 10), ConfigError);
    CHECK_THROWS_AS(drop_count(-0.1, 10), ConfigError);
}

TEST_CASE("wrs mask drops exactly round(gamma K) units") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const int K = 1 + static_cast<int>(uniform_index(rng, 64));
        const double gamma = uniform_open(rng) * 0.95;
        std::vector<double> s(K);
        for (auto& v : s) v = normal(rng);
        const auto m = wrs_mask(s, gamma, rng);
        const int zeros = static_cast<int>(std::count(m.mask.begin(), m.mask.end(), 0));
        const int expected = std::min(static_cast<int>(std::lround(gamma * K)), K - 1);
        CHECK(zeros == expected);
        CHECK(m.n_dropped == expected);
    }
}

TEST_CASE("wrs mask is permutation-equivariant for a fixed uniform stream") {
    // Keys depend on (score, r) pairs; permuting both permutes the mask.
    Rng rng(8);
    std::vector<double> s(10);
    for (auto& v : s) v = normal(rng);
    Rng a(99);
    const auto m = wrs_mask(s, 0.3, a);
    std::vector<double> r(10);
    Rng b(99);
    for (auto& v : r) v = uniform_open(b);
    // Score ranks of the selected units: the dropped ones have the largest keys.
    std::vector<double> key(10);
    const double lo = *std::min_element(s.begin(), s.end());
    for (int i = 0; i < 10; ++i) key[i] = std::log(r[i]) / (s[i] - lo + kScoreShiftEps);
    std::vector<int> order(10);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) { return key[x] > key[y]; });
    for (int i = 0; i < 10; ++i) CHECK(m.mask[order[i]] == (i < 3 ? 0 : 1));
}

TEST_CASE("apply masks multiply whole units and optionally rescale") {
    Tensor x({2, 2, 1, 1}, std::vector<float>{1, 2, 3, 4});
    std::vector<DropMask> masks{{{1, 0}, 1}, {{0, 1}, 1}};
    const auto y = apply_channel_mask(x, masks);
    CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{1, 0, 0, 4});
    const auto z = apply_channel_mask(x, masks, {true, 0.5});
    CHECK(std::vector<float>(z.data().begin(), z.data().end()) == std::vector<float>{2, 0, 0, 8});
    Tensor t({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    std::vector<DropMask> tm{{{0, 1}, 1}};
    const auto u = apply_token_mask(t, tm);
    CHECK(std::vector<float>(u.data().begin(), u.data().end()) == std::vector<float>{0, 0, 3, 4});
    std::vector<DropMask> wrong{{{1, 1, 1}, 0}};
    CHECK_THROWS(apply_token_mask(t, wrong));
}

TEST_CASE("masked gradients vanish on dropped units") {
    Rng rng(9);
    auto x = test::random_parameter({1, 3, 2}, rng);
    std::vector<DropMask> m{{{1, 0, 1}, 1}};
    test::project(apply_token_mask(x, m), {1, 1, 1, 1, 1, 1}).backward();
    CHECK(x.grad()[2] == 0.0f);
    CHECK(x.grad()[3] == 0.0f);
    CHECK(x.grad()[0] == 1.0f);
}

TEST_CASE("domain head loss gradient w.r.t. pooled features matches central differences") {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const int B = 2 + static_cast<int>(uniform_index(rng, 5)), K = 1 + static_cast<int>(uniform_index(rng, 8));
        auto pooled = test::random_parameter({B, K}, rng);
        auto w = test::random_parameter({2, K}, rng);
        auto bias = test::random_parameter({2}, rng);
        const auto d = random_domains(B, rng);
        ops::domain_head_loss(pooled, w, bias, d).backward();
        std::vector<double> pd(pooled.data().begin(), pooled.data().end());
        const std::vector<double> wd(w.data().begin(), w.data().end()), bd(bias.data().begin(), bias.data().end());
        const double h = 1e-5;
        for (int i = 0; i < B * K; ++i) {
            auto up = pd, down = pd;
            up[i] += h;
            down[i] -= h;
            const double numeric = (losses::domain_head(up, wd, bd, d, B, K).loss -
                                    losses::domain_head(down, wd, bd, d, B, K).loss) / (2 * h);
            CHECK(std::abs(pooled.grad()[i] - numeric) <= 1e-4 * std::max(std::abs(numeric), 1e-3));
        }
    }
}
