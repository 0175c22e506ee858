#pragma once

// Shared helpers for the unit and acceptance tests: random inputs, scalar
// reductions and central finite differences.

#include <cmath>
#include <functional>
#include <vector>

#include "dadrop/ops.hpp"
#include "dadrop/rng.hpp"
#include "dadrop/tensor.hpp"

namespace dadrop::test {

inline std::vector<float> random_values(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(normal(rng, 0.0, scale));
    return v;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    return Tensor(shape, random_values(static_cast<std::size_t>(shape_numel(shape)), rng, scale));
}

inline Tensor random_parameter(const Shape& shape, Rng& rng, double scale = 1.0) {
    return Tensor::parameter(shape, random_values(static_cast<std::size_t>(shape_numel(shape)), rng, scale));
}

// sum(x * r) for a fixed r, as a differentiable scalar.
inline Tensor project(const Tensor& x, const std::vector<float>& r) {
    const auto n = x.numel();
    return ops::linear(x.reshape({1, n}), Tensor({1, n}, r), nullptr);
}

inline double project_value(const Tensor& x, const std::vector<float>& r) {
    double s = 0.0;
    const auto v = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) s += static_cast<double>(v[i]) * r[i];
    return s;
}

// Relative error ||analytic - numeric|| / max(||numeric||, floor) of the
// gradient of f with respect to every input, by central differences.
inline double gradient_error(const std::function<Tensor(std::vector<Tensor>&)>& graph, std::vector<Tensor> inputs,
                             double eps = 1e-2, double floor = 1e-3) {
    auto value = [&](std::vector<Tensor>& in) {
        NoGradGuard no_grad;
        return static_cast<double>(graph(in).item());
    };
    for (auto& t : inputs) t.zero_grad();
    graph(inputs).backward();
    double diff = 0.0, norm = 0.0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const std::vector<float> analytic(t.grad().begin(), t.grad().end());
        for (std::size_t i = 0; i < t.data().size(); ++i) {
            const float orig = t.data()[i];
            t.data()[i] = orig + static_cast<float>(eps);
            const double up = value(inputs);
            t.data()[i] = orig - static_cast<float>(eps);
            const double down = value(inputs);
            t.data()[i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            diff += (a - numeric) * (a - numeric);
            norm += numeric * numeric;
        }
    }
    return std::sqrt(diff) / std::max(std::sqrt(norm), floor);
}

}  // namespace dadrop::test
