#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "ssem/ndgrad.hpp"

namespace ssem::nd {

struct GradCheckReport {
    // max_i |analytic_i - numeric_i| / max(||analytic||_inf, ||numeric||_inf)
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    double gradient_scale = 0.0;
    std::size_t probes = 0;
    // Probes whose relu on/off pattern differs between x+eps and x-eps. The
    // loss is not differentiable along such a probe, so it is not compared.
    std::size_t skipped = 0;
    bool passed = false;
};

// Compares the float32 reverse-mode gradient of `build` against central
// differences of a float64 re-evaluation of the same builder. `build` is a
// generic callable (Graph<T>&, Var<T> leaf) -> Var<T> scalar loss, invoked
// with T = float and T = double. With max_probes > 0 only that many
// (seeded, randomly chosen) leaf entries are probed.
template <class T>
std::vector<bool> relu_pattern(const Graph<T>& g) {
    std::vector<bool> on;
    for (std::size_t id = 0; id < g.node_count(); ++id) {
        if (g.kind(id) != "relu") continue;
        for (T v : g.value(id).data()) on.push_back(v > T(0));
    }
    return on;
}

template <class Builder>
GradCheckReport grad_check(Builder&& build, const Tensor& leaf_value, double eps = 1e-3,
                           double tolerance = 1e-4, std::size_t max_probes = 0, std::uint64_t seed = 0) {
    Tensor analytic;
    {
        Graph<float> g;
        auto leaf = g.leaf(leaf_value);
        auto loss = build(g, leaf);
        const Var<float> wrt[] = {leaf};
        analytic = g.backward(loss, wrt).front();
    }

    std::vector<std::int64_t> indices(static_cast<std::size_t>(leaf_value.size()));
    std::iota(indices.begin(), indices.end(), std::int64_t{0});
    if (max_probes > 0 && indices.size() > max_probes) {
        std::mt19937_64 rng(seed);
        std::shuffle(indices.begin(), indices.end(), rng);
        indices.resize(max_probes);
        std::sort(indices.begin(), indices.end());
    }

    const Tensor64 base = leaf_value.cast<double>();
    auto evaluate = [&](const Tensor64& x, std::vector<bool>& pattern) {
        Graph<double> g;
        auto leaf = g.leaf(x);
        const double loss = build(g, leaf).value().item();
        pattern = relu_pattern(g);
        return loss;
    };

    std::vector<double> numeric(indices.size());
    std::vector<bool> stable(indices.size());
    std::vector<bool> pattern_plus, pattern_minus;
    for (std::size_t p = 0; p < indices.size(); ++p) {
        Tensor64 plus = base, minus = base;
        plus[indices[p]] += eps;
        minus[indices[p]] -= eps;
        numeric[p] = (evaluate(plus, pattern_plus) - evaluate(minus, pattern_minus)) / (2.0 * eps);
        stable[p] = pattern_plus == pattern_minus;
    }

    GradCheckReport report;
    report.probes = indices.size();
    double scale = 0.0;
    for (std::size_t p = 0; p < indices.size(); ++p) {
        if (!stable[p]) {
            ++report.skipped;
            continue;
        }
        scale = std::max({scale, std::abs(numeric[p]), std::abs(static_cast<double>(analytic[indices[p]]))});
    }
    report.gradient_scale = scale;
    for (std::size_t p = 0; p < indices.size(); ++p) {
        if (!stable[p]) continue;
        const double diff = std::abs(static_cast<double>(analytic[indices[p]]) - numeric[p]);
        report.max_abs_error = std::max(report.max_abs_error, diff);
    }
    report.max_rel_error = scale > 0.0 ? report.max_abs_error / scale : 0.0;
    report.passed = report.max_rel_error <= tolerance && report.skipped < report.probes;
    return report;
}

} // namespace ssem::nd
