#include "ssem/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include "ssem/errors.hpp"

namespace ssem::metrics {

using nd::Tensor;

namespace {

void check_same_image(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": images " + nd::shape_string(a.shape()) + " and " +
                         nd::shape_string(b.shape()) + " differ");
    }
}

// Two-pass centred moments, exact for constant images.
bool centred_ncc(const std::vector<double>& x, const std::vector<double>& y, double& out) {
    const double n = static_cast<double>(x.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ma += x[i];
        mb += y[i];
    }
    ma /= n;
    mb /= n;
    double va = 0, vb = 0, cov = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double da = x[i] - ma, db = y[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    if (!(va > 0) || !(vb > 0)) return false;
    out = cov / std::sqrt(va * vb);
    return true;
}

} // namespace

double ncc(const Tensor& a, const Tensor& b, const warp::ValidityMask* mask) {
    check_same_image(a, b, "ncc");
    if (mask && mask->data.shape() != a.shape()) throw ShapeError("ncc: mask does not match the images");
    std::vector<double> x, y;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (mask && !(mask->data[i] > 0.5f)) continue;
        x.push_back(a[i]);
        y.push_back(b[i]);
    }
    if (x.size() < 2) throw InvalidResultError("ncc needs at least 2 pixels, got " + std::to_string(x.size()));
    double r = 0;
    if (!centred_ncc(x, y, r)) throw InvalidResultError("ncc is undefined for an image with zero variance");
    return r;
}

Heatmap ncc_heatmap(const Tensor& a, const Tensor& b, std::int64_t window, std::int64_t stride) {
    check_same_image(a, b, "ncc heatmap");
    if (window < 2 || stride < 1) throw Error("heatmap window must be >= 2 and stride >= 1");
    const auto h = a.dim(0), w = a.dim(1);
    if (window > h || window > w) throw ShapeError("heatmap window exceeds the image extents");
    const auto rows = (h - window) / stride + 1, cols = (w - window) / stride + 1;
    Heatmap hm;
    hm.window = window;
    hm.stride = stride;
    hm.values = Tensor({rows, cols});
    hm.valid = Tensor({rows, cols});
    std::vector<double> x, y;
    double total = 0;
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) {
            x.clear();
            y.clear();
            for (std::int64_t r = i * stride; r < i * stride + window; ++r)
                for (std::int64_t c = j * stride; c < j * stride + window; ++c) {
                    x.push_back(a.at(r, c));
                    y.push_back(b.at(r, c));
                }
            double v = 0;
            if (centred_ncc(x, y, v)) {
                hm.values.at(i, j) = static_cast<float>(v);
                hm.valid.at(i, j) = 1.0f;
                total += v;
                ++hm.valid_count;
            }
        }
    hm.mean = hm.valid_count ? total / static_cast<double>(hm.valid_count) : 0.0;
    return hm;
}

namespace {

void check_same_stack(std::span<const Tensor> a, std::span<const Tensor> b) {
    if (a.size() != b.size()) {
        throw ShapeError("label stacks have depths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    }
    for (std::size_t k = 0; k < a.size(); ++k) check_same_image(a[k], b[k], "dice");
}

} // namespace

double dice_label(std::span<const Tensor> a, std::span<const Tensor> b, float label) {
    check_same_stack(a, b);
    double na = 0, nb = 0, both = 0;
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::int64_t i = 0; i < a[k].size(); ++i) {
            const bool in_a = a[k][i] == label, in_b = b[k][i] == label;
            na += in_a;
            nb += in_b;
            both += in_a && in_b;
        }
    if (na + nb == 0) throw InvalidResultError("label " + std::to_string(label) + " is absent from both stacks");
    return 2.0 * both / (na + nb);
}

TopKDice mean_dice_top_k(std::span<const Tensor> truth, std::span<const Tensor> test, std::size_t k) {
    check_same_stack(truth, test);
    if (k == 0) throw Error("top-k Dice needs k >= 1");
    std::map<float, std::size_t> counts;
    for (const auto& s : truth)
        for (float v : s.data())
            if (v != 0.0f) ++counts[v];
    if (counts.empty()) throw InvalidResultError("ground-truth stack has no non-zero labels");
    std::vector<std::pair<float, std::size_t>> ranked(counts.begin(), counts.end());
    // Larger objects first; equal sizes by ascending label.
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    ranked.resize(std::min(k, ranked.size()));

    std::map<float, std::array<double, 3>> tally;  // truth, test, both
    for (const auto& [label, count] : ranked) tally[label] = {0, 0, 0};
    for (std::size_t s = 0; s < truth.size(); ++s)
        for (std::int64_t i = 0; i < truth[s].size(); ++i) {
            const float t = truth[s][i], u = test[s][i];
            if (auto it = tally.find(t); it != tally.end()) {
                it->second[0] += 1;
                if (u == t) it->second[2] += 1;
            }
            if (auto it = tally.find(u); it != tally.end()) it->second[1] += 1;
        }
    TopKDice out;
    double total = 0;
    for (const auto& [label, count] : ranked) {
        const auto& c = tally[label];
        const double d = 2.0 * c[2] / (c[0] + c[1]);
        out.labels.push_back(label);
        out.dice.push_back(d);
        total += d;
    }
    out.mean = total / static_cast<double>(ranked.size());
    return out;
}

double mean_endpoint_error(const warp::DenseFlow& estimate, const warp::DenseFlow& truth,
                           const warp::ValidityMask* mask) {
    estimate.validate();
    truth.validate();
    if (estimate.data.shape() != truth.data.shape()) throw ShapeError("endpoint error: flow extents differ");
    const auto h = truth.height(), w = truth.width();
    if (mask && mask->data.shape() != nd::Shape{h, w}) throw ShapeError("endpoint error: mask does not match");
    double total = 0;
    std::size_t n = 0;
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            if (mask && !(mask->data.at(r, c) > 0.5f)) continue;
            const double dr = static_cast<double>(estimate.data.at(r, c, 0)) - truth.data.at(r, c, 0);
            const double dc = static_cast<double>(estimate.data.at(r, c, 1)) - truth.data.at(r, c, 1);
            total += std::hypot(dr, dc);
            ++n;
        }
    if (n == 0) throw InvalidResultError("endpoint error over an empty mask");
    return total / static_cast<double>(n);
}

Tensor cross_section(std::span<const Tensor> stack, Axis axis, std::int64_t index) {
    if (stack.empty()) throw Error("cross section of an empty stack");
    const auto h = stack[0].dim(0), w = stack[0].dim(1);
    const auto limit = axis == Axis::row ? h : w;
    if (index < 0 || index >= limit) {
        throw Error("cross-section index " + std::to_string(index) + " outside [0, " + std::to_string(limit) + ")");
    }
    const auto depth = static_cast<std::int64_t>(stack.size());
    const auto len = axis == Axis::row ? w : h;
    Tensor out({depth, len});
    for (std::int64_t k = 0; k < depth; ++k) {
        const auto& s = stack[static_cast<std::size_t>(k)];
        if (s.rank() != 2 || s.dim(0) != h || s.dim(1) != w) throw ShapeError("stack sections differ in extents");
        for (std::int64_t i = 0; i < len; ++i) out.at(k, i) = axis == Axis::row ? s.at(index, i) : s.at(i, index);
    }
    return out;
}

} // namespace ssem::metrics
