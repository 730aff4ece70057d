#pragma once

#include <cstdint>
#include <random>

#include "ssem/tensor.hpp"

namespace ssem::test {

inline nd::Tensor random_tensor(nd::Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    nd::Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

// Values bounded away from zero, for probing kinks such as relu.
inline nd::Tensor random_nonzero_tensor(nd::Shape shape, std::uint64_t seed, float min_abs = 0.05f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(min_abs, 1.0f);
    std::bernoulli_distribution sign(0.5);
    nd::Tensor t(std::move(shape));
    for (auto& v : t.data()) v = sign(rng) ? dist(rng) : -dist(rng);
    return t;
}

template <class T>
double dot(const nd::BasicTensor<T>& a, const nd::BasicTensor<T>& b) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

} // namespace ssem::test
