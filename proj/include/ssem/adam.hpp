#pragma once

#include <cstdint>

#include "ssem/tensor.hpp"

namespace ssem {

struct AdamSettings {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMoments {
    nd::Tensor first;
    nd::Tensor second;
};

// One bias-corrected ADAM step on `param`; `step` is the 1-based step number.
// Throws NonFiniteError on a non-finite gradient.
void adam_step(AdamMoments& moments, std::int64_t step, nd::Tensor& param, const nd::Tensor& grad,
               const AdamSettings& settings);

} // namespace ssem
