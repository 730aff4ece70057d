#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ssem/warpfield.hpp"

namespace ssem::metrics {

// Pearson correlation of two same-extent images in double precision. With a
// mask, only pixels whose mask value exceeds 0.5 count; at least 2 are
// required. Zero variance throws InvalidResultError.
double ncc(const nd::Tensor& a, const nd::Tensor& b, const warp::ValidityMask* mask = nullptr);

struct Heatmap {
    nd::Tensor values;  // [rows, cols] windowed NCC, 0 where invalid
    nd::Tensor valid;   // [rows, cols] 1 where the window had non-zero variance
    std::int64_t window = 32;
    std::int64_t stride = 16;
    std::size_t valid_count = 0;
    double mean = 0.0;  // over valid windows
};

// NCC over sliding square windows at the given stride. Windows with zero
// variance in either image are flagged invalid rather than failing.
Heatmap ncc_heatmap(const nd::Tensor& a, const nd::Tensor& b, std::int64_t window = 32, std::int64_t stride = 16);

// 3-D Dice overlap of one label ID over two label stacks.
double dice_label(std::span<const nd::Tensor> a, std::span<const nd::Tensor> b, float label);

struct TopKDice {
    double mean = 0.0;
    std::vector<float> labels;  // the k largest ground-truth labels (by voxel count), label 0 excluded
    std::vector<double> dice;   // per label
};

TopKDice mean_dice_top_k(std::span<const nd::Tensor> truth, std::span<const nd::Tensor> test, std::size_t k);

// Mean Euclidean distance between two dense flows, optionally over a mask.
double mean_endpoint_error(const warp::DenseFlow& estimate, const warp::DenseFlow& truth,
                           const warp::ValidityMask* mask = nullptr);

enum class Axis { row, column };

// Orthogonal slice through a stack: fixing a row gives [depth, W], fixing a
// column gives [depth, H].
nd::Tensor cross_section(std::span<const nd::Tensor> stack, Axis axis, std::int64_t index);

} // namespace ssem::metrics
