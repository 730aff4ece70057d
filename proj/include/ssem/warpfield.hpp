#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssem/ndgrad.hpp"

namespace ssem::warp {

enum class Interpolation { bilinear, tps };

std::string to_string(Interpolation interp);
Interpolation parse_interpolation(const std::string& text);

// Coarse grid of (row, col) pixel displacements. Control point (i, j) sits at
// pixel (i*(H-1)/(gh-1), j*(W-1)/(gw-1)), so the grid corners coincide with
// the image corners.
struct VectorMap {
    std::int64_t grid_h = 0, grid_w = 0;
    std::int64_t image_h = 0, image_w = 0;
    nd::Tensor displacements;  // [grid_h, grid_w, 2]
    Interpolation interpolation = Interpolation::bilinear;

    static VectorMap zeros(std::int64_t grid_h, std::int64_t grid_w, std::int64_t image_h, std::int64_t image_w,
                           Interpolation interp = Interpolation::bilinear);
    void validate() const;
    // Mean Euclidean norm of the control-point displacements.
    double mean_magnitude() const;
};

// Per-pixel displacement field [H, W, 2], (row, col) order.
struct DenseFlow {
    nd::Tensor data;

    static DenseFlow zeros(std::int64_t h, std::int64_t w);
    std::int64_t height() const { return data.dim(0); }
    std::int64_t width() const { return data.dim(1); }
    void validate() const;
};

// 1 where the warped sampling position stays inside the source image.
struct ValidityMask {
    nd::Tensor data;  // [H, W]
};

// Grid extents for a given control-point spacing: one point every `spacing`
// pixels, at least `minimum` per axis, never more than the image extent.
std::pair<std::int64_t, std::int64_t> grid_extents_for(std::int64_t image_h, std::int64_t image_w,
                                                       std::int64_t spacing, std::int64_t minimum = 4);

double control_point_coordinate(std::int64_t index, std::int64_t grid_extent, std::int64_t image_extent);

struct Point {
    double row = 0.0;
    double col = 0.0;
};

// Exact (zero-smoothing) thin plate spline interpolant with kernel
// U(r) = r² log r and an affine part a0 + a1*row + a2*col.
class ThinPlateSpline {
public:
    std::span<const Point> points() const { return points_; }
    std::span<const double> radial_weights() const { return weights_; }
    const std::array<double, 3>& affine() const { return affine_; }
    double evaluate(double row, double col) const;
    double evaluate(const Point& p) const { return evaluate(p.row, p.col); }

private:
    friend ThinPlateSpline tps_solve(std::span<const Point>, std::span<const double>);
    std::vector<Point> points_;
    std::vector<double> weights_;
    std::array<double, 3> affine_{};
};

// Throws SingularSystemError for fewer than 3 points or a degenerate
// (collinear / duplicated) configuration.
ThinPlateSpline tps_solve(std::span<const Point> points, std::span<const double> values);

double tps_kernel(double r);

// Linear operator [queries, points] taking control values to TPS
// interpolated values at the query positions.
nd::Tensor tps_interpolation_matrix(std::span<const Point> points, std::span<const Point> queries);

// Upsamples coarse displacement grids of fixed geometry to dense flows. For
// the TPS tag the interpolation matrix is built once per instance.
class FieldUpsampler {
public:
    FieldUpsampler(std::int64_t grid_h, std::int64_t grid_w, std::int64_t image_h, std::int64_t image_w,
                   Interpolation interp);
    explicit FieldUpsampler(const VectorMap& like);

    DenseFlow dense(const nd::Tensor& displacements) const;
    // displacements [gh,gw,2] -> flow [H,W,2]
    template <class T>
    nd::Var<T> dense(const nd::Var<T>& displacements) const;

private:
    std::int64_t grid_h_, grid_w_, image_h_, image_w_;
    Interpolation interp_;
    nd::Tensor tps_matrix_;  // [H*W, gh*gw], empty for bilinear
};

DenseFlow upsample_field(const VectorMap& v);

// Sampling positions p + 0 for every pixel: [H, W, 2].
nd::Tensor identity_grid(std::int64_t h, std::int64_t w);

// Backward warp: output(p) = image(p + flow(p)), bilinear, 0 outside.
// image is [H,W] or [C,H,W]; the result has the same rank.
nd::Tensor warp_image(const nd::Tensor& image, const DenseFlow& flow);
template <class T>
nd::Var<T> warp_image(const nd::Var<T>& image, const nd::Var<T>& flow);

// Nearest-neighbour backward warp for label images. Sampling positions are
// clamped to the image so no new values appear.
nd::Tensor warp_image_nearest(const nd::Tensor& image, const DenseFlow& flow);

ValidityMask empty_space_mask(const DenseFlow& flow, std::int64_t source_h, std::int64_t source_w);

// Align-corners bilinear resize of the binary mask to the feature extents;
// values are soft weights in [0,1].
nd::Tensor mask_to_feature_weights(const ValidityMask& mask, std::int64_t feature_h, std::int64_t feature_w);

} // namespace ssem::warp
