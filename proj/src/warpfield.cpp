#include "ssem/warpfield.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace ssem::warp {

using nd::Tensor;
using nd::Var;

std::string to_string(Interpolation interp) { return interp == Interpolation::bilinear ? "bilinear" : "tps"; }

Interpolation parse_interpolation(const std::string& text) {
    if (text == "bilinear") return Interpolation::bilinear;
    if (text == "tps") return Interpolation::tps;
    throw Error("unknown interpolation '" + text + "' (expected bilinear or tps)");
}

VectorMap VectorMap::zeros(std::int64_t grid_h, std::int64_t grid_w, std::int64_t image_h, std::int64_t image_w,
                           Interpolation interp) {
    VectorMap v{grid_h, grid_w, image_h, image_w, Tensor({grid_h, grid_w, 2}), interp};
    v.validate();
    return v;
}

void VectorMap::validate() const {
    if (grid_h < 1 || grid_w < 1 || grid_h > image_h || grid_w > image_w) {
        throw ShapeError("vector map grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                         " must be non-empty and no finer than the image " + std::to_string(image_h) + "x" +
                         std::to_string(image_w));
    }
    if (displacements.shape() != nd::Shape{grid_h, grid_w, 2}) {
        throw ShapeError("vector map displacements have shape " + nd::shape_string(displacements.shape()));
    }
    if (interpolation == Interpolation::tps && (grid_h < 2 || grid_w < 2)) {
        throw SingularSystemError("TPS vector map needs a grid of at least 2x2");
    }
    if (!displacements.all_finite()) throw NonFiniteError("vector map contains non-finite displacements");
}

double VectorMap::mean_magnitude() const {
    double acc = 0.0;
    const auto n = grid_h * grid_w;
    for (std::int64_t i = 0; i < n; ++i) acc += std::hypot(displacements[2 * i], displacements[2 * i + 1]);
    return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

DenseFlow DenseFlow::zeros(std::int64_t h, std::int64_t w) { return DenseFlow{Tensor({h, w, 2})}; }

void DenseFlow::validate() const {
    if (data.rank() != 3 || data.dim(2) != 2) throw ShapeError("dense flow must be [H,W,2], got " + nd::shape_string(data.shape()));
    if (!data.all_finite()) throw NonFiniteError("dense flow contains non-finite values");
}

std::pair<std::int64_t, std::int64_t> grid_extents_for(std::int64_t image_h, std::int64_t image_w,
                                                       std::int64_t spacing, std::int64_t minimum) {
    if (spacing < 1) throw ConfigError("grid spacing must be positive");
    auto axis = [&](std::int64_t extent) {
        return std::min(extent, std::max(minimum, (extent - 1) / spacing + 1));
    };
    return {axis(image_h), axis(image_w)};
}

double control_point_coordinate(std::int64_t index, std::int64_t grid_extent, std::int64_t image_extent) {
    if (grid_extent < 2) return 0.0;
    return static_cast<double>(index * (image_extent - 1)) / static_cast<double>(grid_extent - 1);
}

// ---- thin plate spline ----------------------------------------------------

double tps_kernel(double r) { return r > 0.0 ? r * r * std::log(r) : 0.0; }

namespace {

Eigen::MatrixXd tps_system(std::span<const Point> points) {
    const auto n = static_cast<Eigen::Index>(points.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + 3, n + 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& p = points[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& q = points[static_cast<std::size_t>(j)];
            a(i, j) = tps_kernel(std::hypot(p.row - q.row, p.col - q.col));
        }
        a(i, n) = 1.0;
        a(i, n + 1) = p.row;
        a(i, n + 2) = p.col;
        a(n, i) = 1.0;
        a(n + 1, i) = p.row;
        a(n + 2, i) = p.col;
    }
    return a;
}

Eigen::FullPivLU<Eigen::MatrixXd> factor_tps(std::span<const Point> points) {
    if (points.size() < 3) {
        throw SingularSystemError("TPS needs at least 3 points, got " + std::to_string(points.size()));
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(tps_system(points));
    if (!lu.isInvertible()) {
        throw SingularSystemError("singular TPS system: control points are collinear or duplicated");
    }
    return lu;
}

} // namespace

ThinPlateSpline tps_solve(std::span<const Point> points, std::span<const double> values) {
    if (values.size() != points.size()) {
        throw ShapeError("TPS: " + std::to_string(points.size()) + " points but " + std::to_string(values.size()) +
                         " values");
    }
    auto lu = factor_tps(points);
    const auto n = static_cast<Eigen::Index>(points.size());
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + 3);
    for (Eigen::Index i = 0; i < n; ++i) rhs(i) = values[static_cast<std::size_t>(i)];
    const Eigen::VectorXd x = lu.solve(rhs);

    ThinPlateSpline tps;
    tps.points_.assign(points.begin(), points.end());
    tps.weights_.resize(points.size());
    for (Eigen::Index i = 0; i < n; ++i) tps.weights_[static_cast<std::size_t>(i)] = x(i);
    tps.affine_ = {x(n), x(n + 1), x(n + 2)};
    return tps;
}

double ThinPlateSpline::evaluate(double row, double col) const {
    double v = affine_[0] + affine_[1] * row + affine_[2] * col;
    for (std::size_t i = 0; i < points_.size(); ++i) {
        v += weights_[i] * tps_kernel(std::hypot(row - points_[i].row, col - points_[i].col));
    }
    return v;
}

Tensor tps_interpolation_matrix(std::span<const Point> points, std::span<const Point> queries) {
    auto lu = factor_tps(points);
    const auto n = static_cast<Eigen::Index>(points.size());
    // Columns of the inverse that multiply the control values.
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, n);
    rhs.topRows(n).setIdentity();
    const Eigen::MatrixXd coeff = lu.solve(rhs);  // [n+3, n]

    const auto q = static_cast<std::int64_t>(queries.size());
    Tensor out({q, static_cast<std::int64_t>(n)});
    Eigen::VectorXd basis(n + 3);
    for (std::int64_t k = 0; k < q; ++k) {
        const auto& p = queries[static_cast<std::size_t>(k)];
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& c = points[static_cast<std::size_t>(j)];
            basis(j) = tps_kernel(std::hypot(p.row - c.row, p.col - c.col));
        }
        basis(n) = 1.0;
        basis(n + 1) = p.row;
        basis(n + 2) = p.col;
        const Eigen::RowVectorXd row = basis.transpose() * coeff;
        for (Eigen::Index j = 0; j < n; ++j) out.at(k, j) = static_cast<float>(row(j));
    }
    return out;
}

// ---- upsampling -----------------------------------------------------------

FieldUpsampler::FieldUpsampler(std::int64_t grid_h, std::int64_t grid_w, std::int64_t image_h, std::int64_t image_w,
                               Interpolation interp)
    : grid_h_(grid_h), grid_w_(grid_w), image_h_(image_h), image_w_(image_w), interp_(interp) {
    VectorMap::zeros(grid_h, grid_w, image_h, image_w, interp);  // validates geometry
    if (interp == Interpolation::tps) {
        std::vector<Point> controls, pixels;
        for (std::int64_t i = 0; i < grid_h; ++i)
            for (std::int64_t j = 0; j < grid_w; ++j)
                controls.push_back({control_point_coordinate(i, grid_h, image_h),
                                    control_point_coordinate(j, grid_w, image_w)});
        pixels.reserve(static_cast<std::size_t>(image_h * image_w));
        for (std::int64_t r = 0; r < image_h; ++r)
            for (std::int64_t c = 0; c < image_w; ++c)
                pixels.push_back({static_cast<double>(r), static_cast<double>(c)});
        tps_matrix_ = tps_interpolation_matrix(controls, pixels);
    }
}

FieldUpsampler::FieldUpsampler(const VectorMap& like)
    : FieldUpsampler(like.grid_h, like.grid_w, like.image_h, like.image_w, like.interpolation) {}

template <class T>
Var<T> FieldUpsampler::dense(const Var<T>& displacements) const {
    if (displacements.shape() != nd::Shape{grid_h_, grid_w_, 2}) {
        throw ShapeError("displacements " + nd::shape_string(displacements.shape()) + " do not match grid " +
                         std::to_string(grid_h_) + "x" + std::to_string(grid_w_));
    }
    if (interp_ == Interpolation::bilinear) {
        auto channels_first = nd::permute(displacements, {2, 0, 1});
        auto resized = nd::bilinear_resize(channels_first, image_h_, image_w_);
        return nd::permute(resized, {1, 2, 0});
    }
    auto& g = displacements.graph();
    auto flat = nd::reshape(displacements, {grid_h_ * grid_w_, 2});
    auto dense = nd::matmul(nd::lift(g, tps_matrix_), flat);
    return nd::reshape(dense, {image_h_, image_w_, 2});
}

DenseFlow FieldUpsampler::dense(const Tensor& displacements) const {
    nd::Graph<float> g;
    return DenseFlow{dense(g.constant(displacements)).value()};
}

DenseFlow upsample_field(const VectorMap& v) {
    v.validate();
    return FieldUpsampler(v).dense(v.displacements);
}

// ---- warping --------------------------------------------------------------

Tensor identity_grid(std::int64_t h, std::int64_t w) {
    Tensor grid({h, w, 2});
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            grid.at(r, c, 0) = static_cast<float>(r);
            grid.at(r, c, 1) = static_cast<float>(c);
        }
    return grid;
}

template <class T>
Var<T> warp_image(const Var<T>& image, const Var<T>& flow) {
    const auto& s = image.shape();
    if (s.size() != 3 || flow.shape() != nd::Shape{s[1], s[2], 2}) {
        throw ShapeError("warp_image: image " + nd::shape_string(s) + " and flow " + nd::shape_string(flow.shape()) +
                         " extents differ");
    }
    auto coords = nd::add(nd::lift(image.graph(), identity_grid(s[1], s[2])), flow);
    return nd::grid_sample(image, coords);
}

namespace {

Tensor as_channels(const Tensor& image) {
    if (image.rank() == 2) return image.reshaped({1, image.dim(0), image.dim(1)});
    if (image.rank() == 3) return image;
    throw ShapeError("expected a [H,W] or [C,H,W] image, got " + nd::shape_string(image.shape()));
}

void check_flow_extents(const Tensor& channels, const DenseFlow& flow) {
    flow.validate();
    if (flow.height() != channels.dim(1) || flow.width() != channels.dim(2)) {
        throw ShapeError("flow " + nd::shape_string(flow.data.shape()) + " does not match image " +
                         nd::shape_string(channels.shape()));
    }
}

} // namespace

Tensor warp_image(const Tensor& image, const DenseFlow& flow) {
    auto channels = as_channels(image);
    check_flow_extents(channels, flow);
    Tensor coords = identity_grid(channels.dim(1), channels.dim(2));
    for (std::int64_t i = 0; i < coords.size(); ++i) coords[i] += flow.data[i];
    auto out = nd::kernels::grid_sample_forward(channels, coords);
    return image.rank() == 2 ? out.reshaped(image.shape()) : out;
}

Tensor warp_image_nearest(const Tensor& image, const DenseFlow& flow) {
    auto channels = as_channels(image);
    check_flow_extents(channels, flow);
    const auto nc = channels.dim(0), h = channels.dim(1), w = channels.dim(2);
    Tensor out(channels.shape());
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            const double sr = static_cast<double>(r) + flow.data.at(r, c, 0);
            const double sc = static_cast<double>(c) + flow.data.at(r, c, 1);
            const auto ir = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(sr + 0.5)), 0, h - 1);
            const auto ic = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(sc + 0.5)), 0, w - 1);
            for (std::int64_t ch = 0; ch < nc; ++ch) out.at(ch, r, c) = channels.at(ch, ir, ic);
        }
    return image.rank() == 2 ? out.reshaped(image.shape()) : out;
}

ValidityMask empty_space_mask(const DenseFlow& flow, std::int64_t source_h, std::int64_t source_w) {
    flow.validate();
    const auto h = flow.height(), w = flow.width();
    ValidityMask mask{Tensor({h, w})};
    // Same comparisons (in float) as the sampler's out-of-bounds test.
    const float max_r = static_cast<float>(source_h - 1), max_c = static_cast<float>(source_w - 1);
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            const float sr = static_cast<float>(r) + flow.data.at(r, c, 0);
            const float sc = static_cast<float>(c) + flow.data.at(r, c, 1);
            mask.data.at(r, c) = (sr >= 0.0f && sr <= max_r && sc >= 0.0f && sc <= max_c) ? 1.0f : 0.0f;
        }
    return mask;
}

Tensor mask_to_feature_weights(const ValidityMask& mask, std::int64_t feature_h, std::int64_t feature_w) {
    const auto& m = mask.data;
    if (m.rank() != 2) throw ShapeError("validity mask must be [H,W]");
    auto resized = nd::kernels::resize_forward(m.reshaped({1, m.dim(0), m.dim(1)}), feature_h, feature_w);
    return resized.reshaped({feature_h, feature_w});
}

template Var<float> FieldUpsampler::dense(const Var<float>&) const;
template Var<double> FieldUpsampler::dense(const Var<double>&) const;
template Var<float> warp_image(const Var<float>&, const Var<float>&);
template Var<double> warp_image(const Var<double>&, const Var<double>&);

} // namespace ssem::warp
