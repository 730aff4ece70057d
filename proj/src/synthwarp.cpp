#include "ssem/synthwarp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace ssem::synth {

using nd::Tensor;
using warp::DenseFlow;
using warp::Point;

namespace {

std::pair<warp::ThinPlateSpline, warp::ThinPlateSpline> component_splines(const SyntheticDeformation& d) {
    std::vector<double> dr, dc;
    for (const auto& v : d.displacements) {
        dr.push_back(v.row);
        dc.push_back(v.col);
    }
    return {warp::tps_solve(d.points, dr), warp::tps_solve(d.points, dc)};
}

} // namespace

DenseFlow SyntheticDeformation::dense_flow() const {
    auto [sr, sc] = component_splines(*this);
    DenseFlow flow = DenseFlow::zeros(image_h, image_w);
    for (std::int64_t r = 0; r < image_h; ++r)
        for (std::int64_t c = 0; c < image_w; ++c) {
            flow.data.at(r, c, 0) = static_cast<float>(sr.evaluate(static_cast<double>(r), static_cast<double>(c)));
            flow.data.at(r, c, 1) = static_cast<float>(sc.evaluate(static_cast<double>(r), static_cast<double>(c)));
        }
    return flow;
}

Point SyntheticDeformation::flow_at(const Point& p) const {
    auto [sr, sc] = component_splines(*this);
    return {sr.evaluate(p), sc.evaluate(p)};
}

SyntheticDeformation random_tps_deformation(std::int64_t image_h, std::int64_t image_w, std::size_t k, double sigma,
                                            std::uint64_t seed) {
    if (k < 3) throw Error("random TPS deformation needs at least 3 control points, got " + std::to_string(k));
    if (sigma < 0.0) throw Error("random TPS deformation sigma must be >= 0");
    if (image_h < 1 || image_w < 1) throw ShapeError("random TPS deformation on an empty image");
    SyntheticDeformation d;
    d.image_h = image_h;
    d.image_w = image_w;
    d.seed = seed;
    d.sigma = sigma;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> row(0.0, static_cast<double>(image_h - 1));
    std::uniform_real_distribution<double> col(0.0, static_cast<double>(image_w - 1));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < k; ++i) d.points.push_back({row(rng), col(rng)});
    for (std::size_t i = 0; i < k; ++i) {
        const double a = normal(rng), b = normal(rng);
        d.displacements.push_back({sigma * a, sigma * b});
    }
    return d;
}

Tensor deform_image(const Tensor& image, const DenseFlow& flow, SectionKind kind) {
    return kind == SectionKind::raw ? warp::warp_image(image, flow) : warp::warp_image_nearest(image, flow);
}

Tensor deform_image(const Tensor& image, const SyntheticDeformation& d, SectionKind kind) {
    if (image.rank() != 2 || image.dim(0) != d.image_h || image.dim(1) != d.image_w) {
        throw ShapeError("deformation for " + std::to_string(d.image_h) + "x" + std::to_string(d.image_w) +
                         " applied to image " + nd::shape_string(image.shape()));
    }
    return deform_image(image, d.dense_flow(), kind);
}

std::uint64_t section_seed(std::uint64_t seed, std::size_t section) {
    // splitmix64 finalizer over (seed, section)
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(section) + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

DeformedStack deform_stack(const SectionStack& stack, const DeformStackOptions& opts) {
    DeformedStack out;
    for (std::size_t i = 0; i < stack.depth(); ++i) {
        auto section = stack.load(i);
        auto d = random_tps_deformation(stack.height(), stack.width(), opts.points,
                                        (opts.keep_first && i == 0) ? 0.0 : opts.sigma, section_seed(opts.seed, i));
        auto flow = d.dense_flow();
        out.sections.push_back(deform_image(section, flow, stack.kind()));
        out.flows.push_back(std::move(flow));
        out.deformations.push_back(std::move(d));
    }
    return out;
}

namespace {

Point sample_flow_clamped(const DenseFlow& flow, double r, double c) {
    const auto h = flow.height(), w = flow.width();
    r = std::clamp(r, 0.0, static_cast<double>(h - 1));
    c = std::clamp(c, 0.0, static_cast<double>(w - 1));
    const auto r0 = std::min<std::int64_t>(static_cast<std::int64_t>(r), std::max<std::int64_t>(h - 2, 0));
    const auto c0 = std::min<std::int64_t>(static_cast<std::int64_t>(c), std::max<std::int64_t>(w - 2, 0));
    const auto r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
    const double fr = r - static_cast<double>(r0), fc = c - static_cast<double>(c0);
    Point p;
    for (int k = 0; k < 2; ++k) {
        const double v = (1 - fr) * (1 - fc) * flow.data.at(r0, c0, k) + (1 - fr) * fc * flow.data.at(r0, c1, k) +
                         fr * (1 - fc) * flow.data.at(r1, c0, k) + fr * fc * flow.data.at(r1, c1, k);
        (k == 0 ? p.row : p.col) = v;
    }
    return p;
}

} // namespace

DenseFlow invert_flow(const DenseFlow& flow, int iterations) {
    flow.validate();
    const auto h = flow.height(), w = flow.width();
    DenseFlow inv = DenseFlow::zeros(h, w);
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            double ur = -flow.data.at(r, c, 0), uc = -flow.data.at(r, c, 1);
            for (int it = 0; it < iterations; ++it) {
                const auto f = sample_flow_clamped(flow, static_cast<double>(r) + ur, static_cast<double>(c) + uc);
                ur = -f.row;
                uc = -f.col;
            }
            inv.data.at(r, c, 0) = static_cast<float>(ur);
            inv.data.at(r, c, 1) = static_cast<float>(uc);
        }
    return inv;
}

// ---- phantom ----------------------------------------------------------------

namespace {

struct Seed3 {
    double r, c, z;
    double brightness;
};

// Trilinearly interpolated lattice noise in [-1, 1].
class LatticeNoise {
public:
    LatticeNoise(double r0, double c0, double z0, double extent_r, double extent_c, double extent_z, double spacing,
                 std::mt19937_64& rng)
        : r0_(r0), c0_(c0), z0_(z0), spacing_(spacing) {
        nr_ = static_cast<std::int64_t>(extent_r / spacing) + 2;
        nc_ = static_cast<std::int64_t>(extent_c / spacing) + 2;
        nz_ = static_cast<std::int64_t>(extent_z / spacing) + 2;
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        values_.resize(static_cast<std::size_t>(nr_ * nc_ * nz_));
        for (auto& v : values_) v = u(rng);
    }

    double at(double r, double c, double z) const {
        const double fr = std::clamp((r - r0_) / spacing_, 0.0, static_cast<double>(nr_ - 1) - 1e-9);
        const double fc = std::clamp((c - c0_) / spacing_, 0.0, static_cast<double>(nc_ - 1) - 1e-9);
        const double fz = std::clamp((z - z0_) / spacing_, 0.0, static_cast<double>(nz_ - 1) - 1e-9);
        const auto ir = static_cast<std::int64_t>(fr), ic = static_cast<std::int64_t>(fc), iz = static_cast<std::int64_t>(fz);
        const double ar = fr - static_cast<double>(ir), ac = fc - static_cast<double>(ic), az = fz - static_cast<double>(iz);
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
            for (int dr = 0; dr < 2; ++dr)
                for (int dc = 0; dc < 2; ++dc) {
                    const double wgt = (dz ? az : 1 - az) * (dr ? ar : 1 - ar) * (dc ? ac : 1 - ac);
                    acc += wgt * value(std::min(ir + dr, nr_ - 1), std::min(ic + dc, nc_ - 1), std::min(iz + dz, nz_ - 1));
                }
        return acc;
    }

private:
    double value(std::int64_t r, std::int64_t c, std::int64_t z) const {
        return values_[static_cast<std::size_t>((z * nr_ + r) * nc_ + c)];
    }

    double r0_, c0_, z0_, spacing_;
    std::int64_t nr_ = 0, nc_ = 0, nz_ = 0;
    std::vector<double> values_;
};

} // namespace

Phantom cell_phantom(std::int64_t h, std::int64_t w, std::size_t depth, std::uint64_t seed, const PhantomOptions& opts) {
    if (h < 1 || w < 1) throw ShapeError("phantom extents must be positive");
    const double d = opts.cell_size;
    const double margin = d;
    const double z_extent = static_cast<double>(depth > 0 ? depth - 1 : 0) * opts.section_step;
    const double vr = static_cast<double>(h) + 2 * margin, vc = static_cast<double>(w) + 2 * margin;
    const double vz = z_extent + 2 * margin;
    const double density = 6.0 / (std::numbers::pi * d * d * d);
    const auto count = std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(density * vr * vc * vz)));

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ur(-margin, static_cast<double>(h) + margin);
    std::uniform_real_distribution<double> uc(-margin, static_cast<double>(w) + margin);
    std::uniform_real_distribution<double> uz(-margin, z_extent + margin);
    std::uniform_real_distribution<double> bright(0.45, 0.85);
    std::vector<Seed3> seeds(count);
    for (auto& s : seeds) s = {ur(rng), uc(rng), uz(rng), bright(rng)};
    LatticeNoise noise(-margin, -margin, -margin, vr, vc, vz, 6.0, rng);

    Phantom ph;
    for (std::size_t k = 0; k < depth; ++k) {
        const double z = static_cast<double>(k) * opts.section_step;
        Tensor raw({h, w}), labels({h, w});
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                double best = std::numeric_limits<double>::max(), second = best;
                std::size_t best_i = 0;
                for (std::size_t i = 0; i < seeds.size(); ++i) {
                    const double dr = seeds[i].r - static_cast<double>(r), dc = seeds[i].c - static_cast<double>(c);
                    const double dz = seeds[i].z - z;
                    const double dist = dr * dr + dc * dc + dz * dz;
                    if (dist < best) {
                        second = best;
                        best = dist;
                        best_i = i;
                    } else if (dist < second) {
                        second = dist;
                    }
                }
                // Half the gap between the two nearest seeds approximates the
                // distance to the separating membrane.
                const double gap = 0.5 * (std::sqrt(second) - std::sqrt(best));
                const double membrane = std::exp(-0.5 * (gap / opts.membrane_width) * (gap / opts.membrane_width));
                double v = seeds[best_i].brightness * (1.0 - 0.85 * membrane) +
                           opts.noise * noise.at(static_cast<double>(r), static_cast<double>(c), z);
                raw.at(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                labels.at(r, c) = static_cast<float>(best_i + 1);
            }
        ph.raw.push_back(std::move(raw));
        ph.labels.push_back(std::move(labels));
    }
    return ph;
}

Tensor textured_image(std::int64_t h, std::int64_t w, std::uint64_t seed, const PhantomOptions& opts) {
    return std::move(cell_phantom(h, w, 1, seed, opts).raw.front());
}

} // namespace ssem::synth
