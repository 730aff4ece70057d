#pragma once

#include <cstdint>
#include <vector>

#include "ssem/section_stack.hpp"
#include "ssem/warpfield.hpp"

namespace ssem::synth {

// Random smooth deformation: a TPS through `points` with the given (row, col)
// displacements.
struct SyntheticDeformation {
    std::int64_t image_h = 0, image_w = 0;
    std::vector<warp::Point> points;
    std::vector<warp::Point> displacements;  // (dr, dc) per point
    std::uint64_t seed = 0;
    double sigma = 0.0;

    // Dense flow evaluated on the pixel grid.
    warp::DenseFlow dense_flow() const;
    // Flow at an arbitrary position (row, col displacement).
    warp::Point flow_at(const warp::Point& p) const;
};

// k control points uniform over [0,H-1]x[0,W-1]; displacement components
// i.i.d. Normal(0, sigma²).
SyntheticDeformation random_tps_deformation(std::int64_t image_h, std::int64_t image_w, std::size_t k, double sigma,
                                            std::uint64_t seed);

// Applies the deformation as a backward warp: bilinear for raw sections,
// nearest-neighbour for labels.
nd::Tensor deform_image(const nd::Tensor& image, const SyntheticDeformation& d, SectionKind kind);
nd::Tensor deform_image(const nd::Tensor& image, const warp::DenseFlow& flow, SectionKind kind);

struct DeformedStack {
    std::vector<nd::Tensor> sections;
    std::vector<warp::DenseFlow> flows;  // applied (ground-truth) flows
    std::vector<SyntheticDeformation> deformations;
};

struct DeformStackOptions {
    double sigma = 8.0;
    std::size_t points = 16;
    std::uint64_t seed = 1;
    // Leave the first section undeformed (zero flow) so it can serve as an
    // exact reference frame.
    bool keep_first = false;
};

// Independent deformation per section; section i uses section_seed(seed, i).
DeformedStack deform_stack(const SectionStack& stack, const DeformStackOptions& opts);

std::uint64_t section_seed(std::uint64_t seed, std::size_t section);

// Flow u with u(p) + flow(p + u(p)) = 0, i.e. the warp that undoes `flow`
// when the deformed image is warped again. Fixed-point iteration with
// bilinear sampling of the flow (edge-clamped).
warp::DenseFlow invert_flow(const warp::DenseFlow& flow, int iterations = 50);

// ---- procedural test data --------------------------------------------------

struct PhantomOptions {
    double cell_size = 24.0;      // mean cell diameter in pixels
    double section_step = 3.0;    // out-of-plane distance between sections, pixels
    double membrane_width = 1.5;  // pixels
    double noise = 0.08;          // amplitude of smooth intensity noise
};

// EM-like volume: 3-D Voronoi cells with dark membranes. labels hold the
// cell ID (>= 1, consistent across sections); raw is in [0,1].
struct Phantom {
    std::vector<nd::Tensor> raw;
    std::vector<nd::Tensor> labels;
};

Phantom cell_phantom(std::int64_t h, std::int64_t w, std::size_t depth, std::uint64_t seed,
                     const PhantomOptions& opts = {});

// Single textured section.
nd::Tensor textured_image(std::int64_t h, std::int64_t w, std::uint64_t seed, const PhantomOptions& opts = {});

} // namespace ssem::synth
