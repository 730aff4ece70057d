#include <cmath>
#include <memory>
#include <vector>

#include "doctest.h"

#include "ssem/stackalign.hpp"
#include "ssem/synthwarp.hpp"
#include "test_util.hpp"

using namespace ssem;
using namespace ssem::stack;
using nd::Tensor;

namespace {

// Loads phantom sections lazily and counts how many are alive at once.
struct CountingStack {
    std::vector<Tensor> images;
    std::shared_ptr<int> loads = std::make_shared<int>(0);

    SectionStack stack() const {
        SectionStack s(images.front().dim(0), images.front().dim(1), SectionKind::raw);
        for (std::size_t i = 0; i < images.size(); ++i) {
            s.add_section(static_cast<std::int64_t>(10 + 2 * i), [this, i] {
                ++*loads;
                return images[i];
            });
        }
        return s;
    }
};

AlignmentPlan quick_plan(std::size_t window) {
    AlignmentPlan plan;
    plan.window = window;
    plan.registration.similarity = reg::Similarity::pixel;
    plan.registration.iterations = 5;
    return plan;
}

} // namespace

TEST_CASE("neighbour weights") {
    CHECK(neighbor_weights(3, WeightScheme::halving) == std::vector<double>{1.0, 0.5, 0.25});
    CHECK(neighbor_weights(2, WeightScheme::uniform) == std::vector<double>{1.0, 1.0});
    CHECK(neighbor_weights(0, WeightScheme::halving).empty());
    CHECK(parse_weight_scheme("uniform") == WeightScheme::uniform);
    CHECK_THROWS_AS(parse_weight_scheme("gaussian"), Error);
}

TEST_CASE("zero map resampling is the identity for both modes") {
    auto img = synth::textured_image(32, 32, 1);
    auto v = warp::VectorMap::zeros(4, 4, 32, 32);
    CHECK(resample_section(img, SectionKind::raw, v, Resampling::bilinear) == img);
    CHECK(resample_section(img, SectionKind::raw, v, Resampling::nearest) == img);
}

TEST_CASE("labels cannot be resampled bilinearly") {
    auto v = warp::VectorMap::zeros(4, 4, 16, 16);
    CHECK_THROWS_AS(resample_section(Tensor({16, 16}, 3.0f), SectionKind::label, v, Resampling::bilinear), Error);
    CHECK_THROWS_AS(resample_section(Tensor({16, 18}), SectionKind::raw, v, Resampling::nearest), ShapeError);
}

TEST_CASE("anchor section passes through unchanged and every section reaches the sink once") {
    auto ph = synth::cell_phantom(32, 32, 5, 2);
    CountingStack source{ph.raw};
    auto s = source.stack();
    std::vector<std::int64_t> seen;
    Tensor first;
    auto report = align_stack(s, nullptr, nullptr, quick_plan(2), [&](const AlignedSection& a) {
        if (a.position == 0) first = a.image;
        seen.push_back(a.index);
        CHECK(a.image.shape() == nd::Shape{32, 32});
        CHECK_FALSE(a.labels.has_value());
    });
    CHECK(seen == std::vector<std::int64_t>{10, 12, 14, 16, 18});
    CHECK(first == ph.raw[0]);
    CHECK(*source.loads == 5);
    CHECK(report.sections == 5);
    CHECK(report.final_loss.size() == 5);
}

TEST_CASE("resident sections stay within window + 1 regardless of depth") {
    for (std::size_t depth : {3u, 6u, 9u}) {
        for (std::size_t window : {1u, 2u, 3u}) {
            auto ph = synth::cell_phantom(16, 16, depth, 3);
            auto s = SectionStack::from_images(ph.raw, SectionKind::raw);
            auto plan = quick_plan(window);
            plan.registration.iterations = 1;
            auto report = align_stack(s, nullptr, nullptr, plan, {});
            CAPTURE(depth);
            CAPTURE(window);
            CHECK(report.peak_resident <= window + 1);
        }
    }
}

TEST_CASE("label stacks follow the raw maps with nearest resampling") {
    auto ph = synth::cell_phantom(32, 32, 3, 4);
    auto raw = SectionStack::from_images(ph.raw, SectionKind::raw);
    auto labels = SectionStack::from_images(ph.labels, SectionKind::label);
    auto out = align_stack(raw, &labels, nullptr, quick_plan(2));
    REQUIRE(out.labels.size() == 3);
    CHECK(out.labels[0] == ph.labels[0]);
    for (std::size_t k = 1; k < 3; ++k) {
        auto expected = resample_section(ph.labels[k], SectionKind::label, out.maps[k], Resampling::nearest);
        CHECK(out.labels[k] == expected);
    }
}

TEST_CASE("stack alignment rejects bad inputs") {
    auto ph = synth::cell_phantom(32, 32, 3, 4);
    auto raw = SectionStack::from_images(ph.raw, SectionKind::raw);
    auto single = SectionStack::from_images({ph.raw[0]}, SectionKind::raw);
    CHECK_THROWS_AS(align_stack(single, nullptr, nullptr, quick_plan(2)), Error);
    auto labels_as_raw = SectionStack::from_images(ph.labels, SectionKind::label);
    CHECK_THROWS_AS(align_stack(labels_as_raw, nullptr, nullptr, quick_plan(2)), Error);
    auto short_labels = SectionStack::from_images({ph.labels[0], ph.labels[1]}, SectionKind::label);
    CHECK_THROWS_AS(align_stack(raw, &short_labels, nullptr, quick_plan(2)), ShapeError);
    auto plan = quick_plan(0);
    CHECK_THROWS_AS(align_stack(raw, nullptr, nullptr, plan), Error);
}

TEST_CASE("aligning a deformed stack brings sections closer to their neighbours") {
    auto ph = synth::cell_phantom(64, 64, 4, 9, synth::PhantomOptions{24.0, 1.0, 1.5, 0.08});
    synth::DeformStackOptions opts;
    opts.sigma = 2.0;
    opts.keep_first = true;
    opts.seed = 4;
    auto deformed = synth::deform_stack(SectionStack::from_images(ph.raw, SectionKind::raw), opts);
    auto plan = quick_plan(3);
    plan.registration.iterations = 100;
    plan.registration.adam.lr = 0.1;
    auto out = align_stack(SectionStack::from_images(deformed.sections, SectionKind::raw), nullptr, nullptr, plan);
    double before = 0.0, after = 0.0;
    for (std::size_t k = 1; k < 4; ++k) {
        for (std::int64_t i = 0; i < ph.raw[k].size(); ++i) {
            before += std::pow(double(deformed.sections[k][i]) - ph.raw[k][i], 2);
            after += std::pow(double(out.sections[k][i]) - ph.raw[k][i], 2);
        }
    }
    CHECK(after < before);
}
