#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"

#include "ssem/grad_check.hpp"
#include "ssem/metrics.hpp"
#include "ssem/registration.hpp"
#include "ssem/synthwarp.hpp"
#include "test_util.hpp"

using namespace ssem;
using namespace ssem::reg;
using nd::Shape;
using nd::Tensor;

namespace {

const ae::AutoencoderModel& trained_model() {
    static const ae::AutoencoderModel model = [] {
        auto stack = SectionStack::from_images(synth::cell_phantom(96, 96, 3, 31).raw, SectionKind::raw);
        ae::TrainConfig cfg;
        cfg.steps = 150;
        cfg.patch_size = 32;
        cfg.patch_count = 64;
        return ae::train_autoencoder(ae::build_model(ae::ArchitectureSpec::shallow7x7(), 2), stack, cfg).model;
    }();
    return model;
}

warp::VectorMap map_like(std::int64_t h, std::int64_t w, const RegistrationConfig& cfg) {
    auto [gh, gw] = warp::grid_extents_for(h, w, cfg.grid_spacing, cfg.grid_minimum);
    return warp::VectorMap::zeros(gh, gw, h, w, cfg.interpolation);
}

// Control values near half a pixel keep every sampling position away from
// integer coordinates under eps-sized probes.
Tensor half_pixel_field(std::int64_t gh, std::int64_t gw, std::uint64_t seed) {
    return test::random_tensor({gh, gw, 2}, seed, 0.4f, 0.6f);
}

} // namespace

TEST_CASE("loss drop: zero rate keeps everything") {
    auto keep = loss_drop_mask(test::random_tensor({5, 7}, 1), 0.0);
    for (float v : keep.data()) CHECK(v == 1.0f);
}

TEST_CASE("loss drop: half of 100 distinct values keeps the 50 smallest") {
    auto e = test::random_tensor({10, 10}, 2, 0.0f, 1.0f);
    auto keep = loss_drop_mask(e, 0.5);
    std::vector<float> sorted(e.data().begin(), e.data().end());
    std::sort(sorted.begin(), sorted.end());
    const float threshold = sorted[49];
    CHECK(std::accumulate(keep.data().begin(), keep.data().end(), 0.0f) == 50.0f);
    for (std::int64_t i = 0; i < 100; ++i) CHECK(keep[i] == (e[i] <= threshold ? 1.0f : 0.0f));
}

TEST_CASE("loss drop: ties keep the lower linear indices") {
    auto keep = loss_drop_mask(Tensor({4, 5}, 3.0f), 0.5);
    for (std::int64_t i = 0; i < 20; ++i) CHECK(keep[i] == (i < 10 ? 1.0f : 0.0f));
    keep = loss_drop_mask(Tensor({7}, 1.0f), 0.5);  // floor(3.5) = 3 dropped
    CHECK(std::accumulate(keep.data().begin(), keep.data().end(), 0.0f) == 4.0f);
}

TEST_CASE("drop schedule halves per iteration and stops below the floor") {
    CHECK(drop_schedule(0, 0.5) == 0.5);
    CHECK(drop_schedule(1, 0.5) == 0.25);
    CHECK(drop_schedule(2, 0.5) == 0.125);
    CHECK(drop_schedule(3, 0.5) == 0.0625);
    CHECK(drop_schedule(5, 0.5) == 0.015625);
    CHECK(drop_schedule(6, 0.5) == 0.0);
    CHECK(drop_schedule(0, 0.0) == 0.0);
}

TEST_CASE("adam: zero gradient leaves v unchanged") {
    auto v = warp::VectorMap::zeros(3, 3, 16, 16);
    v.displacements.fill(0.25f);
    AdamState state;
    adam_update(state, v, Tensor({3, 3, 2}), AdamSettings{0.05});
    for (float x : v.displacements.data()) CHECK(x == 0.25f);
    CHECK(state.step == 1);
}

TEST_CASE("adam: first step moves by lr whatever the gradient scale") {
    for (float g : {1e-4f, 1.0f, 1e4f}) {
        auto v = warp::VectorMap::zeros(2, 2, 8, 8);
        AdamState state;
        adam_update(state, v, Tensor({2, 2, 2}, g), AdamSettings{0.05});
        for (float x : v.displacements.data()) CHECK(x == doctest::Approx(-0.05).epsilon(1e-3));
    }
}

TEST_CASE("adam: three steps on a fixed gradient match the hand recurrence") {
    // g = 2, lr = 0.1, beta1 = 0.9, beta2 = 0.999, eps = 1e-8
    // m_t = 0.2, 0.38, 0.542; s_t = 0.004, 0.007996, 0.011988004
    // step_t = lr * (m_t/(1-b1^t)) / (sqrt(s_t/(1-b2^t)) + eps) = 0.1 each time
    auto v = warp::VectorMap::zeros(2, 2, 8, 8);
    AdamState state;
    const AdamSettings s{0.1, 0.9, 0.999, 1e-8};
    const double expected[] = {-0.1, -0.2, -0.3};
    for (int t = 0; t < 3; ++t) {
        adam_update(state, v, Tensor({2, 2, 2}, 2.0f), s);
        CHECK(v.displacements[0] == doctest::Approx(expected[t]).epsilon(1e-6));
    }
    CHECK(state.first[0] == doctest::Approx(0.542).epsilon(1e-6));
    CHECK(state.second[0] == doctest::Approx(0.011988004).epsilon(1e-6));
}

TEST_CASE("adam: non-finite gradient is rejected") {
    auto v = warp::VectorMap::zeros(2, 2, 8, 8);
    AdamState state;
    Tensor g({2, 2, 2});
    g[3] = std::nanf("");
    CHECK_THROWS_AS(adam_update(state, v, g, AdamSettings{}), NonFiniteError);
}

TEST_CASE("pair loss is zero for identical images at v = 0") {
    auto img = synth::textured_image(64, 64, 4);
    RegistrationConfig cfg;
    CHECK(feature_loss_pair(img, img, map_like(64, 64, cfg), &trained_model(), cfg) == 0.0);
}

TEST_CASE("pair loss without regularizers is the feature distance") {
    auto a = synth::textured_image(64, 64, 4), b = synth::textured_image(64, 64, 5);
    RegistrationConfig cfg;
    cfg.alpha = cfg.beta = cfg.gamma = 0.0;
    const auto& model = trained_model();
    auto fa = ae::encode(model, a), fb = ae::encode(model, b);
    double expected = 0.0;
    for (std::int64_t i = 0; i < fa.size(); ++i) expected += (double(fa[i]) - fb[i]) * (double(fa[i]) - fb[i]);
    CHECK(feature_loss_pair(a, b, map_like(64, 64, cfg), &model, cfg) == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("pair loss regularizers follow the grid differences") {
    auto img = synth::textured_image(64, 64, 4);
    RegistrationConfig cfg;
    cfg.alpha = 0.5;
    cfg.beta = 2.0;
    cfg.gamma = 3.0;
    auto v = map_like(64, 64, cfg);  // 4x4
    // v_col = column index, v_row = 0: ||v||² = 4*(0+1+4+9) = 56, each of
    // the 4 rows has 3 unit column differences -> ||grad v_col||² = 12
    for (std::int64_t i = 0; i < 4; ++i)
        for (std::int64_t j = 0; j < 4; ++j) v.displacements.at(i, j, 1) = static_cast<float>(j);
    Objective obj(img, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, &trained_model(), cfg,
                  Objective::Options{false});
    auto terms = obj.evaluate(v, 0.0);
    CHECK(terms.magnitude == doctest::Approx(56.0));
    CHECK(terms.smooth_x == doctest::Approx(12.0));
    CHECK(terms.smooth_y == doctest::Approx(0.0));
    CHECK(terms.total == doctest::Approx(terms.feature + 0.5 * 56.0 + 2.0 * 12.0));
}

TEST_CASE("pair loss checks extents") {
    RegistrationConfig cfg;
    auto a = synth::textured_image(60, 64, 4);
    CHECK_THROWS_AS(feature_loss_pair(a, a, map_like(60, 64, cfg), &trained_model(), cfg), ShapeError);
    auto b = synth::textured_image(64, 64, 4), c = synth::textured_image(64, 72, 4);
    CHECK_THROWS_AS(feature_loss_pair(b, c, map_like(64, 64, cfg), &trained_model(), cfg), ShapeError);
}

TEST_CASE("multi-neighbour loss reduces to the pair loss") {
    auto a = synth::textured_image(64, 64, 4), b = synth::textured_image(64, 64, 5);
    RegistrationConfig cfg;
    const Tensor refs[] = {b};
    const double w[] = {1.0};
    auto v = map_like(64, 64, cfg);
    CHECK(multi_neighbor_loss(a, refs, w, v, &trained_model(), cfg, 0.0) ==
          doctest::Approx(feature_loss_pair(a, b, v, &trained_model(), cfg)).epsilon(1e-6));
}

TEST_CASE("multi-neighbour loss is linear in the weights") {
    auto a = synth::textured_image(64, 64, 4);
    const Tensor refs[] = {synth::textured_image(64, 64, 5), synth::textured_image(64, 64, 6)};
    RegistrationConfig cfg;
    cfg.alpha = cfg.beta = cfg.gamma = 0.0;
    auto v = map_like(64, 64, cfg);
    const double w1[] = {1.0, 0.5}, w2[] = {2.0, 1.0};
    CHECK(multi_neighbor_loss(a, refs, w2, v, &trained_model(), cfg, 0.0) ==
          doctest::Approx(2.0 * multi_neighbor_loss(a, refs, w1, v, &trained_model(), cfg, 0.0)).epsilon(1e-6));
}

TEST_CASE("multi-neighbour loss with everything out of bounds is the regularizers only") {
    auto a = synth::textured_image(64, 64, 4);
    const Tensor refs[] = {synth::textured_image(64, 64, 5)};
    const double w[] = {1.0};
    RegistrationConfig cfg;
    auto v = map_like(64, 64, cfg);
    v.displacements.fill(100.0f);
    Objective obj(a, refs, w, &trained_model(), cfg);
    auto terms = obj.evaluate(v, 0.0);
    CHECK(terms.feature == 0.0);
    CHECK(terms.total == doctest::Approx(cfg.alpha * terms.magnitude));
}

TEST_CASE("multi-neighbour loss rejects mismatched inputs") {
    auto a = synth::textured_image(64, 64, 4);
    const Tensor refs[] = {a, a};
    const double w[] = {1.0};
    RegistrationConfig cfg;
    auto v = map_like(64, 64, cfg);
    CHECK_THROWS_AS(multi_neighbor_loss(a, refs, w, v, &trained_model(), cfg, 0.0), Error);
    CHECK_THROWS_AS(multi_neighbor_loss(a, std::span<const Tensor>(), std::span<const double>(), v, &trained_model(),
                                        cfg, 0.0),
                    Error);
}

TEST_CASE("pair loss gradient w.r.t. v matches finite differences") {
    // A TPS control point moves every pixel, so more encoder units sit near a
    // relu kink; the smaller image keeps most probes differentiable.
    for (auto [interp, extent] : {std::pair{warp::Interpolation::bilinear, std::int64_t{64}},
                                  std::pair{warp::Interpolation::tps, std::int64_t{32}}}) {
        auto a = synth::textured_image(extent, extent, 7), b = synth::textured_image(extent, extent, 8);
        RegistrationConfig cfg;
        cfg.interpolation = interp;
        Objective obj(a, std::span<const Tensor>(&b, 1), std::vector<double>{1.0}, &trained_model(), cfg,
                      Objective::Options{false});
        auto report = nd::grad_check([&](auto& g, auto v) { return obj.build(g, v, 0.0).total; },
                                     half_pixel_field(4, 4, 3));
        CAPTURE(warp::to_string(interp));
        CHECK(report.max_rel_error <= 1e-4);
        CHECK(report.skipped <= report.probes / 4);
    }
}

TEST_CASE("multi-neighbour loss gradient with mask and drop matches finite differences") {
    auto a = synth::textured_image(64, 64, 7);
    const Tensor refs[] = {synth::textured_image(64, 64, 8), synth::textured_image(64, 64, 9)};
    const double w[] = {1.0, 0.5};
    RegistrationConfig cfg;
    Objective obj(a, refs, w, &trained_model(), cfg);
    const auto v0 = half_pixel_field(4, 4, 5);
    Tensor keep;
    {
        nd::Graph<float> g;
        keep = obj.build(g, g.constant(v0), 0.5).keep;
    }
    CHECK(std::accumulate(keep.data().begin(), keep.data().end(), 0.0f) == 32.0f);
    auto report = nd::grad_check([&](auto& g, auto v) { return obj.build(g, v, 0.5, &keep).total; }, v0);
    CHECK(report.max_rel_error <= 1e-4);
    CHECK(report.skipped <= report.probes / 4);
}

TEST_CASE("register with zero learning rate keeps v at zero") {
    auto img = synth::textured_image(64, 64, 3);
    RegistrationConfig cfg;
    cfg.adam.lr = 0.0;
    cfg.iterations = 5;
    cfg.drop_rate = 0.0;
    auto moved = synth::textured_image(64, 64, 4);
    auto res = register_image(moved, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, &trained_model(), cfg);
    CHECK(res.iterations == 5);
    REQUIRE(res.trace.size() == 5);
    for (double l : res.trace) CHECK(l == res.trace.front());
    for (float x : res.map.displacements.data()) CHECK(x == 0.0f);
}

TEST_CASE("self-registration stays at zero and larger alpha never grows v") {
    auto img = synth::textured_image(128, 128, 12);
    double previous = std::numeric_limits<double>::infinity();
    for (double alpha : {0.0, 0.1, 1.0}) {
        RegistrationConfig cfg;
        cfg.alpha = alpha;
        cfg.iterations = 40;
        auto res =
            register_image(img, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, &trained_model(), cfg);
        CHECK(res.map.mean_magnitude() <= 0.1);
        const double norm = nd::sum_squares(res.map.displacements);
        CHECK(norm <= previous);
        previous = norm;
    }
}

TEST_CASE("a uniform 4-pixel shift is recovered") {
    auto img = synth::textured_image(128, 128, 13);
    auto shift = warp::DenseFlow::zeros(128, 128);
    for (std::int64_t r = 0; r < 128; ++r)
        for (std::int64_t c = 0; c < 128; ++c) shift.data.at(r, c, 1) = 4.0f;
    auto moved = warp::warp_image(img, shift);
    RegistrationConfig cfg;
    auto res = register_image(moved, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, &trained_model(), cfg);
    auto truth = warp::DenseFlow::zeros(128, 128);
    for (std::int64_t r = 0; r < 128; ++r)
        for (std::int64_t c = 0; c < 128; ++c) truth.data.at(r, c, 1) = -4.0f;
    // Compare where the shifted content exists.
    warp::ValidityMask inside{Tensor({128, 128})};
    for (std::int64_t r = 0; r < 128; ++r)
        for (std::int64_t c = 4; c < 124; ++c) inside.data.at(r, c) = 1.0f;
    const double epe = metrics::mean_endpoint_error(warp::upsample_field(res.map), truth, &inside);
    CAPTURE(epe);
    CHECK(epe <= 0.5);
    CHECK(res.trace.back() < res.trace.front());
}

TEST_CASE("registration is deterministic") {
    auto img = synth::textured_image(64, 64, 14);
    auto moved = synth::deform_image(img, synth::random_tps_deformation(64, 64, 8, 2.0, 3), SectionKind::raw);
    RegistrationConfig cfg;
    cfg.iterations = 20;
    auto a = register_image(moved, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, &trained_model(), cfg);
    auto b = register_image(moved, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, &trained_model(), cfg);
    CHECK(a.trace == b.trace);
    CHECK(a.map.displacements == b.map.displacements);
}

TEST_CASE("pixel similarity needs no model") {
    auto img = synth::textured_image(60, 60, 14);
    RegistrationConfig cfg;
    cfg.similarity = Similarity::pixel;
    cfg.iterations = 3;
    auto res = register_image(img, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, nullptr, cfg);
    CHECK(res.trace.front() == 0.0);
    cfg.similarity = Similarity::feature;
    CHECK_THROWS_AS(register_image(img, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, nullptr, cfg), Error);
}

TEST_CASE("diverging registration reports the iteration") {
    auto img = synth::textured_image(64, 64, 15);
    auto other = synth::textured_image(64, 64, 16);
    RegistrationConfig cfg;
    cfg.adam.lr = 1e30;
    cfg.iterations = 10;
    CHECK_THROWS_AS(
        register_image(other, std::span<const Tensor>(&img, 1), std::vector<double>{1.0}, &trained_model(), cfg),
        NonFiniteError);
}

TEST_CASE("configuration validation") {
    RegistrationConfig cfg;
    cfg.alpha = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = RegistrationConfig{};
    cfg.drop_rate = 1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    CHECK(parse_similarity("pixel") == Similarity::pixel);
    CHECK_THROWS_AS(parse_similarity("mutual-information"), Error);
}
