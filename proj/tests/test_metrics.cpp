#include <cmath>
#include <vector>

#include "doctest.h"

#include "ssem/metrics.hpp"
#include "ssem/synthwarp.hpp"
#include "test_util.hpp"

using namespace ssem;
using namespace ssem::metrics;
using nd::Tensor;

TEST_CASE("ncc of an image with itself is 1 and with its negation -1") {
    auto a = test::random_tensor({16, 16}, 1);
    CHECK(ncc(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    Tensor neg = a;
    for (float& v : neg.data()) v = -v;
    CHECK(ncc(a, neg) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("ncc ignores intensity offset and scale") {
    auto a = test::random_tensor({12, 20}, 2);
    Tensor b = a;
    for (float& v : b.data()) v = 3.0f * v + 0.25f;
    CHECK(ncc(a, b) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("ncc of independent noise is near zero") {
    auto a = test::random_tensor({128, 128}, 3), b = test::random_tensor({128, 128}, 4);
    CHECK(std::abs(ncc(a, b)) < 0.03);
}

TEST_CASE("ncc with a mask uses only the masked pixels") {
    auto a = test::random_tensor({8, 8}, 5), b = test::random_tensor({8, 8}, 6);
    warp::ValidityMask mask{Tensor({8, 8})};
    for (std::int64_t r = 0; r < 8; ++r)
        for (std::int64_t c = 0; c < 4; ++c) mask.data.at(r, c) = 1.0f;
    Tensor b2 = b;
    for (std::int64_t r = 0; r < 8; ++r)
        for (std::int64_t c = 0; c < 4; ++c) b2.at(r, c) = a.at(r, c);
    CHECK(ncc(a, b2, &mask) == doctest::Approx(1.0));
    CHECK(ncc(a, b2) < 0.9);
}

TEST_CASE("ncc errors") {
    CHECK_THROWS_AS(ncc(Tensor({4, 4}, 1.0f), test::random_tensor({4, 4}, 1)), InvalidResultError);
    CHECK_THROWS_AS(ncc(Tensor({4, 4}), Tensor({4, 5})), ShapeError);
    warp::ValidityMask one{Tensor({4, 4})};
    one.data.at(0, 0) = 1.0f;
    CHECK_THROWS_AS(ncc(test::random_tensor({4, 4}, 1), test::random_tensor({4, 4}, 2), &one), InvalidResultError);
}

TEST_CASE("heatmap geometry and validity flags") {
    auto a = test::random_tensor({64, 80}, 7);
    auto hm = ncc_heatmap(a, a);
    CHECK(hm.values.shape() == nd::Shape{3, 4});
    CHECK(hm.valid_count == 12);
    CHECK(hm.mean == doctest::Approx(1.0));

    Tensor b = a;
    for (std::int64_t r = 0; r < 32; ++r)
        for (std::int64_t c = 0; c < 32; ++c) b.at(r, c) = 0.5f;
    auto flagged = ncc_heatmap(a, b, 32, 16);
    CHECK(flagged.valid.at(0, 0) == 0.0f);
    CHECK(flagged.values.at(0, 0) == 0.0f);
    CHECK(flagged.valid.at(2, 3) == 1.0f);
    CHECK(flagged.valid_count == 11);
}

TEST_CASE("heatmap window must fit") {
    CHECK_THROWS_AS(ncc_heatmap(Tensor({16, 16}), Tensor({16, 16}), 32, 16), ShapeError);
}

TEST_CASE("dice of a label with itself is 1 and of disjoint regions 0") {
    Tensor a({4, 4}), b({4, 4});
    for (std::int64_t c = 0; c < 2; ++c) a.at(0, c) = 5.0f;
    for (std::int64_t c = 2; c < 4; ++c) b.at(0, c) = 5.0f;
    const Tensor sa[] = {a}, sb[] = {b};
    CHECK(dice_label(sa, sa, 5.0f) == 1.0);
    CHECK(dice_label(sa, sb, 5.0f) == 0.0);
    CHECK_THROWS_AS(dice_label(sa, sb, 9.0f), InvalidResultError);
}

TEST_CASE("dice counts overlap over the whole stack") {
    // label 1: 3 voxels in a, 2 in b, 2 shared -> 2*2/5
    Tensor a0({2, 2}), a1({2, 2}), b0({2, 2}), b1({2, 2});
    a0.at(0, 0) = a0.at(0, 1) = a1.at(1, 1) = 1.0f;
    b0.at(0, 0) = b1.at(1, 1) = 1.0f;
    const Tensor a[] = {a0, a1}, b[] = {b0, b1};
    CHECK(dice_label(a, b, 1.0f) == doctest::Approx(0.8));
}

TEST_CASE("top-k dice uses the largest non-zero labels") {
    Tensor truth({4, 4}), test({4, 4});
    for (std::int64_t c = 0; c < 4; ++c) {
        truth.at(0, c) = 1.0f;  // 4 voxels
        truth.at(1, c) = 2.0f;  // 4 voxels
    }
    truth.at(2, 0) = 3.0f;  // 1 voxel
    test = truth;
    test.at(1, 0) = test.at(1, 1) = 0.0f;  // label 2 loses half
    const Tensor t[] = {truth}, u[] = {test};
    auto top = mean_dice_top_k(t, u, 2);
    CHECK(top.labels == std::vector<float>{1.0f, 2.0f});
    CHECK(top.dice[0] == 1.0);
    CHECK(top.dice[1] == doctest::Approx(2.0 * 2 / 6));
    CHECK(top.mean == doctest::Approx((1.0 + 4.0 / 6) / 2));
    CHECK(mean_dice_top_k(t, t, 10).mean == 1.0);
}

TEST_CASE("endpoint error") {
    auto a = warp::DenseFlow::zeros(4, 4), b = warp::DenseFlow::zeros(4, 4);
    for (std::int64_t r = 0; r < 4; ++r)
        for (std::int64_t c = 0; c < 4; ++c) {
            b.data.at(r, c, 0) = 3.0f;
            b.data.at(r, c, 1) = 4.0f;
        }
    CHECK(mean_endpoint_error(a, b) == doctest::Approx(5.0));
    CHECK(mean_endpoint_error(b, b) == 0.0);
    warp::ValidityMask none{Tensor({4, 4})};
    CHECK_THROWS_AS(mean_endpoint_error(a, b, &none), InvalidResultError);
}

TEST_CASE("cross sections pick a row or column across the stack") {
    std::vector<Tensor> stack;
    for (int k = 0; k < 3; ++k) stack.push_back(test::random_tensor({5, 7}, 10 + k));
    auto rows = cross_section(stack, Axis::row, 2);
    CHECK(rows.shape() == nd::Shape{3, 7});
    CHECK(rows.at(1, 4) == stack[1].at(2, 4));
    auto cols = cross_section(stack, Axis::column, 6);
    CHECK(cols.shape() == nd::Shape{3, 5});
    CHECK(cols.at(2, 3) == stack[2].at(3, 6));
    CHECK_THROWS_AS(cross_section(stack, Axis::row, 5), Error);
}
