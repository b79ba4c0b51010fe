#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "vinpaint/tensor.hpp"

using namespace vinpaint;
using testing::randn;

TEST_SUITE("tensor") {

TEST_CASE("construction validates shape and data length") {
    CHECK_THROWS_AS(TensorF(Shape{}), ShapeError);
    CHECK_THROWS_AS(TensorF(Shape{2, 0}), ShapeError);
    CHECK_THROWS_AS(TensorF(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
    TensorF t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK(t.dim(-1) == 3);
    CHECK_THROWS_AS(t.dim(2), std::invalid_argument);
    CHECK_THROWS_AS(t.at({2, 0}), std::out_of_range);
}

TEST_CASE("at uses row-major offsets") {
    TensorD t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
    CHECK(t.at({1, 2, 3}) == 23.0);
    CHECK(t.at({0, 1, 0}) == 4.0);
    CHECK(shape_strides({2, 3, 4}) == Shape{12, 4, 1});
}

TEST_CASE("permute moves elements and inverse restores them") {
    Rng rng(1);
    auto x = randn<double>({2, 3, 4, 5}, rng);
    const std::vector<std::size_t> order{2, 0, 3, 1};
    auto y = permute(x, order);
    CHECK(y.shape() == Shape{4, 2, 5, 3});
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t c = 0; c < 4; ++c)
                for (std::size_t d = 0; d < 5; ++d) CHECK(y.at({c, a, d, b}) == x.at({a, b, c, d}));
    CHECK(permute(y, inverse_permutation(order)) == x);
    CHECK_THROWS(permute(x, {0, 0, 1, 2}));
}

TEST_CASE("reshape keeps data and rejects size changes") {
    TensorF x({2, 6}, 3.0f);
    CHECK(reshape_view(x, {3, 4}).shape() == Shape{3, 4});
    CHECK_THROWS_AS(reshape_view(x, {5}), ShapeError);
}

TEST_CASE("matmul matches triple loop with batch broadcast") {
    Rng rng(2);
    auto a = randn<double>({3, 4, 5}, rng);
    auto b = randn<double>({5, 2}, rng);
    auto c = matmul(a, b);
    REQUIRE(c.shape() == Shape{3, 4, 2});
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                double acc = 0;
                for (std::size_t k = 0; k < 5; ++k) acc += a.at({n, i, k}) * b.at({k, j});
                CHECK(c.at({n, i, j}) == doctest::Approx(acc).epsilon(1e-12));
            }
    CHECK_THROWS_AS(matmul(a, randn<double>({4, 2}, rng)), ShapeError);
}

TEST_CASE("softmax rows sum to one and survive large inputs") {
    TensorD x({2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5});
    auto y = softmax(x);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 3; ++j) s += y.at({r, j});
        CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
    CHECK(y.at({0, 2}) == doctest::Approx(std::exp(2.0) / (1 + std::exp(1.0) + std::exp(2.0))));
    auto z = softmax(x, 0);
    CHECK(z.at({0, 0}) + z.at({1, 0}) == doctest::Approx(1.0));
}

TEST_CASE("bilinear resize matches the half-pixel oracle") {
    Rng rng(3);
    for (auto [w, h, ow, oh] : std::vector<std::array<std::size_t, 4>>{{4, 4, 2, 2}, {5, 3, 2, 3}, {3, 2, 7, 5}, {6, 6, 4, 1}}) {
        auto x = randn<double>({2, w, h}, rng);
        auto y = spatial_resize(x, ow, oh);
        for (std::size_t p = 0; p < 2; ++p) {
            const auto ref = oracle::resize_plane(x.data().data() + p * w * h, w, h, ow, oh);
            for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[p * ow * oh + i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("same-size resize is an exact copy and nearest uses floor") {
    Rng rng(4);
    auto x = randn<float>({3, 5, 4}, rng);
    CHECK(spatial_resize(x, 5, 4) == x);
    TensorD ramp({4, 1}, std::vector<double>{0, 1, 2, 3});
    auto n = spatial_resize(ramp, 2, 1, ResizeMode::nearest);
    CHECK(n.values() == std::vector<double>{0, 2});
    auto up = spatial_resize(TensorD({2, 1}, std::vector<double>{0, 1}), 4, 1, ResizeMode::nearest);
    CHECK(up.values() == std::vector<double>{0, 0, 1, 1});
}

TEST_CASE("2x downsample of a constant plane stays constant") {
    TensorD x({8, 6}, 0.25);
    auto y = spatial_resize(x, 4, 3);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("concat and slice are inverse") {
    Rng rng(5);
    auto a = randn<double>({2, 3, 2}, rng);
    auto b = randn<double>({2, 1, 2}, rng);
    auto c = concat<double>({&a, &b}, 1);
    CHECK(c.shape() == Shape{2, 4, 2});
    CHECK(slice(c, 1, 0, 3) == a);
    CHECK(slice(c, 1, 3, 4) == b);
    CHECK_THROWS_AS(concat<double>({&a, &c}, 0), ShapeError);
    CHECK_THROWS(slice(c, 1, 3, 3));
}

TEST_CASE("attention with one key returns its value") {
    Rng rng(6);
    auto q = randn<double>({1, 3, 4}, rng);
    auto k = randn<double>({1, 1, 4}, rng);
    auto v = randn<double>({1, 1, 4}, rng);
    auto o = scaled_dot_attention(q, k, v, 2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(o.at({0, i, j}) == doctest::Approx(v.at({0, 0, j})).epsilon(1e-14));
}

TEST_CASE("attention matches the oracle") {
    Rng rng(7);
    auto q = randn<double>({2, 5, 6}, rng);
    auto k = randn<double>({2, 3, 6}, rng);
    auto v = randn<double>({2, 3, 6}, rng);
    auto o = scaled_dot_attention(q, k, v, 3);
    for (std::size_t b = 0; b < 2; ++b) {
        const auto ref = oracle::attention(testing::to_vec(slice(q, 0, b, b + 1)), testing::to_vec(slice(k, 0, b, b + 1)),
                                           testing::to_vec(slice(v, 0, b, b + 1)), 5, 3, 6, 3);
        CHECK(testing::rel_err(slice(o, 0, b, b + 1), ref) < 1e-12);
    }
    CHECK_THROWS(scaled_dot_attention(q, k, v, 4));
}

TEST_CASE("packing frames into per-site sequences") {
    TensorF x({1, 2, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        x[i] = 1.0f;
        x[4 + i] = 2.0f;
    }
    auto packed = reshape_view(permute(x, {0, 3, 4, 1, 2}), {4, 2, 1});
    for (std::size_t s = 0; s < 4; ++s) {
        CHECK(packed.at({s, 0, 0}) == 1.0f);
        CHECK(packed.at({s, 1, 0}) == 2.0f);
    }
    auto unpacked = permute(reshape_view(packed, {1, 2, 2, 2, 1}), {0, 3, 4, 1, 2});
    CHECK(unpacked == x);
}

TEST_CASE("small permute and matmul hand cases") {
    TensorF m({2, 2}, std::vector<float>{1, 2, 3, 4});
    CHECK(permute(m, {1, 0}).values() == std::vector<float>{1, 3, 2, 4});
    CHECK(permute(m, {0, 1}) == m);
    auto p = matmul(m, TensorF({2, 1}, std::vector<float>{5, 6}));
    CHECK(p.values() == std::vector<float>{17, 39});
    Rng rng(8);
    auto a = randn<float>({3, 3}, rng);
    TensorF eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0f;
    CHECK(matmul(a, eye) == a);
    Rng rng2(9);
    auto x = randn<double>({2, 3, 4}, rng2);
    CHECK(permute(permute(x, {1, 2, 0}), {2, 0, 1}) == x);
}

TEST_CASE("softmax hand cases and shift invariance") {
    auto u = softmax(TensorD({3}, 0.0));
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
    auto big = softmax(TensorF({2}, std::vector<float>{1000, 0}));
    CHECK(big[0] == 1.0f);
    CHECK(big[1] == 0.0f);
    auto s = softmax(TensorF({3}, std::vector<float>{1, 2, 3}));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(s[i] - std::exp(i + 1.0) / z) < 1e-7);
    Rng rng(10);
    auto x = randn<float>({4, 6}, rng);
    auto shifted = x;
    for (auto& v : shifted.data()) v += 7.5f;
    CHECK(max_abs_diff(softmax(x), softmax(shifted)) < 1e-6f);
}

TEST_CASE("resize constants, hand bilinear grid and bad targets") {
    TensorF c({1, 1, 4, 4}, 3.0f);
    for (auto mode : {ResizeMode::bilinear, ResizeMode::nearest}) {
        const auto r = spatial_resize(c, 2, 2, mode);
        for (float v : r.data()) CHECK(v == 3.0f);
    }
    TensorD g({2, 2}, std::vector<double>{0, 1, 2, 3});
    auto up = spatial_resize(g, 4, 4);
    for (std::size_t x = 0; x < 4; ++x)
        for (std::size_t y = 0; y < 4; ++y) {
            auto src = [](std::size_t o) { return std::clamp((o + 0.5) * 0.5 - 0.5, 0.0, 1.0); };
            const double sx = src(x), sy = src(y);
            const double expect = (1 - sx) * ((1 - sy) * 0 + sy * 1) + sx * ((1 - sy) * 2 + sy * 3);
            CHECK(up.at({x, y}) == doctest::Approx(expect).epsilon(1e-15));
        }
    CHECK_THROWS_AS(spatial_resize(g, 0, 2), std::invalid_argument);
}

TEST_CASE("identical keys give the mean of the values") {
    Rng rng(13);
    auto q = randn<double>({1, 2, 4}, rng);
    TensorD k({1, 3, 4}, 0.5);
    auto v = randn<double>({1, 3, 4}, rng);
    auto o = scaled_dot_attention(q, k, v, 2);
    for (std::size_t j = 0; j < 4; ++j) {
        const double mean = (v.at({0, 0, j}) + v.at({0, 1, j}) + v.at({0, 2, j})) / 3.0;
        CHECK(o.at({0, 1, j}) == doctest::Approx(mean).epsilon(1e-14));
    }
}

}  // TEST_SUITE
