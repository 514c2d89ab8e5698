#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "capseg/optim.hpp"
#include "capseg/rng.hpp"
#include "capseg/tensor.hpp"
#include "test_utils.hpp"

using namespace capseg;
using capseg::testing::conv2d_oracle;
using capseg::testing::dot;
using capseg::testing::max_abs_diff;
using capseg::testing::random_tensor;

TEST_CASE("creation: zeros, constant fill, seeded determinism") {
    Tensor z = Tensor::zeros({2, 2});
    for (std::int64_t i = 0; i < 4; ++i) CHECK(z.data()[i] == 0.0);

    Tensor c = Tensor::full({3}, 1.5);
    for (std::int64_t i = 0; i < 3; ++i) CHECK(c.data()[i] == 1.5);

    Tensor u1 = Tensor::uniform({4}, 7, 0.0, 1.0);
    Tensor u2 = Tensor::uniform({4}, 7, 0.0, 1.0);
    CHECK(u1.to_vec() == u2.to_vec());  // bitwise
    Tensor u3 = Tensor::uniform({4}, 8, 0.0, 1.0);
    CHECK(u1.to_vec() != u3.to_vec());

    Tensor n1 = Tensor::normal({64}, 11, 0.5, 2.0);
    Tensor n2 = Tensor::normal({64}, 11, 0.5, 2.0);
    CHECK(n1.to_vec() == n2.to_vec());

    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({-1}), ShapeError);
}

TEST_CASE("elementwise with broadcasting") {
    Tensor a = Tensor::from_vec({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_vec({3}, {10, 20, 30});
    Tensor s = add(a, b);
    CHECK(s.to_vec() == std::vector<double>{11, 22, 33, 14, 25, 36});

    Tensor col = Tensor::from_vec({2, 1}, {1, -1});
    Tensor p = mul(a, col);
    CHECK(p.to_vec() == std::vector<double>{1, 2, 3, -4, -5, -6});

    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), ShapeError);

    // broadcast gradients reduce over the expanded axes
    Tensor x = Tensor::from_vec({2, 2}, {1, 2, 3, 4}, true);
    Tensor w = Tensor::from_vec({2}, {5, 7}, true);
    backward(sum_all(mul(x, w)));
    CHECK(x.grad().to_vec() == std::vector<double>{5, 7, 5, 7});
    CHECK(w.grad().to_vec() == std::vector<double>{4, 6});
}

TEST_CASE("backward: linear and quadratic basics") {
    Tensor x = Tensor::from_vec({3}, {1, 2, 3}, true);
    backward(sum_all(x));
    CHECK(x.grad().to_vec() == std::vector<double>{1, 1, 1});

    Tensor y = Tensor::from_vec({2}, {1, 2}, true);
    backward(sum_all(mul(y, y)));
    CHECK(y.grad().to_vec() == std::vector<double>{2, 4});

    // repeated calls without reset accumulate
    backward(sum_all(mul(y, y)));
    CHECK(y.grad().to_vec() == std::vector<double>{4, 8});

    CHECK_THROWS_AS(backward(Tensor::zeros({2})), ContractError);
}

TEST_CASE("softmax: uniform, analytic, oracle, shift invariance") {
    Tensor z = Tensor::zeros({4});
    Tensor s = softmax_axis(z, 0);
    for (int i = 0; i < 4; ++i) CHECK(s.data()[i] == doctest::Approx(0.25).epsilon(1e-14));

    Tensor t = Tensor::from_vec({2}, {std::log(2.0), std::log(1.0)});
    Tensor st = softmax_axis(t, 0);
    CHECK(st.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(st.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    Rng rng(21);
    Tensor r = random_tensor({3, 5, 4}, rng, -3.0, 3.0);
    for (int axis : {0, 1, 2}) {
        Tensor sm = softmax_axis(r, axis);
        // direct exp/normalize oracle
        std::int64_t outer = 1, inner = 1;
        const std::int64_t ax = r.extent(axis);
        for (int i = 0; i < axis; ++i) outer *= r.extent(i);
        for (int i = axis + 1; i < r.rank(); ++i) inner *= r.extent(i);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                double denom = 0.0;
                for (std::int64_t k = 0; k < ax; ++k)
                    denom += std::exp(r.data()[(o * ax + k) * inner + in]);
                double total = 0.0;
                for (std::int64_t k = 0; k < ax; ++k) {
                    const double expect =
                        std::exp(r.data()[(o * ax + k) * inner + in]) / denom;
                    const double got = sm.data()[(o * ax + k) * inner + in];
                    CHECK(std::abs(got - expect) < 1e-12);
                    CHECK(got >= 0.0);
                    total += got;
                }
                CHECK(std::abs(total - 1.0) < 1e-12);
            }
        // adding a constant along the axis leaves the output unchanged
        Tensor shifted = softmax_axis(add_scalar(r, 17.25), axis);
        CHECK(max_abs_diff(sm, shifted) < 1e-12);
    }
}

TEST_CASE("conv_nd: identity kernel, summation, dilated oracle, errors") {
    Rng rng(5);
    Tensor x = random_tensor({1, 1, 4, 4}, rng);
    Tensor ident = Tensor::from_vec({1, 1, 1, 1}, {1.0});
    Tensor y = conv_nd(x, ident, 1, 0, 1, 2);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    CHECK(max_abs_diff(reshape(y, x.shape()), x) == 0.0);

    Tensor ones_in = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor ones_k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor s = conv_nd(ones_in, ones_k, 1, 0, 1, 2);
    CHECK(s.shape() == Shape{1, 1, 1, 1});
    CHECK(s.data()[0] == 9.0);

    // random instance with dilation 3 against the nested-loop oracle
    Tensor xin = random_tensor({2, 3, 11, 12}, rng);
    Tensor k = random_tensor({4, 3, 2, 3}, rng);
    Tensor out = conv_nd(xin, k, 2, 3, 3, 2);
    auto oracle = conv2d_oracle(xin, k, 2, 3, 3);
    CHECK(out.numel() == static_cast<std::int64_t>(oracle.size()));
    double md = 0.0;
    for (std::int64_t i = 0; i < out.numel(); ++i)
        md = std::max(md, std::abs(out.data()[i] - oracle[static_cast<size_t>(i)]));
    CHECK(md < 1e-12);

    CHECK_THROWS_AS(conv_nd(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 0, 1, 2),
                    ShapeError);
    CHECK_THROWS_AS(conv_nd(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0, 1, 2),
                    ShapeError);
}

TEST_CASE("conv_nd 3d matches a hand reduction and a nested-loop oracle") {
    // all-ones 2x2x2 kernel over an all-ones 2x2x2 volume = 8
    Tensor x = Tensor::full({1, 1, 2, 2, 2}, 1.0);
    Tensor k = Tensor::full({1, 1, 2, 2, 2}, 1.0);
    Tensor y = conv_nd(x, k, 1, 0, 1, 3);
    CHECK(y.shape() == Shape{1, 1, 1, 1, 1});
    CHECK(y.data()[0] == 8.0);

    // random volumetric instance with stride/pad/dilation
    Rng rng(123);
    Tensor xin = random_tensor({1, 2, 6, 7, 5}, rng);
    Tensor kern = random_tensor({3, 2, 2, 2, 2}, rng);
    const std::int64_t stride = 2, pad = 1, dil = 2;
    Tensor out = conv_nd(xin, kern, stride, pad, dil, 3);
    const std::int64_t OD = out.extent(2), OH = out.extent(3), OW = out.extent(4);
    double md = 0.0;
    for (std::int64_t co = 0; co < 3; ++co)
        for (std::int64_t oz = 0; oz < OD; ++oz)
            for (std::int64_t oy = 0; oy < OH; ++oy)
                for (std::int64_t ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (std::int64_t ci = 0; ci < 2; ++ci)
                        for (std::int64_t kz = 0; kz < 2; ++kz)
                            for (std::int64_t ky = 0; ky < 2; ++ky)
                                for (std::int64_t kx = 0; kx < 2; ++kx) {
                                    const std::int64_t iz = oz * stride - pad + kz * dil;
                                    const std::int64_t iy = oy * stride - pad + ky * dil;
                                    const std::int64_t ix = ox * stride - pad + kx * dil;
                                    if (iz < 0 || iz >= 6 || iy < 0 || iy >= 7 || ix < 0 ||
                                        ix >= 5)
                                        continue;
                                    acc += xin.at({0, ci, iz, iy, ix}) *
                                           kern.at({co, ci, kz, ky, kx});
                                }
                    md = std::max(md, std::abs(out.at({0, co, oz, oy, ox}) - acc));
                }
    CHECK(md < 1e-12);
}

TEST_CASE("transposed conv: broadcast, shape, adjoint identity") {
    Tensor x = Tensor::from_vec({1, 1, 1, 1}, {1.0});
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor y = transposed_conv_nd(x, k, 2, 2);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == 1.0);

    Tensor x2 = Tensor::zeros({1, 1, 2, 2});
    CHECK(transposed_conv_nd(x2, k, 2, 2).shape() == Shape{1, 1, 4, 4});

    // <conv(x,k), y> == <x, transposed_conv(y,k)> on random small tensors;
    // spatial extents chosen so the stride tiles the input exactly.
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        const std::int64_t s = 1 + static_cast<std::int64_t>(rng.below(2));
        const std::int64_t ks = 2 + static_cast<std::int64_t>(rng.below(2));
        const std::int64_t oh = 2 + static_cast<std::int64_t>(rng.below(3));
        const std::int64_t ow = 2 + static_cast<std::int64_t>(rng.below(3));
        Tensor xin = random_tensor({1, 2, (oh - 1) * s + ks, (ow - 1) * s + ks}, rng);
        Tensor kern = random_tensor({3, 2, ks, ks}, rng);
        Tensor cx = conv_nd(xin, kern, s, 0, 1, 2);
        CHECK(cx.shape() == Shape{1, 3, oh, ow});
        Tensor yr = random_tensor(cx.shape(), rng);
        Tensor ty = transposed_conv_nd(yr, kern, s, 2);
        CHECK(ty.shape() == xin.shape());
        CHECK(std::abs(dot(cx, yr) - dot(xin, ty)) < 1e-10);
    }

    CHECK_THROWS_AS(transposed_conv_nd(Tensor::zeros({1, 2, 3, 3}),
                                       Tensor::zeros({3, 1, 2, 2}), 2, 2),
                    ShapeError);
}

TEST_CASE("movement ops differentiate correctly") {
    Rng rng(31);
    Tensor a = random_tensor({2, 3, 4}, rng, -1.0, 1.0, true);
    auto f = [&]() {
        Tensor t = permute(a, {2, 0, 1});       // [4,2,3]
        t = reshape(t, {4, 6});
        t = slice(t, {{1, 4}, {2, 6}});          // [3,4]
        t = pad_zero(t, {{1, 0}, {0, 2}});       // [4,6]
        Tensor c = concat({t, mul_scalar(t, 2.0)}, 1);
        return sum_all(mul(c, c));
    };
    auto report = gradcheck(f, {{"a", a}}, 1e-6, 1e-8);
    CHECK(report.passed());
}

TEST_CASE("adam: zero grad, first-step direction, symmetry, missing key") {
    AdamState state;
    state.learning_rate = 0.001;

    Tensor p1 = Tensor::from_vec({3}, {1.0, -2.0, 0.5}, true);
    Tensor p2 = Tensor::from_vec({3}, {1.0, -2.0, 0.5}, true);
    std::vector<NamedTensor> params{{"p1", p1}, {"p2", p2}};

    std::map<std::string, Tensor> zero{{"p1", Tensor::zeros({3})}, {"p2", Tensor::zeros({3})}};
    adam_step(state, params, zero);
    CHECK(p1.to_vec() == std::vector<double>{1.0, -2.0, 0.5});
    CHECK(state.step_count == 1);
    for (double m : state.moments["p1"].m) CHECK(m == 0.0);
    for (double v : state.moments["p1"].v) CHECK(v == 0.0);

    // first real step moves each weight by ~lr against the gradient sign
    AdamState fresh;
    fresh.learning_rate = 0.001;
    Tensor q = Tensor::from_vec({2}, {0.0, 0.0}, true);
    std::map<std::string, Tensor> g{{"q", Tensor::from_vec({2}, {0.3, -0.7})}};
    adam_step(fresh, {{"q", q}}, g);
    CHECK(q.data()[0] == doctest::Approx(-0.001).epsilon(1e-4));
    CHECK(q.data()[1] == doctest::Approx(0.001).epsilon(1e-4));

    // identical gradients produce identical updates
    std::map<std::string, Tensor> same{{"p1", Tensor::full({3}, 0.25)},
                                       {"p2", Tensor::full({3}, 0.25)}};
    adam_step(state, params, same);
    CHECK(p1.to_vec() == p2.to_vec());

    CHECK_THROWS_AS(adam_step(state, params, std::map<std::string, Tensor>{}), ContractError);
}

TEST_CASE("gradcheck: analytic cases") {
    Tensor w = Tensor::uniform({5}, 3, -1.0, 1.0, true);
    auto sum_sq = [&]() { return sum_all(mul(w, w)); };
    auto report = gradcheck(sum_sq, {{"w", w}}, 1e-6, 1e-9);
    CHECK(report.passed());
    CHECK(report.max_rel_error < 1e-9);

    auto constant = [&]() { return mul_scalar(sum_all(mul_scalar(w, 0.0)), 1.0); };
    auto creport = gradcheck(constant, {{"w", w}}, 1e-6, 1e-9);
    CHECK(creport.passed());
    CHECK(creport.max_rel_error == 0.0);
}

TEST_CASE("gradcheck: conv and transposed conv") {
    Rng rng(77);
    Tensor x = random_tensor({1, 2, 5, 5}, rng, -1.0, 1.0, true);
    Tensor k = random_tensor({2, 2, 3, 3}, rng, -1.0, 1.0, true);
    auto f = [&]() {
        Tensor c = conv_nd(x, k, 2, 1, 1, 2);
        Tensor t = transposed_conv_nd(c, k, 2, 2);
        return mean_all(mul(t, t));
    };
    auto report = gradcheck(f, {{"x", x}, {"k", k}}, 1e-6, 1e-6);
    CHECK(report.passed());
}

TEST_CASE("gradcheck: softmax, log-softmax, unaries") {
    Rng rng(13);
    Tensor x = random_tensor({3, 4}, rng, -2.0, 2.0, true);
    auto f = [&]() {
        Tensor s = softmax_axis(x, 1);
        Tensor l = log_softmax_axis(x, 1);
        Tensor u = sigmoid(exp(mul_scalar(x, 0.3)));
        Tensor q = sqrt_safe(add_scalar(mul(x, x), 0.5));
        return add(add(sum_all(mul(s, s)), sum_all(mul(l, q))), sum_all(u));
    };
    auto report = gradcheck(f, {{"x", x}}, 1e-6, 1e-8);
    CHECK(report.passed());
}
