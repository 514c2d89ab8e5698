#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "capseg/losses.hpp"
#include "capseg/metrics.hpp"
#include "capseg/optim.hpp"
#include "capseg/rng.hpp"
#include "test_utils.hpp"

using namespace capseg;
using capseg::testing::random_tensor;

TEST_CASE("margin loss: analytic unit values") {
    // one position, two classes, target class 1
    LabelMap target{{1, 1}, {1}};
    Tensor onehot = one_hot(target, 2);

    // both hinges inactive
    Tensor satisfied = Tensor::from_vec({1, 1, 2}, {0.1, 0.9});
    CHECK(margin_loss(satisfied, onehot).item() == 0.0);

    // true class at zero length: (0.9)^2
    Tensor missed = Tensor::from_vec({1, 1, 2}, {0.1, 0.0});
    CHECK(margin_loss(missed, onehot).item() == 0.9 * 0.9);
    CHECK(margin_loss(missed, onehot).item() == doctest::Approx(0.81).epsilon(1e-15));

    // a wrong class at full length while the true class is satisfied
    Tensor wrong = Tensor::from_vec({1, 1, 2}, {1.0, 0.9});
    CHECK(margin_loss(wrong, onehot).item() == 0.5 * (0.9 * 0.9));
    CHECK(margin_loss(wrong, onehot).item() == doctest::Approx(0.405).epsilon(1e-15));

    // zero iff all true-class lengths >= m+ and all false-class <= m-
    Tensor almost = Tensor::from_vec({1, 1, 2}, {0.1, 0.89});
    CHECK(margin_loss(almost, onehot).item() > 0.0);
    Tensor leak = Tensor::from_vec({1, 1, 2}, {0.11, 0.9});
    CHECK(margin_loss(leak, onehot).item() > 0.0);

    CHECK_THROWS_AS(margin_loss(Tensor::zeros({1, 1, 3}), onehot), ShapeError);
}

TEST_CASE("weighted cross entropy: uniform, confident, zero-weight") {
    LabelMap target{{2, 2}, {0, 1, 1, 0}};

    Tensor uniform = Tensor::zeros({2, 2, 2});
    CHECK(weighted_cross_entropy(uniform, target, {1.0, 1.0}).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // a huge margin on the correct class drives the loss to zero
    Tensor confident = Tensor::zeros({2, 2, 2});
    for (std::int64_t p = 0; p < 4; ++p)
        confident.data()[p * 2 + target.at_flat(p)] = 60.0;
    CHECK(weighted_cross_entropy(confident, target, {1.0, 1.0}).item() < 1e-20);

    // zero weight screens the background class entirely
    Tensor skewed = Tensor::zeros({2, 2, 2});
    for (std::int64_t p = 0; p < 4; ++p) skewed.data()[p * 2] = 3.0;  // favor class 0
    const double w0 = weighted_cross_entropy(skewed, target, {0.0, 1.0}).item();
    LabelMap fg_only{{2, 2}, {1, 1, 1, 1}};
    // background rows contribute nothing: loss equals the class-1 rows alone
    Tensor skewed_fg = Tensor::zeros({2, 2, 2});
    for (std::int64_t p = 0; p < 4; ++p) skewed_fg.data()[p * 2] = 3.0;
    const double ref =
        weighted_cross_entropy(skewed_fg, fg_only, {0.0, 1.0}).item() * 4.0 / 4.0;
    // manual: only positions 1,2 carry weight in `target`
    Tensor row = Tensor::from_vec({1, 1, 2}, {3.0, 0.0});
    LabelMap one{{1, 1}, {1}};
    const double per_row = weighted_cross_entropy(row, one, {0.0, 1.0}).item();
    CHECK(w0 == doctest::Approx(per_row * 2.0 / 4.0).epsilon(1e-12));
    (void)ref;

    CHECK_THROWS_AS(weighted_cross_entropy(uniform, LabelMap{{2, 2}, {0, 2, 0, 0}}, {1.0, 1.0}),
                    ShapeError);
}

TEST_CASE("masked reconstruction loss: unit values and screening") {
    Tensor image = Tensor::full({1, 2, 2}, 1.0);
    Tensor mask = Tensor::full({2, 2}, 1.0);

    // perfect masked reconstruction
    CHECK(masked_reconstruction_loss(image, image, mask, 1.0).item() == 0.0);

    // empty mask, zero output
    Tensor zmask = Tensor::zeros({2, 2});
    Tensor zout = Tensor::zeros({1, 2, 2});
    CHECK(masked_reconstruction_loss(image, zout, zmask, 1.0).item() == 0.0);

    // I=1, S=1, O=0 on 2x2 with gamma=1: (1/4) * 4 = 1
    CHECK(masked_reconstruction_loss(image, zout, mask, 1.0).item() == 1.0);

    // loss is exactly invariant to input values at masked-out pixels
    Rng rng(5);
    Tensor in1 = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
    Tensor in2 = in1.detach();
    Tensor half = Tensor::zeros({4, 4});
    for (std::int64_t i = 0; i < 8; ++i) half.data()[i] = 1.0;
    for (std::int64_t i = 8; i < 16; ++i) in2.data()[i] = rng.uniform(0.0, 1.0);
    Tensor out = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
    CHECK(masked_reconstruction_loss(in1, out, half, 0.7).item() ==
          masked_reconstruction_loss(in2, out, half, 0.7).item());

    // gradient w.r.t. O at S=0 pixels is 2 gamma / (H W) * O
    Tensor o = random_tensor({1, 4, 4}, rng, 0.1, 0.9, true);
    Tensor loss = masked_reconstruction_loss(in1, o, half, 0.7);
    backward(loss);
    Tensor g = o.grad();
    for (std::int64_t i = 8; i < 16; ++i)
        CHECK(g.data()[i] == doctest::Approx(2.0 * 0.7 / 16.0 * o.data()[i]).epsilon(1e-12));

    CHECK_THROWS_AS(masked_reconstruction_loss(image, Tensor::zeros({1, 2, 3}), mask, 1.0),
                    ShapeError);
    Tensor notbinary = Tensor::full({2, 2}, 0.5);
    CHECK_THROWS_AS(masked_reconstruction_loss(image, zout, notbinary, 1.0), ContractError);
}

TEST_CASE("total loss: additivity and gradient composition") {
    Tensor a = Tensor::scalar(0.81);
    Tensor b = Tensor::scalar(std::log(2.0));
    Tensor c = Tensor::scalar(1.0);
    LossBreakdown sum = total_loss(a, b, c);
    CHECK(sum.total_value() == 0.81 + std::log(2.0) + 1.0);

    LossBreakdown zero = total_loss(Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0));
    CHECK(zero.total_value() == 0.0);

    CHECK_THROWS_AS(
        total_loss(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()), b, c),
        ContractError);

    // gradient of the total equals the sum of the component gradients
    Rng rng(9);
    Tensor x = random_tensor({6}, rng, -1.0, 1.0, true);
    auto f = [&]() {
        Tensor m = sum_all(square(x));
        Tensor ce = mul_scalar(sum_all(exp(mul_scalar(x, 0.5))), 0.1);
        Tensor rc = mul_scalar(sum_all(mul(x, x)), 0.25);
        return total_loss(m, ce, rc).total;
    };
    auto report = gradcheck(f, {{"x", x}}, 1e-6, 1e-7);
    CHECK(report.passed());
}

TEST_CASE("pretext loss: zero case, normalization, symmetry") {
    Rng rng(3);
    Tensor v = random_tensor({2, 3, 3}, rng);
    CHECK(pretext_loss(v, v).item() == 0.0);

    // zero gradient at the exact-match point
    Tensor vg = v.clone_leaf();
    vg.set_requires_grad(true);
    Tensor same = v.detach();
    backward(pretext_loss(vg, same));
    for (double g : vg.grad().to_vec()) CHECK(g == 0.0);

    // single differing element of magnitude 3 under sqrt(count) normalization
    Tensor w = v.detach();
    w.data()[4] += 3.0;
    CHECK(pretext_loss(v, w).item() ==
          doctest::Approx(3.0 / std::sqrt(18.0)).epsilon(1e-12));
    CHECK(pretext_loss(v, w).item() == pretext_loss(w, v).item());

    CHECK_THROWS_AS(pretext_loss(v, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("seg_metrics: identity, disjoint, counting oracle, conventions") {
    // identical masks
    LabelMap m{{4, 4}, {0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1}};
    SegMetrics same = seg_metrics(m, m, 2);
    CHECK(same.per_class[0].dice == 1.0);
    CHECK(same.per_class[1].dice == 1.0);
    CHECK(same.mean_dice == 1.0);

    // disjoint foreground
    LabelMap a{{2, 2}, {1, 0, 0, 0}};
    LabelMap b{{2, 2}, {0, 1, 0, 0}};
    CHECK(seg_metrics(a, b, 2).per_class[1].dice == 0.0);

    // prediction covers exactly half of a 100-pixel region, no false positives
    LabelMap truth{{10, 20}, std::vector<std::uint8_t>(200, 0)};
    LabelMap pred = truth;
    for (int i = 0; i < 100; ++i) truth.labels[static_cast<size_t>(i)] = 1;
    for (int i = 0; i < 50; ++i) pred.labels[static_cast<size_t>(i)] = 1;
    SegMetrics half = seg_metrics(pred, truth, 2);
    CHECK(half.per_class[1].dice == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(half.per_class[1].precision == 1.0);
    CHECK(half.per_class[1].recall == 0.5);

    // dice is symmetric in (pred, true)
    CHECK(seg_metrics(truth, pred, 2).per_class[1].dice == half.per_class[1].dice);

    // empty-class conventions
    LabelMap empty{{2, 2}, {0, 0, 0, 0}};
    CHECK(seg_metrics(empty, empty, 2).per_class[1].dice == 1.0);
    CHECK(seg_metrics(empty, a, 2).per_class[1].dice == 0.0);
    CHECK(seg_metrics(a, empty, 2).per_class[1].dice == 0.0);

    // everything in [0, 1]
    Rng rng(8);
    for (int t = 0; t < 20; ++t) {
        LabelMap x{{5, 5}, {}}, y{{5, 5}, {}};
        for (int i = 0; i < 25; ++i) {
            x.labels.push_back(static_cast<std::uint8_t>(rng.below(3)));
            y.labels.push_back(static_cast<std::uint8_t>(rng.below(3)));
        }
        SegMetrics sm = seg_metrics(x, y, 3);
        for (const auto& c : sm.per_class) {
            CHECK(c.dice >= 0.0);
            CHECK(c.dice <= 1.0);
            CHECK(c.precision >= 0.0);
            CHECK(c.precision <= 1.0);
            CHECK(c.recall >= 0.0);
            CHECK(c.recall <= 1.0);
        }
    }
}

TEST_CASE("shift_sensitivity: constant and threshold predictors") {
    // constant predictor: exact zeros
    auto constant_model = [](const Tensor& image) {
        Shape out{image.extent(1), image.extent(2), 2};
        Tensor probs = Tensor::zeros(out);
        for (std::int64_t i = 0; i < probs.numel(); i += 2) {
            probs.data()[i] = 0.75;
            probs.data()[i + 1] = 0.25;
        }
        return probs;
    };
    Tensor image = Tensor::uniform({1, 8, 8}, 3, 0.0, 1.0);
    SensitivityReport r = shift_sensitivity(constant_model, image, 1);
    CHECK(r.p_label_change == 0.0);
    CHECK(r.mean_abs_change == 0.0);

    // per-pixel threshold predictor on a constant image: no change either
    auto threshold_model = [](const Tensor& img) {
        Shape out{img.extent(1), img.extent(2), 2};
        Tensor probs = Tensor::zeros(out);
        const std::int64_t n = img.extent(1) * img.extent(2);
        for (std::int64_t p = 0; p < n; ++p) {
            const bool hot = img.data()[p] > 0.5;
            probs.data()[p * 2] = hot ? 0.1 : 0.9;
            probs.data()[p * 2 + 1] = hot ? 0.9 : 0.1;
        }
        return probs;
    };
    Tensor flat = Tensor::full({1, 8, 8}, 0.8);
    SensitivityReport rt = shift_sensitivity(threshold_model, flat, 1);
    CHECK(rt.p_label_change == 0.0);
    CHECK(rt.mean_abs_change == 0.0);

    CHECK_THROWS_AS(shift_sensitivity(constant_model, Tensor::full({1, 1, 4}, 0.1), 1),
                    ShapeError);
}
