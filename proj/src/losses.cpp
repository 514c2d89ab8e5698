#include "capseg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace capseg {

Tensor margin_loss(const Tensor& lengths, const Tensor& target_onehot,
                   const MarginConfig& config) {
    check_shape(lengths.shape() == target_onehot.shape(),
                "margin_loss: lengths " + shape_str(lengths.shape()) + " vs target " +
                    shape_str(target_onehot.shape()));
    check_shape(lengths.rank() >= 1, "margin_loss: class axis required");
    std::int64_t positions = 1;
    for (int i = 0; i + 1 < lengths.rank(); ++i) positions *= lengths.extent(i);

    Tensor present = square(relu(add_scalar(neg(lengths), config.m_plus)));
    Tensor absent = square(relu(add_scalar(lengths, -config.m_minus)));
    Tensor inverted = add_scalar(neg(target_onehot), 1.0);
    Tensor per_entry = add(mul(target_onehot, present),
                           mul_scalar(mul(inverted, absent), config.down_weight));
    return mul_scalar(sum_all(per_entry), 1.0 / static_cast<double>(positions));
}

Tensor weighted_cross_entropy(const Tensor& logits, const LabelMap& target,
                              const std::vector<double>& class_weights) {
    check_shape(logits.rank() >= 2, "weighted_cross_entropy: expected [spatial..., classes]");
    const std::int64_t classes = logits.extent(logits.rank() - 1);
    check_shape(static_cast<std::int64_t>(class_weights.size()) == classes,
                "weighted_cross_entropy: weight count mismatch");
    for (double w : class_weights)
        check_contract(w >= 0.0, "weighted_cross_entropy: weights must be nonnegative");
    {
        Shape spatial(logits.shape().begin(), logits.shape().end() - 1);
        check_shape(target.shape == spatial, "weighted_cross_entropy: target shape mismatch");
    }
    const std::int64_t positions = target.numel();
    for (std::int64_t i = 0; i < positions; ++i)
        check_shape(target.at_flat(i) < classes,
                    "weighted_cross_entropy: label out of range at position " + std::to_string(i));

    // Weighted one-hot selector: w_target at the target entry, 0 elsewhere.
    Tensor selector = Tensor::zeros(logits.shape());
    double* sv = selector.data();
    for (std::int64_t i = 0; i < positions; ++i)
        sv[i * classes + target.at_flat(i)] = class_weights[target.at_flat(i)];

    Tensor lsm = log_softmax_axis(logits, logits.rank() - 1);
    return mul_scalar(sum_all(mul(selector, lsm)), -1.0 / static_cast<double>(positions));
}

std::vector<double> inverse_frequency_weights(const std::vector<const LabelMap*>& targets,
                                              int classes) {
    std::vector<double> counts(static_cast<size_t>(classes), 0.0);
    double total = 0.0;
    for (const auto* t : targets) {
        const std::int64_t n = t->numel();
        for (std::int64_t i = 0; i < n; ++i) counts[t->at_flat(i)] += 1.0;
        total += static_cast<double>(n);
    }
    std::vector<double> weights(static_cast<size_t>(classes), 1.0);
    for (int c = 0; c < classes; ++c) {
        const double freq = counts[static_cast<size_t>(c)] / total;
        const double w = freq > 0.0 ? 1.0 / (static_cast<double>(classes) * freq) : 10.0;
        weights[static_cast<size_t>(c)] = std::clamp(w, 0.1, 10.0);
    }
    return weights;
}

Tensor masked_reconstruction_loss(const Tensor& input, const Tensor& output,
                                  const Tensor& mask, double gamma) {
    check_shape(input.shape() == output.shape(),
                "masked_reconstruction_loss: input " + shape_str(input.shape()) + " vs output " +
                    shape_str(output.shape()));
    {
        const double* mv = mask.data();
        for (std::int64_t i = 0; i < mask.numel(); ++i)
            check_contract(mv[i] == 0.0 || mv[i] == 1.0,
                           "masked_reconstruction_loss: mask must be binary");
    }
    // Target R = I * S as data (the input image is not differentiated).
    Tensor target = Tensor::zeros(input.shape());
    {
        const std::int64_t spatial = mask.numel();
        check_shape(input.numel() % spatial == 0,
                    "masked_reconstruction_loss: mask does not tile the image");
        const std::int64_t channels = input.numel() / spatial;
        const double* iv = input.data();
        const double* mv = mask.data();
        double* tv = target.data();
        for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t p = 0; p < spatial; ++p)
                tv[c * spatial + p] = iv[c * spatial + p] * mv[p];
    }
    const double scale = gamma / static_cast<double>(mask.numel());
    return mul_scalar(sum_all(square(sub(target, output))), scale);
}

LossBreakdown total_loss(const Tensor& margin, const Tensor& cross_entropy,
                         const Tensor& reconstruction) {
    for (const auto* part : {&margin, &cross_entropy, &reconstruction})
        check_contract(std::isfinite(part->item()), "total_loss: non-finite loss component");
    LossBreakdown out;
    out.margin = margin;
    out.cross_entropy = cross_entropy;
    out.reconstruction = reconstruction;
    out.total = add(add(margin, cross_entropy), reconstruction);
    return out;
}

Tensor pretext_loss(const Tensor& vi, const Tensor& vj) {
    check_shape(vi.shape() == vj.shape(), "pretext_loss: shape mismatch " +
                                              shape_str(vi.shape()) + " vs " +
                                              shape_str(vj.shape()));
    Tensor ss = sum_all(square(sub(vi, vj)));
    // sqrt_safe keeps both the value and the gradient exactly zero at Vi == Vj.
    return mul_scalar(sqrt_safe(ss), 1.0 / std::sqrt(static_cast<double>(vi.numel())));
}

}  // namespace capseg
