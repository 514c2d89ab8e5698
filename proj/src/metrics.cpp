#include "capseg/metrics.hpp"

#include <cmath>
#include <cstring>

namespace capseg {

SegMetrics seg_metrics(const LabelMap& prediction, const LabelMap& truth, int classes) {
    check_shape(prediction.shape == truth.shape, "seg_metrics: mask shape mismatch");
    check_contract(classes >= 1, "seg_metrics: classes must be >= 1");
    const std::int64_t n = truth.numel();
    std::vector<std::int64_t> tp(static_cast<size_t>(classes), 0);
    std::vector<std::int64_t> fp(static_cast<size_t>(classes), 0);
    std::vector<std::int64_t> fn(static_cast<size_t>(classes), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint8_t p = prediction.at_flat(i);
        const std::uint8_t t = truth.at_flat(i);
        check_contract(p < classes && t < classes, "seg_metrics: label out of range");
        if (p == t) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[t];
        }
    }

    SegMetrics out;
    out.per_class.resize(static_cast<size_t>(classes));
    for (int c = 0; c < classes; ++c) {
        const auto i = static_cast<size_t>(c);
        const std::int64_t pred_count = tp[i] + fp[i];
        const std::int64_t true_count = tp[i] + fn[i];
        ClassMetrics& m = out.per_class[i];
        if (pred_count == 0 && true_count == 0) {
            m.dice = m.precision = m.recall = 1.0;  // class absent from both masks
        } else {
            m.dice = pred_count + true_count > 0
                         ? 2.0 * static_cast<double>(tp[i]) /
                               static_cast<double>(pred_count + true_count)
                         : 0.0;
            m.precision = pred_count > 0
                              ? static_cast<double>(tp[i]) / static_cast<double>(pred_count)
                              : 0.0;
            m.recall = true_count > 0
                           ? static_cast<double>(tp[i]) / static_cast<double>(true_count)
                           : 0.0;
        }
    }

    const int first = classes > 1 ? 1 : 0;
    const int fg = classes > 1 ? classes - 1 : 1;
    for (int c = first; c < classes; ++c) {
        out.mean_dice += out.per_class[static_cast<size_t>(c)].dice;
        out.mean_precision += out.per_class[static_cast<size_t>(c)].precision;
        out.mean_recall += out.per_class[static_cast<size_t>(c)].recall;
    }
    out.mean_dice /= fg;
    out.mean_precision /= fg;
    out.mean_recall /= fg;
    return out;
}

SegMetrics average_metrics(const std::vector<SegMetrics>& per_sample) {
    check_contract(!per_sample.empty(), "average_metrics: no samples");
    SegMetrics out;
    const size_t classes = per_sample[0].per_class.size();
    out.per_class.resize(classes);
    for (const auto& s : per_sample) {
        check_contract(s.per_class.size() == classes, "average_metrics: class count mismatch");
        for (size_t c = 0; c < classes; ++c) {
            out.per_class[c].dice += s.per_class[c].dice;
            out.per_class[c].precision += s.per_class[c].precision;
            out.per_class[c].recall += s.per_class[c].recall;
        }
        out.mean_dice += s.mean_dice;
        out.mean_precision += s.mean_precision;
        out.mean_recall += s.mean_recall;
    }
    const auto n = static_cast<double>(per_sample.size());
    for (auto& c : out.per_class) {
        c.dice /= n;
        c.precision /= n;
        c.recall /= n;
    }
    out.mean_dice /= n;
    out.mean_precision /= n;
    out.mean_recall /= n;
    return out;
}

SensitivityReport shift_sensitivity(const std::function<Tensor(const Tensor&)>& model,
                                    const Tensor& image, std::int64_t shift) {
    check_contract(shift >= 1, "shift_sensitivity: shift must be >= 1");
    check_shape(image.rank() >= 2, "shift_sensitivity: image must be [C, spatial...]");
    const int sr = image.rank() - 1;
    Shape spatial(image.shape().begin() + 1, image.shape().end());
    for (auto e : spatial)
        check_shape(e > shift, "shift_sensitivity: image smaller than " +
                                   std::to_string(shift + 1) + " pixels on some axis");

    const Tensor probs0 = model(image);
    check_shape(probs0.rank() == sr + 1, "shift_sensitivity: model output must be [spatial..., N]");
    const std::int64_t classes = probs0.extent(sr);

    std::vector<std::int64_t> strides(static_cast<size_t>(sr), 1);
    for (int i = sr - 2; i >= 0; --i)
        strides[static_cast<size_t>(i)] =
            strides[static_cast<size_t>(i + 1)] * spatial[static_cast<size_t>(i + 1)];

    double change_sum = 0.0;
    double abs_sum = 0.0;
    for (int axis = 0; axis < sr; ++axis) {
        // Translate content by `shift` along this axis, zero-filling the edge.
        Tensor shifted = Tensor::zeros(image.shape());
        {
            const double* iv = image.data();
            double* svv = shifted.data();
            const std::int64_t channels = image.extent(0);
            const std::int64_t sp_n = shape_numel(spatial);
            std::vector<std::int64_t> idx(static_cast<size_t>(sr), 0);
            for (std::int64_t p = 0; p < sp_n; ++p) {
                if (idx[static_cast<size_t>(axis)] >= shift) {
                    const std::int64_t src = p - shift * strides[static_cast<size_t>(axis)];
                    for (std::int64_t c = 0; c < channels; ++c)
                        svv[c * sp_n + p] = iv[c * sp_n + src];
                }
                for (int d = sr - 1; d >= 0; --d) {
                    if (++idx[static_cast<size_t>(d)] < spatial[static_cast<size_t>(d)]) break;
                    idx[static_cast<size_t>(d)] = 0;
                }
            }
        }
        const Tensor probs1 = model(shifted);

        // Compare probs0 at p with probs1 at p + shift over the overlap.
        const double* p0 = probs0.data();
        const double* p1 = probs1.data();
        std::int64_t positions = 0, changed = 0;
        double abs_acc = 0.0;
        const std::int64_t sp_n = shape_numel(spatial);
        std::vector<std::int64_t> idx(static_cast<size_t>(sr), 0);
        for (std::int64_t p = 0; p < sp_n; ++p) {
            if (idx[static_cast<size_t>(axis)] + shift < spatial[static_cast<size_t>(axis)]) {
                const std::int64_t q = p + shift * strides[static_cast<size_t>(axis)];
                const double* r0 = p0 + p * classes;
                const double* r1 = p1 + q * classes;
                std::int64_t a0 = 0, a1 = 0;
                for (std::int64_t c = 1; c < classes; ++c) {
                    if (r0[c] > r0[a0]) a0 = c;
                    if (r1[c] > r1[a1]) a1 = c;
                }
                if (a0 != a1) ++changed;
                for (std::int64_t c = 0; c < classes; ++c) abs_acc += std::abs(r0[c] - r1[c]);
                ++positions;
            }
            for (int d = sr - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < spatial[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
        change_sum += static_cast<double>(changed) / static_cast<double>(positions);
        abs_sum += abs_acc / static_cast<double>(positions * classes);
    }

    SensitivityReport report;
    report.p_label_change = change_sum / sr;
    report.mean_abs_change = abs_sum / sr;
    return report;
}

}  // namespace capseg
