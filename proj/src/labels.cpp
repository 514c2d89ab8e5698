#include "capseg/labels.hpp"

namespace capseg {

Tensor one_hot(const LabelMap& labels, int classes) {
    check_contract(classes >= 1, "one_hot: classes must be >= 1");
    Shape shape = labels.shape;
    shape.push_back(classes);
    Tensor out = Tensor::zeros(shape);
    double* ov = out.data();
    const std::int64_t n = labels.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint8_t c = labels.at_flat(i);
        check_contract(c < classes, "one_hot: label " + std::to_string(c) +
                                        " out of range for " + std::to_string(classes) +
                                        " classes");
        ov[i * classes + c] = 1.0;
    }
    return out;
}

Tensor binary_mask(const LabelMap& labels, std::uint8_t positive_class) {
    Tensor out = Tensor::zeros(labels.shape);
    double* ov = out.data();
    const std::int64_t n = labels.numel();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = labels.at_flat(i) == positive_class ? 1.0 : 0.0;
    return out;
}

Tensor foreground_mask(const LabelMap& labels) {
    Tensor out = Tensor::zeros(labels.shape);
    double* ov = out.data();
    const std::int64_t n = labels.numel();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = labels.at_flat(i) > 0 ? 1.0 : 0.0;
    return out;
}

LabelMap nn_downsample(const LabelMap& labels, std::int64_t factor) {
    check_contract(factor >= 1, "nn_downsample: factor must be >= 1");
    if (factor == 1) return labels;
    LabelMap out;
    for (auto e : labels.shape) {
        check_shape(e % factor == 0, "nn_downsample: extent " + std::to_string(e) +
                                         " not divisible by factor " + std::to_string(factor));
        out.shape.push_back(e / factor);
    }
    out.labels.resize(static_cast<size_t>(out.numel()));
    const int r = static_cast<int>(labels.shape.size());
    std::vector<std::int64_t> strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        strides[static_cast<size_t>(i)] =
            strides[static_cast<size_t>(i + 1)] * labels.shape[static_cast<size_t>(i + 1)];

    std::vector<std::int64_t> idx(static_cast<size_t>(r), 0);
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t src = 0;
        for (int d = 0; d < r; ++d) src += (idx[static_cast<size_t>(d)] * factor + factor / 2) *
                                           strides[static_cast<size_t>(d)];
        out.labels[static_cast<size_t>(i)] = labels.at_flat(src);
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < out.shape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return out;
}

LabelMap argmax_labels(const Tensor& class_scores) {
    check_shape(class_scores.rank() >= 2, "argmax_labels: expected [spatial..., classes]");
    const std::int64_t classes = class_scores.extent(class_scores.rank() - 1);
    LabelMap out;
    out.shape = Shape(class_scores.shape().begin(), class_scores.shape().end() - 1);
    const std::int64_t n = out.numel();
    out.labels.resize(static_cast<size_t>(n));
    const double* v = class_scores.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = v + i * classes;
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;  // ties resolve to the lowest index
        out.labels[static_cast<size_t>(i)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

LabelMap all_background(const Shape& spatial) {
    LabelMap out;
    out.shape = spatial;
    out.labels.assign(static_cast<size_t>(shape_numel(spatial)), 0);
    return out;
}

}  // namespace capseg
