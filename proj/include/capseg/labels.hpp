#pragma once

#include <cstdint>
#include <vector>

#include "capseg/tensor.hpp"

namespace capseg {

// Integer per-position class labels (segmentation mask).
struct LabelMap {
    Shape shape;  // spatial extents
    std::vector<std::uint8_t> labels;

    std::int64_t numel() const { return shape_numel(shape); }
    std::uint8_t at_flat(std::int64_t i) const { return labels[static_cast<size_t>(i)]; }
    bool operator==(const LabelMap& other) const {
        return shape == other.shape && labels == other.labels;
    }
};

// Constant (no-grad) one-hot tensor [spatial..., classes].
Tensor one_hot(const LabelMap& labels, int classes);

// Constant binary mask [spatial...]: 1 where pred(label) holds.
Tensor binary_mask(const LabelMap& labels, std::uint8_t positive_class);
Tensor foreground_mask(const LabelMap& labels);  // label > 0

// Nearest-neighbor reduction by an integer factor per axis (samples the
// center of each factor-sized cell).
LabelMap nn_downsample(const LabelMap& labels, std::int64_t factor);

// Per-position argmax over the trailing class axis of [spatial..., N].
LabelMap argmax_labels(const Tensor& class_scores);

LabelMap all_background(const Shape& spatial);

}  // namespace capseg
