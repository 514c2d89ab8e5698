#pragma once

#include <functional>
#include <vector>

#include "capseg/labels.hpp"
#include "capseg/tensor.hpp"

namespace capseg {

struct ClassMetrics {
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

struct SegMetrics {
    std::vector<ClassMetrics> per_class;
    // Means over foreground classes (1..N-1); for N == 1 they fall back to class 0.
    double mean_dice = 0.0;
    double mean_precision = 0.0;
    double mean_recall = 0.0;
};

// Per-class dice / precision / recall from confusion counts. Empty-class
// convention: both masks empty -> 1.0, exactly one empty -> 0.0.
SegMetrics seg_metrics(const LabelMap& prediction, const LabelMap& truth, int classes);

// Averages per-sample metrics (macro average over samples).
SegMetrics average_metrics(const std::vector<SegMetrics>& per_sample);

struct SensitivityReport {
    double p_label_change = 0.0;
    double mean_abs_change = 0.0;
};

// Shifts the input by one pixel along each spatial axis in turn and compares
// predictions over the aligned overlap: fraction of argmax label changes and
// mean absolute probability change, averaged over the axes.
// `model` maps an image [C, spatial...] to per-position class probabilities
// [spatial..., N].
SensitivityReport shift_sensitivity(const std::function<Tensor(const Tensor&)>& model,
                                    const Tensor& image, std::int64_t shift = 1);

}  // namespace capseg
