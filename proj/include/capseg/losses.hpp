#pragma once

#include <vector>

#include "capseg/labels.hpp"
#include "capseg/tensor.hpp"

namespace capseg {

struct MarginConfig {
    double m_plus = 0.9;
    double m_minus = 0.1;
    double down_weight = 0.5;  // lambda on the absent-class hinge
};

// Mean over positions of
//   sum_k [ I_k * max(0, m+ - |v_k|)^2 + lambda (1 - I_k) * max(0, |v_k| - m-)^2 ].
// lengths and target_onehot are [spatial..., classes].
Tensor margin_loss(const Tensor& lengths, const Tensor& target_onehot,
                   const MarginConfig& config = {});

// Mean over positions of -w_target * log softmax(logits)_target.
// logits: [spatial..., classes].
Tensor weighted_cross_entropy(const Tensor& logits, const LabelMap& target,
                              const std::vector<double>& class_weights);

// Inverse-frequency weights for one batch, clamped to [0.1, 10].
std::vector<double> inverse_frequency_weights(const std::vector<const LabelMap*>& targets,
                                              int classes);

// Squared error against the mask-screened target R = I * S, normalized by the
// spatial pixel count and scaled by gamma. mask is binary over [spatial...].
Tensor masked_reconstruction_loss(const Tensor& input, const Tensor& output,
                                  const Tensor& mask, double gamma);

struct LossBreakdown {
    Tensor margin;
    Tensor cross_entropy;
    Tensor reconstruction;
    Tensor total;

    double margin_value() const { return margin.item(); }
    double cross_entropy_value() const { return cross_entropy.item(); }
    double reconstruction_value() const { return reconstruction.item(); }
    double total_value() const { return total.item(); }
};

// total = margin + cross_entropy + reconstruction; all parts must be finite.
LossBreakdown total_loss(const Tensor& margin, const Tensor& cross_entropy,
                         const Tensor& reconstruction);

// ||Vi - Vj||_2 / sqrt(element count); exactly zero iff Vi == Vj.
Tensor pretext_loss(const Tensor& vi, const Tensor& vj);

}  // namespace capseg
