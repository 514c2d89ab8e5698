#pragma once

#include <optional>
#include <vector>

#include "capseg/tensor.hpp"

namespace capseg {

// Spatial grid of capsule vectors, values laid out [spatial..., types, dim].
struct CapsuleGrid {
    Tensor values;
    int spatial_rank = 2;

    std::int64_t types() const { return values.extent(spatial_rank); }
    std::int64_t dim() const { return values.extent(spatial_rank + 1); }
    Shape spatial() const {
        return Shape(values.shape().begin(), values.shape().begin() + spatial_rank);
    }
};

enum class CapsuleMode { conv, deconv };

// Locally-constrained capsule layer parameters. The transform kernel is
// shared across all spatial positions:
//   transform: [k^rank..., Cin, din, Cout, dout] flattened to
//              [K, Cin, din, Cout, dout] with K = kernel^rank
//   bias:      [Cout, dout], added to every vote when use_bias is set
struct CapsuleLayerParams {
    Tensor transform;
    Tensor bias;
    int iterations = 3;
    std::int64_t kernel = 1;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    CapsuleMode mode = CapsuleMode::conv;
    bool use_bias = false;
};

// Per-iteration routing state snapshot (plain values, outside the graph).
struct RoutingStep {
    std::vector<double> coupling;
    std::vector<double> priors;
};

struct RoutingTrace {
    Shape coupling_shape;  // [..., children, parents]
    std::vector<RoutingStep> steps;
};

struct RoutingResult {
    Tensor parents;   // [..., Cout, dout]
    Tensor coupling;  // [..., n, Cout], the coefficients used in the last iteration
    Tensor priors;    // [..., n, Cout], after the final agreement update
};

// v = s * |s| / (1 + |s|^2) along the last axis, with the |s| -> 0 limit
// handled by an epsilon inside the norm.
Tensor squash(const Tensor& s);

// Length (euclidean norm over the last axis) of every capsule: [..., A] -> [...].
Tensor vector_lengths(const Tensor& capsules);

// Reshape a feature map [C, spatial...] into C/dim capsule types of the given
// dimension. Pure data movement; invertible bitwise.
CapsuleGrid to_primary_capsules(const Tensor& features, std::int64_t capsule_dim);
Tensor primary_capsules_to_features(const CapsuleGrid& grid);

// Votes for one kernel window: window [ksp..., Cin, din] -> [ksp..., Cin, Cout, dout].
Tensor compute_votes(const Tensor& window, const CapsuleLayerParams& params, int rank);

// Routing by agreement over votes [..., n, Cout, dout] with initial log
// priors [..., n, Cout]. Each iteration: coupling = softmax over parents,
// weighted vote sum, squash, then agreement added to the priors.
RoutingResult dynamic_routing(const Tensor& votes, int iterations,
                              const Tensor& initial_priors, RoutingTrace* trace = nullptr);

CapsuleGrid capsule_conv_nd(const CapsuleGrid& input, const CapsuleLayerParams& params,
                            int rank);
CapsuleGrid capsule_deconv_nd(const CapsuleGrid& input, const CapsuleLayerParams& params,
                              int rank);

Tensor capsule_lengths(const CapsuleGrid& grid);  // [spatial..., C]

// Classic fully-connected capsule layer: per-(child, parent) transforms,
// every child votes for every parent. Doubles as the oracle for the
// windowed layers when weights are tied.
struct FullyConnectedCapsParams {
    Tensor transform;  // [n, din, Cout, dout]
    Tensor bias;       // [Cout, dout]
    int iterations = 3;
    bool use_bias = true;
};

RoutingResult fully_connected_routing(const Tensor& children,
                                      const FullyConnectedCapsParams& params,
                                      RoutingTrace* trace = nullptr);

}  // namespace capseg
