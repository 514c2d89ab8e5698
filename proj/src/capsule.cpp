#include "capseg/capsule.hpp"

#include <cmath>

namespace capseg {

namespace {

constexpr double kNormEps2 = 1e-24;  // epsilon^2 with epsilon = 1e-12 in the norm

}  // namespace

Tensor squash(const Tensor& s) {
    check_shape(s.rank() >= 1, "squash: input must have a capsule axis");
    const int axis = s.rank() - 1;
    Tensor n2 = sum_axis(square(s), axis, /*keepdim=*/true);
    // |s| / (1 + |s|^2); the epsilon removes the 0/0 at s = 0 and vanishes
    // against any norm of practical size.
    Tensor scale = div(sqrt_safe(add_scalar(n2, kNormEps2)), add_scalar(n2, 1.0));
    return mul(s, scale);
}

Tensor vector_lengths(const Tensor& capsules) {
    check_shape(capsules.rank() >= 1, "vector_lengths: input must have a capsule axis");
    const int axis = capsules.rank() - 1;
    return sqrt_safe(sum_axis(square(capsules), axis, /*keepdim=*/false));
}

CapsuleGrid to_primary_capsules(const Tensor& features, std::int64_t capsule_dim) {
    check_shape(features.rank() >= 2, "to_primary_capsules: features must be [C, spatial...]");
    const std::int64_t channels = features.extent(0);
    check_shape(capsule_dim >= 1 && channels % capsule_dim == 0,
                "to_primary_capsules: " + std::to_string(channels) +
                    " channels not divisible by capsule dim " + std::to_string(capsule_dim));
    const int spatial_rank = features.rank() - 1;
    const std::int64_t types = channels / capsule_dim;

    // [C, sp...] -> [types, dim, sp...] -> [sp..., types, dim]
    Shape split{types, capsule_dim};
    for (int i = 0; i < spatial_rank; ++i) split.push_back(features.extent(1 + i));
    Tensor t = reshape(features, split);
    std::vector<int> axes;
    for (int i = 0; i < spatial_rank; ++i) axes.push_back(2 + i);
    axes.push_back(0);
    axes.push_back(1);
    return CapsuleGrid{permute(t, axes), spatial_rank};
}

Tensor primary_capsules_to_features(const CapsuleGrid& grid) {
    const int sr = grid.spatial_rank;
    std::vector<int> axes{sr, sr + 1};
    for (int i = 0; i < sr; ++i) axes.push_back(i);
    Tensor t = permute(grid.values, axes);  // [types, dim, sp...]
    Shape merged{grid.types() * grid.dim()};
    for (int i = 0; i < sr; ++i) merged.push_back(grid.values.extent(i));
    return reshape(t, merged);
}

Tensor compute_votes(const Tensor& window, const CapsuleLayerParams& params, int rank) {
    check_shape(params.transform.rank() == 5,
                "compute_votes: transform must be [K, Cin, din, Cout, dout]");
    check_shape(window.rank() == rank + 2,
                "compute_votes: window must be [kernel spatial..., Cin, din]");
    std::int64_t kpos = 1;
    for (int i = 0; i < rank; ++i) kpos *= window.extent(i);
    check_shape(kpos == params.transform.extent(0),
                "compute_votes: window does not match kernel spatial extent");
    Shape flat{kpos, window.extent(rank), window.extent(rank + 1)};
    Tensor votes = caps_votes(reshape(window, flat), params.transform);
    if (params.use_bias) votes = add(votes, params.bias);
    Shape out(window.shape().begin(), window.shape().begin() + rank);
    out.push_back(window.extent(rank));
    out.push_back(params.transform.extent(3));
    out.push_back(params.transform.extent(4));
    return reshape(votes, out);
}

RoutingResult dynamic_routing(const Tensor& votes, int iterations,
                              const Tensor& initial_priors, RoutingTrace* trace) {
    check_contract(iterations >= 1, "dynamic_routing: iteration count must be >= 1");
    check_shape(votes.rank() >= 3, "dynamic_routing: votes must be [..., n, Cout, dout]");
    {
        Shape expect(votes.shape().begin(), votes.shape().end() - 1);
        check_shape(initial_priors.shape() == expect,
                    "dynamic_routing: priors " + shape_str(initial_priors.shape()) +
                        " do not match votes " + shape_str(votes.shape()));
    }
    const int parent_axis = initial_priors.rank() - 1;
    if (trace) trace->coupling_shape = initial_priors.shape();

    Tensor priors = initial_priors;
    Tensor coupling, parents;
    for (int t = 0; t < iterations; ++t) {
        coupling = softmax_axis(priors, parent_axis);
        Tensor s = weighted_vote_sum(coupling, votes);
        parents = squash(s);
        priors = add(priors, vote_agreement(votes, parents));
        if (trace) trace->steps.push_back({coupling.to_vec(), priors.to_vec()});
    }
    return RoutingResult{parents, coupling, priors};
}

namespace {

CapsuleGrid windowed_capsule_layer(const CapsuleGrid& input, const CapsuleLayerParams& params,
                                   int rank) {
    check_shape(input.spatial_rank == rank, "capsule layer: grid rank mismatch");
    check_shape(params.transform.rank() == 5,
                "capsule layer: transform must be [K, Cin, din, Cout, dout]");
    check_shape(params.transform.extent(1) == input.types() &&
                    params.transform.extent(2) == input.dim(),
                "capsule layer: transform expects " + std::to_string(params.transform.extent(1)) +
                    " types x " + std::to_string(params.transform.extent(2)) + " dims, grid has " +
                    std::to_string(input.types()) + " x " + std::to_string(input.dim()));
    std::int64_t kpos = 1;
    for (int i = 0; i < rank; ++i) kpos *= params.kernel;
    check_shape(kpos == params.transform.extent(0),
                "capsule layer: transform kernel extent mismatch");

    const bool deconv = params.mode == CapsuleMode::deconv;
    Tensor mask;
    Tensor patches = deconv
                         ? unfold_caps_transposed(input.values, rank, params.kernel,
                                                  params.stride, &mask)
                         : unfold_caps(input.values, rank, params.kernel, params.stride,
                                       params.padding);

    // [osp..., K, Cin, din] -> votes [osp..., K, Cin, Cout, dout]
    Tensor votes = caps_votes(patches, params.transform);
    if (params.use_bias) votes = add(votes, params.bias);
    if (deconv) {
        // Positions without a real child are excluded from routing; their
        // votes are zero, so they contribute nothing to any parent.
        Shape mshape = mask.shape();
        mshape.push_back(1);
        mshape.push_back(1);
        mshape.push_back(1);
        votes = mul(votes, reshape(mask, mshape));
    }

    const std::int64_t cout = params.transform.extent(3);
    const std::int64_t dout = params.transform.extent(4);
    const std::int64_t children = kpos * input.types();
    Shape vshape(votes.shape().begin(), votes.shape().end() - 4);
    vshape.push_back(children);
    vshape.push_back(cout);
    vshape.push_back(dout);
    votes = reshape(votes, vshape);

    Shape pshape(vshape.begin(), vshape.end() - 1);
    Tensor priors = Tensor::zeros(pshape);  // b starts at 0 every forward pass
    RoutingResult routed = dynamic_routing(votes, params.iterations, priors);
    return CapsuleGrid{routed.parents, rank};
}

}  // namespace

CapsuleGrid capsule_conv_nd(const CapsuleGrid& input, const CapsuleLayerParams& params,
                            int rank) {
    check_contract(params.mode == CapsuleMode::conv, "capsule_conv_nd: params.mode must be conv");
    return windowed_capsule_layer(input, params, rank);
}

CapsuleGrid capsule_deconv_nd(const CapsuleGrid& input, const CapsuleLayerParams& params,
                              int rank) {
    check_contract(params.mode == CapsuleMode::deconv,
                   "capsule_deconv_nd: params.mode must be deconv");
    return windowed_capsule_layer(input, params, rank);
}

Tensor capsule_lengths(const CapsuleGrid& grid) { return vector_lengths(grid.values); }

RoutingResult fully_connected_routing(const Tensor& children,
                                      const FullyConnectedCapsParams& params,
                                      RoutingTrace* trace) {
    check_shape(children.rank() == 2, "fully_connected_routing: children must be [n, din]");
    check_shape(params.transform.rank() == 4,
                "fully_connected_routing: transform must be [n, din, Cout, dout]");
    check_shape(params.transform.extent(0) == children.extent(0) &&
                    params.transform.extent(1) == children.extent(1),
                "fully_connected_routing: transform does not match children " +
                    shape_str(children.shape()));
    const std::int64_t n = children.extent(0);
    const std::int64_t din = children.extent(1);
    const std::int64_t cout = params.transform.extent(2);
    const std::int64_t dout = params.transform.extent(3);

    // Per-(child, parent) weights: treat each child as its own kernel slot.
    Tensor patches = reshape(children, Shape{n, 1, din});
    Tensor m = reshape(params.transform, Shape{n, 1, din, cout, dout});
    Tensor votes = caps_votes(patches, m);  // [n, 1, cout, dout]
    if (params.use_bias) votes = add(votes, params.bias);
    votes = reshape(votes, Shape{n, cout, dout});

    Tensor priors = Tensor::zeros(Shape{n, cout});
    return dynamic_routing(votes, params.iterations, priors, trace);
}

}  // namespace capseg
