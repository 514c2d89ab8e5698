#include <algorithm>
#include <cstring>

#include "capseg/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace capseg {

namespace {

using detail::Node;

Tensor make_op_external(Shape shape, const std::vector<Tensor>& inputs,
                        std::function<void(Node&)> backprop) {
    auto node = detail::make_node(std::move(shape));
    node->leaf = false;
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t.requires_grad();
    node->requires_grad = rg;
    if (rg) {
        for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
        node->backprop = std::move(backprop);
    }
    return Tensor(node);
}

struct ConvGeom {
    int rank = 2;
    std::int64_t batch = 1, cin = 1, cout = 1;
    std::int64_t in[3] = {1, 1, 1};
    std::int64_t out[3] = {1, 1, 1};
    std::int64_t k[3] = {1, 1, 1};
    std::int64_t stride[3] = {1, 1, 1};
    std::int64_t pad[3] = {0, 0, 0};
    std::int64_t dil[3] = {1, 1, 1};
    std::int64_t in_spatial() const { return in[0] * in[1] * in[2]; }
    std::int64_t out_spatial() const { return out[0] * out[1] * out[2]; }
    std::int64_t k_spatial() const { return k[0] * k[1] * k[2]; }
};

ConvGeom conv_geometry(const Tensor& input, const Tensor& kernel,
                       const std::vector<std::int64_t>& stride,
                       const std::vector<std::int64_t>& padding,
                       const std::vector<std::int64_t>& dilation, int rank) {
    check_shape(rank == 2 || rank == 3, "conv_nd: rank must be 2 or 3");
    check_shape(input.rank() == rank + 2,
                "conv_nd: input must be [N, C, spatial...], got " + shape_str(input.shape()));
    check_shape(kernel.rank() == rank + 2,
                "conv_nd: kernel must be [Cout, Cin, k...], got " + shape_str(kernel.shape()));
    check_shape(static_cast<int>(stride.size()) == rank &&
                    static_cast<int>(padding.size()) == rank &&
                    static_cast<int>(dilation.size()) == rank,
                "conv_nd: stride/padding/dilation must have one entry per spatial axis");
    check_shape(input.extent(1) == kernel.extent(1),
                "conv_nd: channel mismatch, input has " + std::to_string(input.extent(1)) +
                    " kernel expects " + std::to_string(kernel.extent(1)));
    ConvGeom g;
    g.rank = rank;
    g.batch = input.extent(0);
    g.cin = input.extent(1);
    g.cout = kernel.extent(0);
    for (int i = 0; i < rank; ++i) {
        g.in[i] = input.extent(2 + i);
        g.k[i] = kernel.extent(2 + i);
        g.stride[i] = stride[static_cast<size_t>(i)];
        g.pad[i] = padding[static_cast<size_t>(i)];
        g.dil[i] = dilation[static_cast<size_t>(i)];
        check_shape(g.stride[i] >= 1 && g.pad[i] >= 0 && g.dil[i] >= 1,
                    "conv_nd: bad stride/padding/dilation");
        const std::int64_t eff = g.dil[i] * (g.k[i] - 1) + 1;
        const std::int64_t padded = g.in[i] + 2 * g.pad[i];
        check_shape(padded >= eff, "conv_nd: padded input smaller than dilated kernel on axis " +
                                       std::to_string(i));
        g.out[i] = (padded - eff) / g.stride[i] + 1;
    }
    return g;
}

// Forward/backward share these raw kernels so the adjoint structure is
// explicit: conv_bwd_data is also the forward pass of the transposed conv.

bool is_pointwise(const ConvGeom& g) {
    for (int i = 0; i < 3; ++i)
        if (g.k[i] != 1 || g.stride[i] != 1 || g.pad[i] != 0 || g.dil[i] != 1) return false;
    return true;
}

void conv_fwd(const double* in, const double* ker, double* out, const ConvGeom& g) {
    const std::int64_t osp = g.out_spatial();
    if (is_pointwise(g)) {
        // 1x1 kernel: an [Cout, Cin] map applied at every position
        const std::int64_t isp = g.in_spatial();
        for (std::int64_t n = 0; n < g.batch; ++n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.cout > 1)
#endif
            for (std::int64_t co = 0; co < g.cout; ++co) {
                double* op = out + (n * g.cout + co) * osp;
                for (std::int64_t ci = 0; ci < g.cin; ++ci) {
                    const double w = ker[co * g.cin + ci];
                    if (w == 0.0) continue;
                    const double* ip = in + (n * g.cin + ci) * isp;
                    for (std::int64_t p = 0; p < osp; ++p) op[p] += w * ip[p];
                }
            }
        }
        return;
    }
    for (std::int64_t n = 0; n < g.batch; ++n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.cout * osp > 512)
#endif
        for (std::int64_t co = 0; co < g.cout; ++co) {
            for (std::int64_t oz = 0; oz < g.out[0]; ++oz)
                for (std::int64_t oy = 0; oy < g.out[1]; ++oy)
                    for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
                        double acc = 0.0;
                        for (std::int64_t ci = 0; ci < g.cin; ++ci) {
                            const double* ip = in + (n * g.cin + ci) * g.in_spatial();
                            const double* kp = ker + (co * g.cin + ci) * g.k_spatial();
                            for (std::int64_t kz = 0; kz < g.k[0]; ++kz) {
                                const std::int64_t iz = oz * g.stride[0] - g.pad[0] + kz * g.dil[0];
                                if (g.rank == 3 && (iz < 0 || iz >= g.in[0])) continue;
                                for (std::int64_t ky = 0; ky < g.k[1]; ++ky) {
                                    const std::int64_t iy = oy * g.stride[1] - g.pad[1] + ky * g.dil[1];
                                    if (iy < 0 || iy >= g.in[1]) continue;
                                    for (std::int64_t kx = 0; kx < g.k[2]; ++kx) {
                                        const std::int64_t ix =
                                            ox * g.stride[2] - g.pad[2] + kx * g.dil[2];
                                        if (ix < 0 || ix >= g.in[2]) continue;
                                        acc += ip[(iz * g.in[1] + iy) * g.in[2] + ix] *
                                               kp[(kz * g.k[1] + ky) * g.k[2] + kx];
                                    }
                                }
                            }
                        }
                        out[((n * g.cout + co) * osp) + (oz * g.out[1] + oy) * g.out[2] + ox] += acc;
                    }
        }
    }
}

void conv_bwd_data(const double* gout, const double* ker, double* gin, const ConvGeom& g) {
    const std::int64_t osp = g.out_spatial();
    if (is_pointwise(g)) {
        const std::int64_t isp = g.in_spatial();
        for (std::int64_t n = 0; n < g.batch; ++n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.cin > 1)
#endif
            for (std::int64_t ci = 0; ci < g.cin; ++ci) {
                double* gp = gin + (n * g.cin + ci) * isp;
                for (std::int64_t co = 0; co < g.cout; ++co) {
                    const double w = ker[co * g.cin + ci];
                    if (w == 0.0) continue;
                    const double* op = gout + (n * g.cout + co) * osp;
                    for (std::int64_t p = 0; p < osp; ++p) gp[p] += w * op[p];
                }
            }
        }
        return;
    }
    for (std::int64_t n = 0; n < g.batch; ++n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.cin * g.in_spatial() > 512)
#endif
        for (std::int64_t ci = 0; ci < g.cin; ++ci) {
            double* gp = gin + (n * g.cin + ci) * g.in_spatial();
            for (std::int64_t co = 0; co < g.cout; ++co) {
                const double* op = gout + (n * g.cout + co) * osp;
                const double* kp = ker + (co * g.cin + ci) * g.k_spatial();
                for (std::int64_t oz = 0; oz < g.out[0]; ++oz)
                    for (std::int64_t oy = 0; oy < g.out[1]; ++oy)
                        for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
                            const double gv = op[(oz * g.out[1] + oy) * g.out[2] + ox];
                            if (gv == 0.0) continue;
                            for (std::int64_t kz = 0; kz < g.k[0]; ++kz) {
                                const std::int64_t iz = oz * g.stride[0] - g.pad[0] + kz * g.dil[0];
                                if (g.rank == 3 && (iz < 0 || iz >= g.in[0])) continue;
                                for (std::int64_t ky = 0; ky < g.k[1]; ++ky) {
                                    const std::int64_t iy = oy * g.stride[1] - g.pad[1] + ky * g.dil[1];
                                    if (iy < 0 || iy >= g.in[1]) continue;
                                    for (std::int64_t kx = 0; kx < g.k[2]; ++kx) {
                                        const std::int64_t ix =
                                            ox * g.stride[2] - g.pad[2] + kx * g.dil[2];
                                        if (ix < 0 || ix >= g.in[2]) continue;
                                        gp[(iz * g.in[1] + iy) * g.in[2] + ix] +=
                                            gv * kp[(kz * g.k[1] + ky) * g.k[2] + kx];
                                    }
                                }
                            }
                        }
            }
        }
    }
}

void conv_bwd_kernel(const double* gout, const double* in, double* gker, const ConvGeom& g) {
    const std::int64_t osp = g.out_spatial();
    if (is_pointwise(g)) {
        const std::int64_t isp = g.in_spatial();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.cout > 1)
#endif
        for (std::int64_t co = 0; co < g.cout; ++co)
            for (std::int64_t n = 0; n < g.batch; ++n) {
                const double* op = gout + (n * g.cout + co) * osp;
                for (std::int64_t ci = 0; ci < g.cin; ++ci) {
                    const double* ip = in + (n * g.cin + ci) * isp;
                    double acc = 0.0;
                    for (std::int64_t p = 0; p < osp; ++p) acc += op[p] * ip[p];
                    gker[co * g.cin + ci] += acc;
                }
            }
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.cout > 1)
#endif
    for (std::int64_t co = 0; co < g.cout; ++co) {
        for (std::int64_t n = 0; n < g.batch; ++n) {
            const double* op = gout + (n * g.cout + co) * osp;
            for (std::int64_t ci = 0; ci < g.cin; ++ci) {
                const double* ip = in + (n * g.cin + ci) * g.in_spatial();
                double* kp = gker + (co * g.cin + ci) * g.k_spatial();
                for (std::int64_t oz = 0; oz < g.out[0]; ++oz)
                    for (std::int64_t oy = 0; oy < g.out[1]; ++oy)
                        for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
                            const double gv = op[(oz * g.out[1] + oy) * g.out[2] + ox];
                            if (gv == 0.0) continue;
                            for (std::int64_t kz = 0; kz < g.k[0]; ++kz) {
                                const std::int64_t iz = oz * g.stride[0] - g.pad[0] + kz * g.dil[0];
                                if (g.rank == 3 && (iz < 0 || iz >= g.in[0])) continue;
                                for (std::int64_t ky = 0; ky < g.k[1]; ++ky) {
                                    const std::int64_t iy = oy * g.stride[1] - g.pad[1] + ky * g.dil[1];
                                    if (iy < 0 || iy >= g.in[1]) continue;
                                    for (std::int64_t kx = 0; kx < g.k[2]; ++kx) {
                                        const std::int64_t ix =
                                            ox * g.stride[2] - g.pad[2] + kx * g.dil[2];
                                        if (ix < 0 || ix >= g.in[2]) continue;
                                        kp[(kz * g.k[1] + ky) * g.k[2] + kx] +=
                                            gv * ip[(iz * g.in[1] + iy) * g.in[2] + ix];
                                    }
                                }
                            }
                        }
            }
        }
    }
}

}  // namespace

Tensor conv_nd(const Tensor& input, const Tensor& kernel,
               const std::vector<std::int64_t>& stride,
               const std::vector<std::int64_t>& padding,
               const std::vector<std::int64_t>& dilation, int rank) {
    ConvGeom g = conv_geometry(input, kernel, stride, padding, dilation, rank);
    Shape out_shape{g.batch, g.cout};
    for (int i = 0; i < rank; ++i) out_shape.push_back(g.out[i]);
    // rank-2 geometry stores spatial extents in slots 1..2 with slot 0 = 1
    if (rank == 2) {
        g.in[2] = g.in[1]; g.in[1] = g.in[0]; g.in[0] = 1;
        g.out[2] = g.out[1]; g.out[1] = g.out[0]; g.out[0] = 1;
        g.k[2] = g.k[1]; g.k[1] = g.k[0]; g.k[0] = 1;
        g.stride[2] = g.stride[1]; g.stride[1] = g.stride[0]; g.stride[0] = 1;
        g.pad[2] = g.pad[1]; g.pad[1] = g.pad[0]; g.pad[0] = 0;
        g.dil[2] = g.dil[1]; g.dil[1] = g.dil[0]; g.dil[0] = 1;
    }

    auto in_node = input.node_ptr();
    auto k_node = kernel.node_ptr();
    Tensor out = make_op_external(out_shape, {input, kernel}, [in_node, k_node, g](Node& self) {
        if (in_node->requires_grad) {
            in_node->ensure_grad();
            conv_bwd_data(self.grad.data(), k_node->data(), in_node->grad.data(), g);
        }
        if (k_node->requires_grad) {
            k_node->ensure_grad();
            conv_bwd_kernel(self.grad.data(), in_node->data(), k_node->grad.data(), g);
        }
    });
    conv_fwd(input.data(), kernel.data(), out.data(), g);
    return out;
}

Tensor conv_nd(const Tensor& input, const Tensor& kernel, std::int64_t stride,
               std::int64_t padding, std::int64_t dilation, int rank) {
    const auto r = static_cast<size_t>(rank);
    return conv_nd(input, kernel, std::vector<std::int64_t>(r, stride),
                   std::vector<std::int64_t>(r, padding), std::vector<std::int64_t>(r, dilation),
                   rank);
}

Tensor transposed_conv_nd(const Tensor& input, const Tensor& kernel, std::int64_t stride,
                          int rank) {
    check_shape(rank == 2 || rank == 3, "transposed_conv_nd: rank must be 2 or 3");
    check_shape(input.rank() == rank + 2 && kernel.rank() == rank + 2,
                "transposed_conv_nd: rank mismatch, input " + shape_str(input.shape()) +
                    " kernel " + shape_str(kernel.shape()));
    check_shape(input.extent(1) == kernel.extent(0),
                "transposed_conv_nd: input channels must equal kernel Cout");
    check_shape(stride >= 1, "transposed_conv_nd: stride must be >= 1");

    // Geometry of the adjoint convolution: its "input" is our output.
    ConvGeom g;
    g.rank = rank;
    g.batch = input.extent(0);
    g.cout = kernel.extent(0);
    g.cin = kernel.extent(1);
    Shape out_shape{g.batch, g.cin};
    for (int i = 0; i < rank; ++i) {
        const std::int64_t slot = 3 - rank + i;
        g.out[slot] = input.extent(2 + i);
        g.k[slot] = kernel.extent(2 + i);
        g.stride[slot] = stride;
        g.in[slot] = (g.out[slot] - 1) * stride + g.k[slot];
        out_shape.push_back(g.in[slot]);
    }

    auto in_node = input.node_ptr();
    auto k_node = kernel.node_ptr();
    Tensor out = make_op_external(out_shape, {input, kernel}, [in_node, k_node, g](Node& self) {
        if (in_node->requires_grad) {
            in_node->ensure_grad();
            // d/d(input) of the scatter is the gathering conv over grad_out.
            conv_fwd(self.grad.data(), k_node->data(), in_node->grad.data(), g);
        }
        if (k_node->requires_grad) {
            k_node->ensure_grad();
            conv_bwd_kernel(in_node->data(), self.grad.data(), k_node->grad.data(), g);
        }
    });
    conv_bwd_data(input.data(), kernel.data(), out.data(), g);
    return out;
}

// ---------------------------------------------------------------------------
// Capsule window gathers
// ---------------------------------------------------------------------------

namespace {

struct UnfoldGeom {
    int rank = 2;
    std::int64_t in[3] = {1, 1, 1};
    std::int64_t out[3] = {1, 1, 1};
    std::int64_t k[3] = {1, 1, 1};
    std::int64_t stride = 1, pad = 0;
    std::int64_t row = 1;  // types * dim, contiguous innermost block
    std::int64_t out_positions() const { return out[0] * out[1] * out[2]; }
    std::int64_t in_positions() const { return in[0] * in[1] * in[2]; }
    std::int64_t k_positions() const { return k[0] * k[1] * k[2]; }
};

UnfoldGeom unfold_geometry(const Tensor& grid, int rank, std::int64_t kernel,
                           std::int64_t stride, std::int64_t pad, bool transposed) {
    check_shape(rank == 2 || rank == 3, "unfold: rank must be 2 or 3");
    check_shape(grid.rank() == rank + 2,
                "unfold: capsule grid must be [spatial..., types, dim], got " +
                    shape_str(grid.shape()));
    check_shape(kernel >= 1 && stride >= 1 && pad >= 0, "unfold: bad kernel/stride/pad");
    UnfoldGeom g;
    g.rank = rank;
    g.stride = stride;
    g.pad = pad;
    g.row = grid.extent(rank) * grid.extent(rank + 1);
    for (int i = 0; i < rank; ++i) {
        const int slot = 3 - rank + i;
        g.in[slot] = grid.extent(i);
        g.k[slot] = kernel;
        if (transposed) {
            g.out[slot] = (g.in[slot] - 1) * stride + kernel;
        } else {
            const std::int64_t padded = g.in[slot] + 2 * pad;
            check_shape(padded >= kernel, "unfold: kernel larger than padded input on axis " +
                                              std::to_string(i));
            g.out[slot] = (padded - kernel) / stride + 1;
        }
    }
    return g;
}

}  // namespace

Tensor unfold_caps(const Tensor& grid, int rank, std::int64_t kernel, std::int64_t stride,
                   std::int64_t padding) {
    UnfoldGeom g = unfold_geometry(grid, rank, kernel, stride, padding, false);
    Shape out_shape;
    for (int i = 3 - rank; i < 3; ++i) out_shape.push_back(g.out[i]);
    out_shape.push_back(g.k_positions());
    out_shape.push_back(grid.extent(rank));
    out_shape.push_back(grid.extent(rank + 1));

    const std::int64_t kpos = g.k_positions();
    auto grid_node = grid.node_ptr();
    Tensor out = make_op_external(out_shape, {grid}, [grid_node, g, kpos](Node& self) {
        if (!grid_node->requires_grad) return;
        grid_node->ensure_grad();
        const double* gv = self.grad.data();
        double* dg = grid_node->grad.data();
        // Fixed kernel offset => distinct output positions touch distinct
        // input rows, so the inner loop is race-free.
        for (std::int64_t kz = 0; kz < g.k[0]; ++kz)
            for (std::int64_t ky = 0; ky < g.k[1]; ++ky)
                for (std::int64_t kx = 0; kx < g.k[2]; ++kx) {
                    const std::int64_t kidx = (kz * g.k[1] + ky) * g.k[2] + kx;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.out_positions() > 256)
#endif
                    for (std::int64_t o = 0; o < g.out_positions(); ++o) {
                        const std::int64_t oz = o / (g.out[1] * g.out[2]);
                        const std::int64_t oy = (o / g.out[2]) % g.out[1];
                        const std::int64_t ox = o % g.out[2];
                        const std::int64_t iz = g.rank == 3 ? oz * g.stride - g.pad + kz : 0;
                        const std::int64_t iy = oy * g.stride - g.pad + ky;
                        const std::int64_t ix = ox * g.stride - g.pad + kx;
                        if (g.rank == 3 && (iz < 0 || iz >= g.in[0])) continue;
                        if (iy < 0 || iy >= g.in[1] || ix < 0 || ix >= g.in[2]) continue;
                        const double* src = gv + (o * kpos + kidx) * g.row;
                        double* dst = dg + ((iz * g.in[1] + iy) * g.in[2] + ix) * g.row;
                        for (std::int64_t r = 0; r < g.row; ++r) dst[r] += src[r];
                    }
                }
    });

    const double* gv = grid.data();
    double* ov = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.out_positions() > 256)
#endif
    for (std::int64_t o = 0; o < g.out_positions(); ++o) {
        const std::int64_t oz = o / (g.out[1] * g.out[2]);
        const std::int64_t oy = (o / g.out[2]) % g.out[1];
        const std::int64_t ox = o % g.out[2];
        for (std::int64_t kidx = 0; kidx < kpos; ++kidx) {
            const std::int64_t kz = kidx / (g.k[1] * g.k[2]);
            const std::int64_t ky = (kidx / g.k[2]) % g.k[1];
            const std::int64_t kx = kidx % g.k[2];
            const std::int64_t iz = g.rank == 3 ? oz * g.stride - g.pad + kz : 0;
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            double* dst = ov + (o * kpos + kidx) * g.row;
            const bool valid = (g.rank != 3 || (iz >= 0 && iz < g.in[0])) && iy >= 0 &&
                               iy < g.in[1] && ix >= 0 && ix < g.in[2];
            if (valid)
                std::memcpy(dst, gv + ((iz * g.in[1] + iy) * g.in[2] + ix) * g.row,
                            static_cast<size_t>(g.row) * sizeof(double));
            else
                std::memset(dst, 0, static_cast<size_t>(g.row) * sizeof(double));
        }
    }
    return out;
}

Tensor unfold_caps_transposed(const Tensor& grid, int rank, std::int64_t kernel,
                              std::int64_t stride, Tensor* mask_out) {
    UnfoldGeom g = unfold_geometry(grid, rank, kernel, stride, 0, true);
    Shape out_shape;
    for (int i = 3 - rank; i < 3; ++i) out_shape.push_back(g.out[i]);
    const std::int64_t kpos = g.k_positions();
    Shape mask_shape = out_shape;
    mask_shape.push_back(kpos);
    out_shape.push_back(kpos);
    out_shape.push_back(grid.extent(rank));
    out_shape.push_back(grid.extent(rank + 1));

    // source input position for (output position, kernel offset), or -1;
    // captured by value, the backward closure outlives this scope
    auto source = [g](std::int64_t o, std::int64_t kidx) -> std::int64_t {
        const std::int64_t oz = o / (g.out[1] * g.out[2]);
        const std::int64_t oy = (o / g.out[2]) % g.out[1];
        const std::int64_t ox = o % g.out[2];
        const std::int64_t kz = kidx / (g.k[1] * g.k[2]);
        const std::int64_t ky = (kidx / g.k[2]) % g.k[1];
        const std::int64_t kx = kidx % g.k[2];
        std::int64_t iz = 0;
        if (g.rank == 3) {
            if ((oz - kz) % g.stride != 0) return -1;
            iz = (oz - kz) / g.stride;
            if (iz < 0 || iz >= g.in[0]) return -1;
        }
        if ((oy - ky) % g.stride != 0 || (ox - kx) % g.stride != 0) return -1;
        const std::int64_t iy = (oy - ky) / g.stride;
        const std::int64_t ix = (ox - kx) / g.stride;
        if (iy < 0 || iy >= g.in[1] || ix < 0 || ix >= g.in[2]) return -1;
        return (iz * g.in[1] + iy) * g.in[2] + ix;
    };

    auto grid_node = grid.node_ptr();
    Tensor out = make_op_external(out_shape, {grid}, [grid_node, g, kpos, source](Node& self) {
        if (!grid_node->requires_grad) return;
        grid_node->ensure_grad();
        const double* gv = self.grad.data();
        double* dg = grid_node->grad.data();
        for (std::int64_t kidx = 0; kidx < kpos; ++kidx) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g.out_positions() > 256)
#endif
            for (std::int64_t o = 0; o < g.out_positions(); ++o) {
                const std::int64_t ip = source(o, kidx);
                if (ip < 0) continue;
                const double* src = gv + (o * kpos + kidx) * g.row;
                double* dst = dg + ip * g.row;
                for (std::int64_t r = 0; r < g.row; ++r) dst[r] += src[r];
            }
        }
    });

    if (mask_out) *mask_out = Tensor::zeros(mask_shape);
    const double* gv = grid.data();
    double* ov = out.data();
    double* mv = mask_out ? mask_out->data() : nullptr;
    for (std::int64_t o = 0; o < g.out_positions(); ++o)
        for (std::int64_t kidx = 0; kidx < kpos; ++kidx) {
            const std::int64_t ip = source(o, kidx);
            double* dst = ov + (o * kpos + kidx) * g.row;
            if (ip >= 0) {
                std::memcpy(dst, gv + ip * g.row, static_cast<size_t>(g.row) * sizeof(double));
                if (mv) mv[o * kpos + kidx] = 1.0;
            } else {
                std::memset(dst, 0, static_cast<size_t>(g.row) * sizeof(double));
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Vote computation and routing reductions
// ---------------------------------------------------------------------------

Tensor caps_votes(const Tensor& patches, const Tensor& transform) {
    check_shape(transform.rank() == 5,
                "caps_votes: transform must be [K, Cin, din, Cout, dout], got " +
                    shape_str(transform.shape()));
    check_shape(patches.rank() >= 3, "caps_votes: patches must end in [K, Cin, din]");
    const int pr = patches.rank();
    const std::int64_t K = transform.extent(0);
    const std::int64_t cin = transform.extent(1);
    const std::int64_t din = transform.extent(2);
    const std::int64_t cout = transform.extent(3);
    const std::int64_t dout = transform.extent(4);
    check_shape(patches.extent(pr - 3) == K && patches.extent(pr - 2) == cin &&
                    patches.extent(pr - 1) == din,
                "caps_votes: patches " + shape_str(patches.shape()) +
                    " do not match transform " + shape_str(transform.shape()));

    Shape out_shape(patches.shape().begin(), patches.shape().end() - 1);
    out_shape.push_back(cout);
    out_shape.push_back(dout);
    std::int64_t positions = 1;
    for (int i = 0; i < pr - 3; ++i) positions *= patches.extent(i);

    const std::int64_t jd = cout * dout;
    auto p_node = patches.node_ptr();
    auto m_node = transform.node_ptr();
    Tensor out = make_op_external(
        out_shape, {patches, transform},
        [p_node, m_node, positions, K, cin, din, cout, dout, jd](Node& self) {
            const double* g = self.grad.data();
            const double* pv = p_node->data();
            const double* mv = m_node->data();
            if (p_node->requires_grad) {
                p_node->ensure_grad();
                double* dp = p_node->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (positions > 64)
#endif
                for (std::int64_t p = 0; p < positions; ++p)
                    for (std::int64_t kc = 0; kc < K * cin; ++kc) {
                        const double* gs = g + (p * K * cin + kc) * jd;
                        const double* ms = mv + kc * din * jd;
                        double* ds = dp + (p * K * cin + kc) * din;
                        for (std::int64_t dn = 0; dn < din; ++dn) {
                            double acc = 0.0;
                            const double* mrow = ms + dn * jd;
                            for (std::int64_t e = 0; e < jd; ++e) acc += gs[e] * mrow[e];
                            ds[dn] += acc;
                        }
                    }
            }
            if (m_node->requires_grad) {
                m_node->ensure_grad();
                double* dm = m_node->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (K * cin > 1)
#endif
                for (std::int64_t kc = 0; kc < K * cin; ++kc) {
                    double* dms = dm + kc * din * jd;
                    for (std::int64_t p = 0; p < positions; ++p) {
                        const double* gs = g + (p * K * cin + kc) * jd;
                        const double* ps = pv + (p * K * cin + kc) * din;
                        for (std::int64_t dn = 0; dn < din; ++dn) {
                            const double x = ps[dn];
                            if (x == 0.0) continue;
                            double* drow = dms + dn * jd;
                            for (std::int64_t e = 0; e < jd; ++e) drow[e] += x * gs[e];
                        }
                    }
                }
            }
        });

    const double* pv = patches.data();
    const double* mv = transform.data();
    double* ov = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (positions > 64)
#endif
    for (std::int64_t p = 0; p < positions; ++p)
        for (std::int64_t kc = 0; kc < K * cin; ++kc) {
            const double* ps = pv + (p * K * cin + kc) * din;
            const double* ms = mv + kc * din * jd;
            double* os = ov + (p * K * cin + kc) * jd;
            std::memset(os, 0, static_cast<size_t>(jd) * sizeof(double));
            for (std::int64_t dn = 0; dn < din; ++dn) {
                const double x = ps[dn];
                if (x == 0.0) continue;
                const double* mrow = ms + dn * jd;
                for (std::int64_t e = 0; e < jd; ++e) os[e] += x * mrow[e];
            }
        }
    return out;
}

namespace {

void routing_shapes(const Tensor& small, const Tensor& votes, int drop,
                    std::int64_t& positions, std::int64_t& n, std::int64_t& j,
                    std::int64_t& d, const char* what) {
    // votes: [..., n, j, d]; small: votes shape with `drop` trailing axes
    // replaced (coupling [..., n, j], parents [..., j, d]).
    check_shape(votes.rank() >= 3, std::string(what) + ": votes must be [..., n, j, d]");
    const int vr = votes.rank();
    n = votes.extent(vr - 3);
    j = votes.extent(vr - 2);
    d = votes.extent(vr - 1);
    positions = 1;
    for (int i = 0; i < vr - 3; ++i) positions *= votes.extent(i);
    Shape expect(votes.shape().begin(), votes.shape().end());
    if (drop == 1)
        expect.pop_back();  // coupling
    else
        expect.erase(expect.end() - 3);  // parents
    check_shape(small.shape() == expect, std::string(what) + ": got " + shape_str(small.shape()) +
                                             ", expected " + shape_str(expect) + " for votes " +
                                             shape_str(votes.shape()));
}

}  // namespace

Tensor weighted_vote_sum(const Tensor& coupling, const Tensor& votes) {
    std::int64_t positions, n, j, d;
    routing_shapes(coupling, votes, 1, positions, n, j, d, "weighted_vote_sum");
    Shape out_shape(votes.shape().begin(), votes.shape().end() - 3);
    out_shape.push_back(j);
    out_shape.push_back(d);

    auto c_node = coupling.node_ptr();
    auto v_node = votes.node_ptr();
    Tensor out = make_op_external(out_shape, {coupling, votes},
                                  [c_node, v_node, positions, n, j, d](Node& self) {
        const double* g = self.grad.data();
        const double* cv = c_node->data();
        const double* vv = v_node->data();
        const bool dc = c_node->requires_grad;
        const bool dv = v_node->requires_grad;
        if (dc) c_node->ensure_grad();
        if (dv) v_node->ensure_grad();
        double* cg = dc ? c_node->grad.data() : nullptr;
        double* vg = dv ? v_node->grad.data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (positions > 64)
#endif
        for (std::int64_t p = 0; p < positions; ++p) {
            const double* gs = g + p * j * d;
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t jj = 0; jj < j; ++jj) {
                    const std::int64_t cidx = (p * n + i) * j + jj;
                    const std::int64_t vbase = ((p * n + i) * j + jj) * d;
                    if (dc) {
                        double acc = 0.0;
                        for (std::int64_t e = 0; e < d; ++e)
                            acc += gs[jj * d + e] * vv[vbase + e];
                        cg[cidx] += acc;
                    }
                    if (dv) {
                        const double c = cv[cidx];
                        for (std::int64_t e = 0; e < d; ++e) vg[vbase + e] += c * gs[jj * d + e];
                    }
                }
        }
    });

    const double* cv = coupling.data();
    const double* vv = votes.data();
    double* ov = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (positions > 64)
#endif
    for (std::int64_t p = 0; p < positions; ++p) {
        double* os = ov + p * j * d;
        std::memset(os, 0, static_cast<size_t>(j * d) * sizeof(double));
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t jj = 0; jj < j; ++jj) {
                const double c = cv[(p * n + i) * j + jj];
                if (c == 0.0) continue;
                const double* vs = vv + ((p * n + i) * j + jj) * d;
                double* od = os + jj * d;
                for (std::int64_t e = 0; e < d; ++e) od[e] += c * vs[e];
            }
    }
    return out;
}

Tensor vote_agreement(const Tensor& votes, const Tensor& parents) {
    std::int64_t positions, n, j, d;
    routing_shapes(parents, votes, 2, positions, n, j, d, "vote_agreement");
    Shape out_shape(votes.shape().begin(), votes.shape().end() - 1);

    auto v_node = votes.node_ptr();
    auto p_node = parents.node_ptr();
    Tensor out = make_op_external(out_shape, {votes, parents},
                                  [v_node, p_node, positions, n, j, d](Node& self) {
        const double* g = self.grad.data();
        const double* vv = v_node->data();
        const double* pv = p_node->data();
        const bool dv = v_node->requires_grad;
        const bool dp = p_node->requires_grad;
        if (dv) v_node->ensure_grad();
        if (dp) p_node->ensure_grad();
        double* vg = dv ? v_node->grad.data() : nullptr;
        double* pg = dp ? p_node->grad.data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (positions > 64)
#endif
        for (std::int64_t p = 0; p < positions; ++p)
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t jj = 0; jj < j; ++jj) {
                    const double gv = g[(p * n + i) * j + jj];
                    if (gv == 0.0) continue;
                    const std::int64_t vbase = ((p * n + i) * j + jj) * d;
                    const std::int64_t pbase = (p * j + jj) * d;
                    if (dv)
                        for (std::int64_t e = 0; e < d; ++e) vg[vbase + e] += gv * pv[pbase + e];
                    if (dp)
                        for (std::int64_t e = 0; e < d; ++e) pg[pbase + e] += gv * vv[vbase + e];
                }
    });

    const double* vv = votes.data();
    const double* pv = parents.data();
    double* ov = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (positions > 64)
#endif
    for (std::int64_t p = 0; p < positions; ++p)
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t jj = 0; jj < j; ++jj) {
                const double* vs = vv + ((p * n + i) * j + jj) * d;
                const double* ps = pv + (p * j + jj) * d;
                double acc = 0.0;
                for (std::int64_t e = 0; e < d; ++e) acc += vs[e] * ps[e];
                ov[(p * n + i) * j + jj] = acc;
            }
    return out;
}

}  // namespace capseg
