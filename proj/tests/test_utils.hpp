#pragma once

#include <cmath>
#include <vector>

#include "capseg/rng.hpp"
#include "capseg/tensor.hpp"

namespace capseg::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
    return Tensor::uniform(std::move(shape), rng, lo, hi, requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    const double* av = a.data();
    const double* bv = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
    return m;
}

// Straight nested-loop 2D convolution, written independently of the library
// kernels. input [N, Cin, H, W], kernel [Cout, Cin, kh, kw].
inline std::vector<double> conv2d_oracle(const Tensor& input, const Tensor& kernel,
                                         std::int64_t stride, std::int64_t pad,
                                         std::int64_t dil) {
    const std::int64_t N = input.extent(0), Cin = input.extent(1);
    const std::int64_t H = input.extent(2), W = input.extent(3);
    const std::int64_t Cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
    const std::int64_t OH = (H + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N * Cout * OH * OW), 0.0);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t oy = 0; oy < OH; ++oy)
                for (std::int64_t ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (std::int64_t ci = 0; ci < Cin; ++ci)
                        for (std::int64_t ky = 0; ky < kh; ++ky)
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t iy = oy * stride - pad + ky * dil;
                                const std::int64_t ix = ox * stride - pad + kx * dil;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += input.at({n, ci, iy, ix}) * kernel.at({co, ci, ky, kx});
                            }
                    out[static_cast<size_t>(((n * Cout + co) * OH + oy) * OW + ox)] = acc;
                }
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    const double* av = a.data();
    const double* bv = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) s += av[i] * bv[i];
    return s;
}

}  // namespace capseg::testing
