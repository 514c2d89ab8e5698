#include "capseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "capseg/rng.hpp"

namespace capseg {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

namespace detail {
namespace {

std::int64_t next_seq() {
    static std::atomic<std::int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace

std::shared_ptr<Node> make_node(Shape shape) {
    for (auto e : shape)
        if (e < 1) throw ShapeError("invalid shape " + shape_str(shape) + ": extents must be >= 1");
    auto node = std::make_shared<Node>();
    node->seq = next_seq();
    const auto n = static_cast<size_t>(shape_numel(shape));
    node->shape = std::move(shape);
    node->value = std::make_shared<std::vector<double>>(n, 0.0);
    return node;
}

namespace {

// Node sharing the value buffer of its input under a new shape (reshape).
std::shared_ptr<Node> make_view_node(const std::shared_ptr<std::vector<double>>& store,
                                     Shape shape) {
    auto node = std::make_shared<Node>();
    node->seq = next_seq();
    node->shape = std::move(shape);
    node->value = store;
    return node;
}

}  // namespace
}  // namespace detail

using detail::Node;

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    Tensor t(detail::make_node(std::move(shape)));
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value->begin(), t.node_->value->end(), value);
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : *t.node_->value) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : *t.node_->value) v = rng.normal(mean, stddev);
    return t;
}

Tensor Tensor::uniform(Shape shape, std::uint64_t seed, double lo, double hi,
                       bool requires_grad) {
    Rng rng(seed);
    return uniform(std::move(shape), rng, lo, hi, requires_grad);
}

Tensor Tensor::normal(Shape shape, std::uint64_t seed, double mean, double stddev,
                      bool requires_grad) {
    Rng rng(seed);
    return normal(std::move(shape), rng, mean, stddev, requires_grad);
}

Tensor Tensor::from_vec(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("from_vec: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
    Tensor t = zeros(std::move(shape), requires_grad);
    *t.node_->value = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    Tensor t = zeros(Shape{}, requires_grad);
    (*t.node_->value)[0] = value;
    return t;
}

double Tensor::item() const {
    check_contract(numel() == 1, "item() requires a single-element tensor");
    return (*node_->value)[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    check_shape(idx.size() == node_->shape.size(), "at(): index rank mismatch");
    std::int64_t off = 0;
    size_t d = 0;
    for (auto i : idx) {
        off = off * node_->shape[d] + i;
        ++d;
    }
    return (*node_->value)[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    check_contract(node_->leaf, "requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = rg;
    return *this;
}

Tensor Tensor::grad() const {
    check_contract(has_grad(), "no gradient materialized; call backward first");
    Tensor g = zeros(node_->shape);
    *g.node_->value = node_->grad;
    return g;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value->size(), 0.0); }

void Tensor::clear_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
    Tensor t = zeros(node_->shape);
    *t.node_->value = *node_->value;
    return t;
}

Tensor Tensor::clone_leaf() const {
    Tensor t = zeros(node_->shape, node_->requires_grad);
    *t.node_->value = *node_->value;
    return t;
}

Tensor Tensor::shared_view() const {
    auto node = detail::make_view_node(node_->value, node_->shape);
    return Tensor(node);
}

void Tensor::assign_values(const std::vector<double>& values) {
    check_contract(node_->leaf, "assign_values: only leaf tensors may be mutated");
    check_shape(values.size() == node_->value->size(), "assign_values: size mismatch");
    *node_->value = values;
}

// ---------------------------------------------------------------------------
// Op construction helper
// ---------------------------------------------------------------------------

namespace {

Tensor make_op(Shape shape, const std::vector<Tensor>& inputs,
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

// Right-aligned broadcast shape.
Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t ra = a.size(), rb = b.size();
    const size_t r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        const std::int64_t ea = i < r - ra ? 1 : a[i - (r - ra)];
        const std::int64_t eb = i < r - rb ? 1 : b[i - (r - rb)];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `in` expanded to the broadcast output shape (0 on broadcast axes).
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t s = 1;
    for (size_t i = in.size(); i-- > 0;) {
        const size_t o = i + (out.size() - in.size());
        strides[o] = (in[i] == 1 && out[o] != 1) ? 0 : s;
        s *= in[i];
    }
    return strides;
}

// Walks the output index space while tracking two strided input offsets.
// f(out_flat_index, offset_a, offset_b) is called once per element.
template <typename F>
void for_each_bcast(const Shape& out, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, F&& f) {
    const std::int64_t n = shape_numel(out);
    const int r = static_cast<int>(out.size());
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<std::int64_t> idx(static_cast<size_t>(r), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
        }
    }
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// Shared skeleton for broadcasting binaries. fwd(x, y) computes the value;
// bwd_a/bwd_b map (grad_out, a_val, b_val) to the input gradient increments.
template <typename FwdF, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdF fwd, BwdA bwd_a, BwdB bwd_b) {
    if (same_shape(a, b)) {
        // contiguous fast path
        Shape out_shape = a.shape();
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        Tensor out = make_op(out_shape, {a, b}, [an, bn, bwd_a, bwd_b](Node& self) {
            const double* g = self.grad.data();
            const std::int64_t n = self.numel();
            if (an->requires_grad) {
                an->ensure_grad();
                const double* av = an->data();
                const double* bv = bn->data();
                double* da = an->grad.data();
                for (std::int64_t i = 0; i < n; ++i) da[i] += bwd_a(g[i], av[i], bv[i]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                const double* av = an->data();
                const double* bv = bn->data();
                double* db = bn->grad.data();
                for (std::int64_t i = 0; i < n; ++i) db[i] += bwd_b(g[i], av[i], bv[i]);
            }
        });
        const double* av = a.data();
        const double* bv = b.data();
        double* ov = out.data();
        const std::int64_t n = out.numel();
        for (std::int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
        return out;
    }

    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    Tensor out = make_op(out_shape, {a, b},
                         [an, bn, sa, sb, out_shape, bwd_a, bwd_b](Node& self) {
        const double* g = self.grad.data();
        const double* av = an->data();
        const double* bv = bn->data();
        if (an->requires_grad) {
            an->ensure_grad();
            double* da = an->grad.data();
            for_each_bcast(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa,
                                                  std::int64_t ob) {
                da[oa] += bwd_a(g[i], av[oa], bv[ob]);
            });
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            double* db = bn->grad.data();
            for_each_bcast(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa,
                                                  std::int64_t ob) {
                db[ob] += bwd_b(g[i], av[oa], bv[ob]);
            });
        }
    });
    const double* av = a.data();
    const double* bv = b.data();
    double* ov = out.data();
    for_each_bcast(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
        ov[i] = fwd(av[oa], bv[ob]);
    });
    return out;
}

template <typename FwdF, typename BwdF>
Tensor unary_op(const Tensor& a, FwdF fwd, BwdF bwd) {
    auto an = a.node_ptr();
    Tensor out = make_op(a.shape(), {a}, [an, bwd](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        const double* av = an->data();
        const double* ov = self.data();
        double* da = an->grad.data();
        const std::int64_t n = self.numel();
        for (std::int64_t i = 0; i < n; ++i) da[i] += bwd(g[i], av[i], ov[i]);
    });
    const double* av = a.data();
    double* ov = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i]);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x + y; },
        [](double g, double, double) { return g; },
        [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x - y; },
        [](double g, double, double) { return g; },
        [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x * y; },
        [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x / y; },
        [](double g, double, double y) { return g / y; },
        [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; },
        [](double g, double, double) { return g; });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x * c; },
        [c](double g, double, double) { return g * c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); },
        [](double g, double, double o) { return g * o; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); },
        [](double g, double x, double) { return g / x; });
}

Tensor square(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x * x; },
        [](double g, double x, double) { return 2.0 * x * g; });
}

Tensor sqrt_safe(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double g, double x, double o) { return x > 0.0 ? g / (2.0 * o) : 0.0; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double g, double, double o) { return g * o * (1.0 - o); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    auto an = a.node_ptr();
    Tensor out = make_op(Shape{}, {a}, [an](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0];
        for (auto& d : an->grad) d += g;
    });
    double s = 0.0;
    const double* av = a.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) s += av[i];
    out.data()[0] = s;
    return out;
}

Tensor mean_all(const Tensor& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

namespace {

// Decomposes a shape around `axis` into (outer, axis extent, inner).
void axis_split(const Shape& shape, int axis, std::int64_t& outer, std::int64_t& ax,
                std::int64_t& inner) {
    check_shape(axis >= 0 && axis < static_cast<int>(shape.size()),
                "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    ax = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
    std::int64_t outer, ax, inner;
    axis_split(a.shape(), axis, outer, ax, inner);
    Shape out_shape = a.shape();
    if (keepdim)
        out_shape[static_cast<size_t>(axis)] = 1;
    else
        out_shape.erase(out_shape.begin() + axis);

    auto an = a.node_ptr();
    Tensor out = make_op(out_shape, {a}, [an, outer, ax, inner](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        double* da = an->grad.data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t k = 0; k < ax; ++k) {
                const double* gs = g + o * inner;
                double* ds = da + (o * ax + k) * inner;
                for (std::int64_t i = 0; i < inner; ++i) ds[i] += gs[i];
            }
    });
    const double* av = a.data();
    double* ov = out.data();
    std::fill(ov, ov + out.numel(), 0.0);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < ax; ++k) {
            const double* as = av + (o * ax + k) * inner;
            double* os = ov + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) os[i] += as[i];
        }
    return out;
}

Tensor softmax_axis(const Tensor& a, int axis) {
    std::int64_t outer, ax, inner;
    axis_split(a.shape(), axis, outer, ax, inner);
    auto an = a.node_ptr();
    Tensor out = make_op(a.shape(), {a}, [an, outer, ax, inner](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.data();
        double* da = an->grad.data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t base = o * ax * inner + i;
                double dot = 0.0;
                for (std::int64_t k = 0; k < ax; ++k)
                    dot += g[base + k * inner] * y[base + k * inner];
                for (std::int64_t k = 0; k < ax; ++k) {
                    const std::int64_t p = base + k * inner;
                    da[p] += y[p] * (g[p] - dot);
                }
            }
    });
    const double* av = a.data();
    double* ov = out.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * ax * inner + i;
            double mx = av[base];
            for (std::int64_t k = 1; k < ax; ++k) mx = std::max(mx, av[base + k * inner]);
            double sum = 0.0;
            for (std::int64_t k = 0; k < ax; ++k) {
                const double e = std::exp(av[base + k * inner] - mx);
                ov[base + k * inner] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::int64_t k = 0; k < ax; ++k) ov[base + k * inner] *= inv;
        }
    return out;
}

Tensor log_softmax_axis(const Tensor& a, int axis) {
    std::int64_t outer, ax, inner;
    axis_split(a.shape(), axis, outer, ax, inner);
    auto an = a.node_ptr();
    Tensor out = make_op(a.shape(), {a}, [an, outer, ax, inner](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.data();  // log probabilities
        double* da = an->grad.data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t base = o * ax * inner + i;
                double gsum = 0.0;
                for (std::int64_t k = 0; k < ax; ++k) gsum += g[base + k * inner];
                for (std::int64_t k = 0; k < ax; ++k) {
                    const std::int64_t p = base + k * inner;
                    da[p] += g[p] - std::exp(y[p]) * gsum;
                }
            }
    });
    const double* av = a.data();
    double* ov = out.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * ax * inner + i;
            double mx = av[base];
            for (std::int64_t k = 1; k < ax; ++k) mx = std::max(mx, av[base + k * inner]);
            double sum = 0.0;
            for (std::int64_t k = 0; k < ax; ++k) sum += std::exp(av[base + k * inner] - mx);
            const double lse = mx + std::log(sum);
            for (std::int64_t k = 0; k < ax; ++k) {
                const std::int64_t p = base + k * inner;
                ov[p] = av[p] - lse;
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Movement
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    check_shape(shape_numel(shape) == a.numel(),
                "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto node = detail::make_view_node(a.node_ptr()->value, std::move(shape));
    node->leaf = false;
    auto an = a.node_ptr();
    node->requires_grad = an->requires_grad;
    if (node->requires_grad) {
        node->parents.push_back(an);
        node->backprop = [an](Node& self) {
            an->ensure_grad();
            const double* g = self.grad.data();
            double* da = an->grad.data();
            const std::int64_t n = self.numel();
            for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
        };
    }
    return Tensor(node);
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int r = a.rank();
    check_shape(static_cast<int>(axes.size()) == r, "permute: axes rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int ax = axes[static_cast<size_t>(i)];
        check_shape(ax >= 0 && ax < r && !seen[static_cast<size_t>(ax)],
                    "permute: invalid axis list");
        seen[static_cast<size_t>(ax)] = true;
        out_shape[static_cast<size_t>(i)] = a.shape()[static_cast<size_t>(ax)];
    }
    // out[idx] = in[idx mapped through axes]; precompute in-strides in out order.
    std::vector<std::int64_t> in_strides(static_cast<size_t>(r), 1);
    {
        std::vector<std::int64_t> s(static_cast<size_t>(r), 1);
        for (int i = r - 2; i >= 0; --i)
            s[static_cast<size_t>(i)] =
                s[static_cast<size_t>(i + 1)] * a.shape()[static_cast<size_t>(i + 1)];
        for (int i = 0; i < r; ++i)
            in_strides[static_cast<size_t>(i)] = s[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    }
    auto an = a.node_ptr();
    auto zero = std::vector<std::int64_t>(static_cast<size_t>(r), 0);
    Tensor out = make_op(out_shape, {a}, [an, out_shape, in_strides, zero](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        double* da = an->grad.data();
        for_each_bcast(out_shape, in_strides, zero,
                       [&](std::int64_t i, std::int64_t oa, std::int64_t) { da[oa] += g[i]; });
    });
    const double* av = a.data();
    double* ov = out.data();
    for_each_bcast(out_shape, in_strides, zero,
                   [&](std::int64_t i, std::int64_t oa, std::int64_t) { ov[i] = av[oa]; });
    return out;
}

Tensor slice(const Tensor& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& ranges) {
    const int r = a.rank();
    check_shape(static_cast<int>(ranges.size()) == r, "slice: range rank mismatch");
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const auto [b, e] = ranges[static_cast<size_t>(i)];
        check_shape(b >= 0 && e > b && e <= a.shape()[static_cast<size_t>(i)],
                    "slice: range out of bounds on axis " + std::to_string(i));
        out_shape[static_cast<size_t>(i)] = e - b;
    }
    std::vector<std::int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] =
            in_strides[static_cast<size_t>(i + 1)] * a.shape()[static_cast<size_t>(i + 1)];
    std::int64_t base = 0;
    for (int i = 0; i < r; ++i) base += ranges[static_cast<size_t>(i)].first * in_strides[static_cast<size_t>(i)];

    auto an = a.node_ptr();
    auto zero = std::vector<std::int64_t>(static_cast<size_t>(r), 0);
    Tensor out = make_op(out_shape, {a}, [an, out_shape, in_strides, zero, base](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        double* da = an->grad.data();
        for_each_bcast(out_shape, in_strides, zero,
                       [&](std::int64_t i, std::int64_t oa, std::int64_t) { da[base + oa] += g[i]; });
    });
    const double* av = a.data();
    double* ov = out.data();
    for_each_bcast(out_shape, in_strides, zero,
                   [&](std::int64_t i, std::int64_t oa, std::int64_t) { ov[i] = av[base + oa]; });
    return out;
}

Tensor pad_zero(const Tensor& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& pads) {
    const int r = a.rank();
    check_shape(static_cast<int>(pads.size()) == r, "pad_zero: pad rank mismatch");
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        check_shape(pads[static_cast<size_t>(i)].first >= 0 && pads[static_cast<size_t>(i)].second >= 0,
                    "pad_zero: negative padding");
        out_shape[static_cast<size_t>(i)] = a.shape()[static_cast<size_t>(i)] +
                                            pads[static_cast<size_t>(i)].first +
                                            pads[static_cast<size_t>(i)].second;
    }
    std::vector<std::int64_t> out_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        out_strides[static_cast<size_t>(i)] =
            out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
    std::int64_t base = 0;
    for (int i = 0; i < r; ++i) base += pads[static_cast<size_t>(i)].first * out_strides[static_cast<size_t>(i)];

    auto an = a.node_ptr();
    const Shape in_shape = a.shape();
    auto zero = std::vector<std::int64_t>(static_cast<size_t>(r), 0);
    Tensor out = make_op(out_shape, {a}, [an, in_shape, out_strides, zero, base](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        double* da = an->grad.data();
        for_each_bcast(in_shape, out_strides, zero,
                       [&](std::int64_t i, std::int64_t oo, std::int64_t) { da[i] += g[base + oo]; });
    });
    const double* av = a.data();
    double* ov = out.data();
    for_each_bcast(in_shape, out_strides, zero,
                   [&](std::int64_t i, std::int64_t oo, std::int64_t) { ov[base + oo] = av[i]; });
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check_contract(!parts.empty(), "concat: no inputs");
    const Shape& first = parts[0].shape();
    const int r = static_cast<int>(first.size());
    check_shape(axis >= 0 && axis < r, "concat: axis out of range");
    Shape out_shape = first;
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check_shape(p.rank() == r, "concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis)
                check_shape(p.shape()[static_cast<size_t>(i)] == first[static_cast<size_t>(i)],
                            "concat: extent mismatch on axis " + std::to_string(i));
        total += p.shape()[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = total;

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= first[static_cast<size_t>(i)];

    std::vector<std::shared_ptr<Node>> pn;
    std::vector<std::int64_t> ax_extents;
    for (const auto& p : parts) {
        pn.push_back(p.node_ptr());
        ax_extents.push_back(p.shape()[static_cast<size_t>(axis)]);
    }

    Tensor out = make_op(out_shape, parts, [pn, ax_extents, outer, inner, total](Node& self) {
        const double* g = self.grad.data();
        std::int64_t off = 0;
        for (size_t p = 0; p < pn.size(); ++p) {
            const std::int64_t ax = ax_extents[p];
            if (pn[p]->requires_grad) {
                pn[p]->ensure_grad();
                double* da = pn[p]->grad.data();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* gs = g + (o * total + off) * inner;
                    double* ds = da + o * ax * inner;
                    for (std::int64_t i = 0; i < ax * inner; ++i) ds[i] += gs[i];
                }
            }
            off += ax;
        }
    });
    double* ov = out.data();
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t ax = p.shape()[static_cast<size_t>(axis)];
        const double* pv = p.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(ov + (o * total + off) * inner, pv + o * ax * inner,
                        static_cast<size_t>(ax * inner) * sizeof(double));
        off += ax;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    check_contract(loss.defined() && loss.numel() == 1,
                   "backward: loss must be a connected scalar");
    Node* root = loss.node();
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<Node*> stack{root};
    visited.insert(root);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && visited.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->seq > b->seq; });

    // Interior gradients are per-sweep scratch; leaf gradients accumulate.
    for (Node* n : order)
        if (!n->leaf) n->grad.assign(n->value->size(), 0.0);
    root->ensure_grad();
    root->grad[0] += 1.0;

    for (Node* n : order)
        if (n->backprop) n->backprop(*n);
}

}  // namespace capseg
