#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "capseg/error.hpp"

namespace capseg {

class Rng;

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shapes_equal(const Shape& a, const Shape& b);

namespace detail {

// One record in the differentiation graph. Ops created while any input
// requires grad keep their parents alive and carry a backward rule; pure
// data tensors carry neither, so inference builds no graph at all.
struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> value;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool leaf = true;
    std::int64_t seq = 0;  // creation order; topological by construction
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    std::int64_t numel() const { return static_cast<std::int64_t>(value->size()); }
    double* data() { return value->data(); }
    const double* data() const { return value->data(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value->size(), 0.0);
    }
};

std::shared_ptr<Node> make_node(Shape shape);

}  // namespace detail

// Dense row-major double tensor. Copies are shallow (shared storage); all
// ops return fresh tensors. Leaf tensors with requires_grad participate in
// reverse-mode differentiation via backward().
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, std::uint64_t seed, double lo, double hi,
                          bool requires_grad = false);
    static Tensor normal(Shape shape, std::uint64_t seed, double mean, double stddev,
                         bool requires_grad = false);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                          bool requires_grad = false);
    static Tensor normal(Shape shape, Rng& rng, double mean, double stddev,
                         bool requires_grad = false);
    static Tensor from_vec(Shape shape, std::vector<double> values,
                           bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return node_->numel(); }
    std::int64_t extent(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }

    double* data() { return node_->data(); }
    const double* data() const { return node_->data(); }
    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;
    std::vector<double> to_vec() const { return *node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg);

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    Tensor grad() const;       // copy of the materialized gradient
    void zero_grad();          // materializes a zero gradient on a leaf
    void clear_grad();         // drops the gradient buffer entirely

    Tensor detach() const;     // deep copy, no graph, requires_grad off
    Tensor clone_leaf() const; // deep copy as a fresh leaf, keeps requires_grad
    Tensor shared_view() const;// leaf sharing this value storage, no grad

    // In-place update of a leaf's values (optimizer use, between steps).
    void assign_values(const std::vector<double>& values);

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients of leaves accumulate
// across calls; interior gradients are reset per sweep.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Elementwise ops (NumPy-style right-aligned broadcasting on binaries)
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
// sqrt with the 0-input subgradient defined as 0, so norms of exactly-zero
// vectors are exactly zero in both value and gradient.
Tensor sqrt_safe(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a);   // rank-0 scalar
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim);
Tensor softmax_axis(const Tensor& a, int axis);
Tensor log_softmax_axis(const Tensor& a, int axis);

// ---------------------------------------------------------------------------
// Movement
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);              // shares storage
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor slice(const Tensor& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& ranges);
Tensor pad_zero(const Tensor& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& pads);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// ---------------------------------------------------------------------------
// Convolution family (layout [N, C, spatial...])
// ---------------------------------------------------------------------------

Tensor conv_nd(const Tensor& input, const Tensor& kernel,
               const std::vector<std::int64_t>& stride,
               const std::vector<std::int64_t>& padding,
               const std::vector<std::int64_t>& dilation, int rank);
Tensor conv_nd(const Tensor& input, const Tensor& kernel, std::int64_t stride,
               std::int64_t padding, std::int64_t dilation, int rank);

// Adjoint of conv_nd at stride s (padding 0, dilation 1): kernel stays
// [Cout, Cin, k...], input channels are Cout, output channels Cin, and
// output extent is (in-1)*s + k per axis.
Tensor transposed_conv_nd(const Tensor& input, const Tensor& kernel, std::int64_t stride,
                          int rank);

// ---------------------------------------------------------------------------
// Capsule plumbing (grid layout [spatial..., types, dim])
// ---------------------------------------------------------------------------

// Gathers kernel windows: [sp..., C, A] -> [osp..., K, C, A], zero padding.
Tensor unfold_caps(const Tensor& grid, int rank, std::int64_t kernel, std::int64_t stride,
                   std::int64_t padding);

// Transposed-convolution gather: output position o collects input positions i
// with i*stride + offset == o. Missing (o, offset) pairs are zero rows;
// mask_out (optional, constant) is 1 where a real child exists.
Tensor unfold_caps_transposed(const Tensor& grid, int rank, std::int64_t kernel,
                              std::int64_t stride, Tensor* mask_out);

// votes[..., k, ci, cj, :] = M[k, ci, :, cj, :]^T . patches[..., k, ci, :]
Tensor caps_votes(const Tensor& patches, const Tensor& transform);

// s[..., j, :] = sum_n coupling[..., n, j] * votes[..., n, j, :]
Tensor weighted_vote_sum(const Tensor& coupling, const Tensor& votes);

// a[..., n, j] = <votes[..., n, j, :], parents[..., j, :]>
Tensor vote_agreement(const Tensor& votes, const Tensor& parents);

}  // namespace capseg
