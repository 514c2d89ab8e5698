#include "capseg/network.hpp"

#include <algorithm>
#include <cmath>

#include "capseg/rng.hpp"

namespace capseg {

// ---------------------------------------------------------------------------
// ModelParams
// ---------------------------------------------------------------------------

void ModelParams::add(const std::string& name, Tensor tensor, bool trainable) {
    check_contract(!has(name), "ModelParams: duplicate parameter '" + name + "'");
    order_.push_back(name);
    tensor.set_requires_grad(trainable);
    tensors_.emplace(name, std::move(tensor));
    trainable_[name] = trainable;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors_.find(name);
    check_contract(it != tensors_.end(), "ModelParams: unknown parameter '" + name + "'");
    return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors_.find(name);
    check_contract(it != tensors_.end(), "ModelParams: unknown parameter '" + name + "'");
    return it->second;
}

bool ModelParams::is_trainable(const std::string& name) const {
    auto it = trainable_.find(name);
    return it != trainable_.end() && it->second;
}

std::vector<NamedTensor> ModelParams::trainables() const {
    std::vector<NamedTensor> out;
    for (const auto& name : order_)
        if (trainable_.at(name)) out.emplace_back(name, tensors_.at(name));
    return out;
}

std::vector<NamedTensor> ModelParams::all() const {
    std::vector<NamedTensor> out;
    for (const auto& name : order_) out.emplace_back(name, tensors_.at(name));
    return out;
}

std::vector<std::pair<std::string, Shape>> ModelParams::manifest() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& name : order_) out.emplace_back(name, tensors_.at(name).shape());
    return out;
}

void ModelParams::zero_grads() {
    for (auto& [name, t] : tensors_)
        if (trainable_.at(name)) t.zero_grad();
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace {

std::int64_t scaled_types(std::int64_t entry, std::int64_t divisor) {
    return std::max<std::int64_t>(1, entry / divisor);
}

std::int64_t kpos_of(std::int64_t kernel, int rank) {
    std::int64_t k = 1;
    for (int i = 0; i < rank; ++i) k *= kernel;
    return k;
}

Shape conv_out_spatial(const Shape& in, std::int64_t kernel, std::int64_t stride,
                       std::int64_t pad, std::int64_t dil) {
    Shape out;
    for (auto e : in) {
        const std::int64_t eff = dil * (kernel - 1) + 1;
        check_shape(e + 2 * pad >= eff, "layer: spatial extent " + std::to_string(e) +
                                            " too small for kernel");
        out.push_back((e + 2 * pad - eff) / stride + 1);
    }
    return out;
}

struct Builder {
    NetworkSpec spec;

    int add(LayerDesc desc) {
        spec.layers.push_back(std::move(desc));
        return static_cast<int>(spec.layers.size()) - 1;
    }

    const Shape& spatial_of(int idx) const {
        return idx < 0 ? input_spatial : spec.layers[static_cast<size_t>(idx)].out_spatial;
    }

    Shape input_spatial;

    int conv(const std::string& name, int input, std::int64_t in_ch, std::int64_t out_ch,
             std::int64_t kernel, std::int64_t stride, std::int64_t pad, std::int64_t dil,
             bool relu_after, bool sigmoid_after = false) {
        LayerDesc d;
        d.kind = LayerKind::conv;
        d.name = name;
        d.input = input;
        d.in_channels = in_ch;
        d.out_channels = out_ch;
        d.kernel = kernel;
        d.stride = stride;
        d.padding = pad;
        d.dilation = dil;
        d.relu_after = relu_after;
        d.sigmoid_after = sigmoid_after;
        d.out_spatial = conv_out_spatial(spatial_of(input), kernel, stride, pad, dil);
        return add(std::move(d));
    }

    int conv_transpose(const std::string& name, int input, std::int64_t in_ch,
                       std::int64_t out_ch, std::int64_t kernel, std::int64_t stride,
                       std::int64_t crop, bool relu_after) {
        LayerDesc d;
        d.kind = LayerKind::conv_transpose;
        d.name = name;
        d.input = input;
        d.in_channels = in_ch;
        d.out_channels = out_ch;
        d.kernel = kernel;
        d.stride = stride;
        d.crop = crop;
        d.relu_after = relu_after;
        for (auto e : spatial_of(input)) d.out_spatial.push_back((e - 1) * stride + kernel - 2 * crop);
        return add(std::move(d));
    }

    int batch_norm(const std::string& name, int input, std::int64_t channels) {
        LayerDesc d;
        d.kind = LayerKind::batch_norm;
        d.name = name;
        d.input = input;
        d.in_channels = d.out_channels = channels;
        d.out_spatial = spatial_of(input);
        return add(std::move(d));
    }

    int relu_layer(int input, std::int64_t channels) {
        LayerDesc d;
        d.kind = LayerKind::relu;
        d.input = input;
        d.in_channels = d.out_channels = channels;
        d.out_spatial = spatial_of(input);
        return add(std::move(d));
    }

    int primary_caps(int input, std::int64_t channels, std::int64_t capsule_dim) {
        check_shape(channels % capsule_dim == 0,
                    "primary capsules: channels not divisible by capsule dim");
        LayerDesc d;
        d.kind = LayerKind::primary_caps;
        d.input = input;
        d.in_channels = channels;
        d.out_types = channels / capsule_dim;
        d.out_dim = capsule_dim;
        d.out_spatial = spatial_of(input);
        return add(std::move(d));
    }

    int caps(const std::string& name, int input, bool deconv, std::int64_t in_types,
             std::int64_t in_dim, std::int64_t out_types, std::int64_t out_dim,
             std::int64_t kernel, std::int64_t stride, std::int64_t pad, std::int64_t crop,
             int routing, bool bias) {
        LayerDesc d;
        d.kind = deconv ? LayerKind::caps_deconv : LayerKind::caps_conv;
        d.name = name;
        d.input = input;
        d.in_types = in_types;
        d.in_dim = in_dim;
        d.out_types = out_types;
        d.out_dim = out_dim;
        d.kernel = kernel;
        d.stride = stride;
        d.padding = pad;
        d.crop = crop;
        d.routing = routing;
        d.vote_bias = bias;
        if (deconv)
            for (auto e : spatial_of(input))
                d.out_spatial.push_back((e - 1) * stride + kernel - 2 * crop);
        else
            d.out_spatial = conv_out_spatial(spatial_of(input), kernel, stride, pad, 1);
        return add(std::move(d));
    }

    int caps_concat(int input, int skip, std::int64_t types_a, std::int64_t types_b,
                    std::int64_t dim) {
        check_shape(spatial_of(input) == spatial_of(skip),
                    "skip connection joins different spatial extents");
        LayerDesc d;
        d.kind = LayerKind::caps_concat;
        d.input = input;
        d.skip = skip;
        d.in_types = types_a;
        d.out_types = types_a + types_b;
        d.in_dim = d.out_dim = dim;
        d.out_spatial = spatial_of(input);
        return add(std::move(d));
    }

    int caps_to_features(int input, std::int64_t types, std::int64_t dim) {
        LayerDesc d;
        d.kind = LayerKind::caps_to_features;
        d.input = input;
        d.in_types = types;
        d.in_dim = dim;
        d.out_channels = types * dim;
        d.out_spatial = spatial_of(input);
        return add(std::move(d));
    }

    int caps_mask(int input, std::int64_t types, std::int64_t dim) {
        LayerDesc d;
        d.kind = LayerKind::caps_mask;
        d.input = input;
        d.in_types = d.out_types = types;
        d.in_dim = d.out_dim = dim;
        d.out_spatial = spatial_of(input);
        return add(std::move(d));
    }

    int concat_channels(int input, int skip, std::int64_t ch_a, std::int64_t ch_b) {
        check_shape(spatial_of(input) == spatial_of(skip),
                    "skip connection joins different spatial extents");
        LayerDesc d;
        d.kind = LayerKind::concat_channels;
        d.input = input;
        d.skip = skip;
        d.in_channels = ch_a;
        d.out_channels = ch_a + ch_b;
        d.out_spatial = spatial_of(input);
        return add(std::move(d));
    }
};

}  // namespace

NetworkSpec build_segcaps2d(const Shape& input_hw, int classes, const Segcaps2dOptions& opt) {
    check_shape(input_hw.size() == 2, "build_segcaps2d: input must have two spatial extents");
    check_contract(classes >= 2, "build_segcaps2d: need at least 2 classes");
    check_contract(opt.type_schedule.size() == 6, "build_segcaps2d: schedule needs 6 entries");
    for (auto e : input_hw)
        check_shape(e % 8 == 0 && e >= 8,
                    "build_segcaps2d: spatial extent " + std::to_string(e) +
                        " must be a multiple of 8 (depth-3 encoder)");

    Builder b;
    b.input_spatial = input_hw;
    b.spec.arch = "segcaps2d";
    b.spec.spatial_rank = 2;
    b.spec.classes = classes;
    b.spec.input_extents = Shape{opt.in_channels, input_hw[0], input_hw[1]};
    b.spec.reconstruction = opt.reconstruction;
    b.spec.multi_segcaps = opt.multi_segcaps;
    b.spec.routing_iterations = opt.routing;

    // Scaled encoder types: entry 0 fixes the primary capsule split, entries
    // 1..5 are the windowed encoder layers (strides 2,1,2,1,2).
    std::vector<std::int64_t> types;
    for (auto e : opt.type_schedule) types.push_back(scaled_types(e, opt.schedule_divisor));
    const std::int64_t primary_types = types[0];
    check_shape(opt.base_channels % primary_types == 0,
                "build_segcaps2d: base channels not divisible by primary type count");
    const std::int64_t primary_dim = opt.base_channels / primary_types;
    const std::int64_t A = opt.capsule_dim;
    const std::int64_t ck = opt.conv_kernel;
    const std::int64_t cpad = (ck - 1) / 2;
    const std::int64_t dk = opt.deconv_kernel;
    check_shape(dk >= 2 && dk % 2 == 0, "build_segcaps2d: deconv kernel must be even");
    const std::int64_t dcrop = (dk - 2) / 2;  // (in-1)*2 + k - 2*crop == 2*in
    const int K = opt.routing;
    const bool vb = opt.vote_bias;

    const int ext = b.conv("extractor.conv1", -1, opt.in_channels, opt.base_channels, ck, 1,
                           cpad, 1, /*relu=*/true);
    b.spec.extractor_out = ext;
    const int prim = b.primary_caps(ext, opt.base_channels, primary_dim);

    const int e1 = b.caps("enc1", prim, false, primary_types, primary_dim, types[1], A, ck, 2,
                          cpad, 0, K, vb);
    const int e2 = b.caps("enc2", e1, false, types[1], A, types[2], A, ck, 1, cpad, 0, K, vb);
    const int e3 = b.caps("enc3", e2, false, types[2], A, types[3], A, ck, 2, cpad, 0, K, vb);
    const int e4 = b.caps("enc4", e3, false, types[3], A, types[4], A, ck, 1, cpad, 0, K, vb);
    const int e5 = b.caps("enc5", e4, false, types[4], A, types[5], A, ck, 2, cpad, 0, K, vb);

    // decoder mirrors the encoder resolutions; skips come from the deepest
    // layer at each resolution
    const int d1 = b.caps("dec1", e5, true, types[5], A, types[4], A, dk, 2, 0, dcrop, K, vb);
    const int c1 = b.caps_concat(d1, e4, types[4], types[4], A);
    const int m1 = b.caps("merge1", c1, false, 2 * types[4], A, types[4], A, ck, 1, cpad, 0, K, vb);

    const int d2 = b.caps("dec2", m1, true, types[4], A, types[2], A, dk, 2, 0, dcrop, K, vb);
    const int c2 = b.caps_concat(d2, e2, types[2], types[2], A);
    const int m2 = b.caps("merge2", c2, false, 2 * types[2], A, types[2], A, ck, 1, cpad, 0, K, vb);

    const int d3 = b.caps("dec3", m2, true, types[2], A, primary_types, primary_dim, dk, 2, 0,
                          dcrop, K, vb);
    const int c3 = b.caps_concat(d3, prim, primary_types, primary_types, primary_dim);
    const int seg = b.caps("segcaps", c3, false, 2 * primary_types, primary_dim,
                           static_cast<std::int64_t>(classes), A, 1, 1, 0, 0, K, vb);
    b.spec.final_caps = seg;

    // decoder head: 1x1 convolutions over the capsule features
    const std::int64_t segc = static_cast<std::int64_t>(classes) * A;
    const int hf = b.caps_to_features(seg, classes, A);
    const int h1 = b.conv("head.conv1", hf, segc, opt.base_channels, 1, 1, 0, 1, true);
    const int h2 = b.conv("head.conv2", h1, opt.base_channels,
                          static_cast<std::int64_t>(classes), 1, 1, 0, 1, false);
    b.spec.logits = h2;

    if (opt.reconstruction) {
        const int mk = b.caps_mask(seg, classes, A);
        const int mf = b.caps_to_features(mk, classes, A);
        const int r1 = b.conv("recon.conv1", mf, segc, opt.base_channels, 1, 1, 0, 1, true);
        const int r2 = b.conv("recon.conv2", r1, opt.base_channels, opt.base_channels, 1, 1, 0, 1,
                              true);
        const int r3 = b.conv("recon.conv3", r2, opt.base_channels, opt.in_channels, 1, 1, 0, 1,
                              false, /*sigmoid=*/true);
        b.spec.recon = r3;
    }
    return b.spec;
}

NetworkSpec build_ucaps3d(const Shape& input_zyx, int classes, const Ucaps3dOptions& opt) {
    check_shape(input_zyx.size() == 3, "build_ucaps3d: input must have three spatial extents");
    check_contract(classes >= 2, "build_ucaps3d: need at least 2 classes");
    check_contract(opt.type_schedule.size() == 6, "build_ucaps3d: schedule needs 6 entries");
    for (auto e : input_zyx)
        check_shape(e % 8 == 0 && e >= 16,
                    "build_ucaps3d: spatial extent " + std::to_string(e) +
                        " must be a multiple of 8 and >= 16");

    Builder b;
    b.input_spatial = input_zyx;
    b.spec.arch = "ucaps3d";
    b.spec.spatial_rank = 3;
    b.spec.classes = classes;
    b.spec.input_extents = Shape{opt.in_channels, input_zyx[0], input_zyx[1], input_zyx[2]};
    b.spec.reconstruction = opt.reconstruction;
    b.spec.routing_iterations = opt.routing;

    const std::int64_t c1 = scaled_types(opt.extractor_channels[0], opt.channel_divisor);
    const std::int64_t c2 = scaled_types(opt.extractor_channels[1], opt.channel_divisor);
    const std::int64_t c3 = scaled_types(opt.extractor_channels[2], opt.channel_divisor);
    const std::int64_t ek = opt.extractor_kernel;

    // dilated extractor: rates 1, 3, 3, spatial size preserved
    const int x1 = b.conv("extractor.conv1", -1, opt.in_channels, c1, ek, 1, (ek - 1) / 2, 1, true);
    const int x2 = b.conv("extractor.conv2", x1, c1, c2, ek, 1, 3 * (ek - 1) / 2, 3, true);
    const int x3 = b.conv("extractor.conv3", x2, c2, c3, ek, 1, 3 * (ek - 1) / 2, 3, true);
    b.spec.extractor_out = x3;

    std::vector<std::int64_t> types;
    for (auto e : opt.type_schedule) types.push_back(scaled_types(e, opt.schedule_divisor));
    types.back() = classes;  // the last capsule layer carries one type per class

    const std::int64_t A = opt.capsule_dim;
    const std::int64_t kk = opt.caps_kernel;
    const std::int64_t kp = (kk - 1) / 2;
    const int K = opt.routing;

    // the whole 64-ish-dim feature vector becomes one primary capsule
    const int prim = b.primary_caps(x3, c3, c3);
    const std::int64_t strides[6] = {2, 1, 2, 1, 2, 1};
    std::int64_t prev_types = 1, prev_dim = c3;
    int prev = prim;
    int caps_idx[6];
    for (int i = 0; i < 6; ++i) {
        caps_idx[i] = b.caps("caps" + std::to_string(i + 1), prev, false, prev_types, prev_dim,
                             types[static_cast<size_t>(i)], A, kk, strides[i], kp, 0, K, false);
        prev = caps_idx[i];
        prev_types = types[static_cast<size_t>(i)];
        prev_dim = A;
    }
    b.spec.final_caps = caps_idx[5];

    // CNN decoder over reshaped capsule features with skips at each resolution
    const std::int64_t dc = opt.decoder_channels;
    const int bot = b.caps_to_features(caps_idx[5], types[5], A);

    const int skip4 = b.caps_to_features(caps_idx[3], types[3], A);  // at /4
    const int skip2 = b.caps_to_features(caps_idx[1], types[1], A);  // at /2

    const int u3 = b.conv_transpose("dec3.up", bot, types[5] * A, dc, 2, 2, 0, false);
    const int j3 = b.concat_channels(u3, skip4, dc, types[3] * A);
    const int v3 = b.conv("dec3.conv", j3, dc + types[3] * A, dc, 3, 1, 1, 1, false);
    const int n3 = b.batch_norm("dec3.bn", v3, dc);
    const int a3 = b.relu_layer(n3, dc);

    const int u2 = b.conv_transpose("dec2.up", a3, dc, dc, 2, 2, 0, false);
    const int j2 = b.concat_channels(u2, skip2, dc, types[1] * A);
    const int v2 = b.conv("dec2.conv", j2, dc + types[1] * A, dc, 3, 1, 1, 1, false);
    const int n2 = b.batch_norm("dec2.bn", v2, dc);
    const int a2 = b.relu_layer(n2, dc);

    const int u1 = b.conv_transpose("dec1.up", a2, dc, dc, 2, 2, 0, false);
    const int j1 = b.concat_channels(u1, x3, dc, c3);
    const int v1 = b.conv("dec1.conv", j1, dc + c3, dc, 3, 1, 1, 1, false);
    const int n1 = b.batch_norm("dec1.bn", v1, dc);
    const int a1 = b.relu_layer(n1, dc);

    const int head = b.conv("head.conv1", a1, dc, static_cast<std::int64_t>(classes), 1, 1, 0, 1,
                            false);
    b.spec.logits = head;

    if (opt.reconstruction) {
        const int r1 = b.conv("recon.conv1", a1, dc, dc / 2, 1, 1, 0, 1, true);
        const int r2 = b.conv("recon.conv2", r1, dc / 2, dc / 2, 1, 1, 0, 1, true);
        const int r3 = b.conv("recon.conv3", r2, dc / 2, opt.in_channels, 1, 1, 0, 1, false,
                              true);
        b.spec.recon = r3;
    }
    return b.spec;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

ModelParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
    ModelParams params;
    Rng rng(seed);
    const int rank = spec.spatial_rank;
    for (const auto& layer : spec.layers) {
        switch (layer.kind) {
            case LayerKind::conv: {
                Shape w{layer.out_channels, layer.in_channels};
                for (int i = 0; i < rank; ++i) w.push_back(layer.kernel);
                const double fan_in =
                    static_cast<double>(layer.in_channels * kpos_of(layer.kernel, rank));
                params.add(layer.name + ".w",
                           Tensor::normal(w, rng, 0.0, std::sqrt(2.0 / fan_in)), true);
                params.add(layer.name + ".b", Tensor::zeros({layer.out_channels}), true);
                break;
            }
            case LayerKind::conv_transpose: {
                Shape w{layer.in_channels, layer.out_channels};
                for (int i = 0; i < rank; ++i) w.push_back(layer.kernel);
                const double fan_in =
                    static_cast<double>(layer.in_channels * kpos_of(layer.kernel, rank));
                params.add(layer.name + ".w",
                           Tensor::normal(w, rng, 0.0, std::sqrt(2.0 / fan_in)), true);
                params.add(layer.name + ".b", Tensor::zeros({layer.out_channels}), true);
                break;
            }
            case LayerKind::batch_norm: {
                params.add(layer.name + ".gamma", Tensor::full({layer.in_channels}, 1.0), true);
                params.add(layer.name + ".beta", Tensor::zeros({layer.in_channels}), true);
                params.add(layer.name + ".running_mean", Tensor::zeros({layer.in_channels}),
                           false);
                params.add(layer.name + ".running_var", Tensor::full({layer.in_channels}, 1.0),
                           false);
                break;
            }
            case LayerKind::caps_conv:
            case LayerKind::caps_deconv: {
                const std::int64_t kpos = kpos_of(layer.kernel, rank);
                Shape m{kpos, layer.in_types, layer.in_dim, layer.out_types, layer.out_dim};
                const double fan_in =
                    static_cast<double>(kpos * layer.in_types * layer.in_dim);
                params.add(layer.name + ".M",
                           Tensor::normal(m, rng, 0.0, std::sqrt(2.0 / fan_in)), true);
                if (layer.vote_bias)
                    params.add(layer.name + ".B",
                               Tensor::zeros({layer.out_types, layer.out_dim}), true);
                break;
            }
            default:
                break;
        }
    }
    return params;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

Tensor center_crop_spatial(const Tensor& t, int spatial_offset, int rank, std::int64_t crop) {
    if (crop == 0) return t;
    std::vector<std::pair<std::int64_t, std::int64_t>> ranges;
    for (int i = 0; i < t.rank(); ++i) {
        const bool spatial = i >= spatial_offset && i < spatial_offset + rank;
        const std::int64_t b = spatial ? crop : 0;
        ranges.emplace_back(b, t.extent(i) - b);
    }
    return slice(t, ranges);
}

Tensor channel_bias(const Tensor& b, int rank) {
    Shape s{1, b.extent(0)};
    for (int i = 0; i < rank; ++i) s.push_back(1);
    return reshape(b, s);
}

// [1, C, sp...] -> [sp..., C]
Tensor to_classes_last(const Tensor& t, int rank) {
    Shape dropped(t.shape().begin() + 1, t.shape().end());
    Tensor v = reshape(t, dropped);
    std::vector<int> axes;
    for (int i = 0; i < rank; ++i) axes.push_back(1 + i);
    axes.push_back(0);
    return permute(v, axes);
}

struct ForwardCtx {
    const NetworkSpec& spec;
    ModelParams& params;
    bool with_graph;
    bool train_mode;
    const LabelMap* gt;

    Tensor P(const std::string& name) {
        Tensor& t = params.at(name);
        return with_graph ? t : t.shared_view();
    }
};

Tensor run_batch_norm(ForwardCtx& ctx, const LayerDesc& layer, const Tensor& input) {
    constexpr double kEps = 1e-5;
    constexpr double kMomentum = 0.9;
    const std::int64_t channels = layer.in_channels;
    const std::int64_t sp_n = input.numel() / channels;
    Tensor x = reshape(input, {channels, sp_n});
    Tensor gamma = reshape(ctx.P(layer.name + ".gamma"), {channels, 1});
    Tensor beta = reshape(ctx.P(layer.name + ".beta"), {channels, 1});

    Tensor xhat;
    if (ctx.train_mode) {
        Tensor mu = mul_scalar(sum_axis(x, 1, true), 1.0 / static_cast<double>(sp_n));
        Tensor centered = sub(x, mu);
        Tensor var = mul_scalar(sum_axis(square(centered), 1, true),
                                1.0 / static_cast<double>(sp_n));
        xhat = div(centered, sqrt_safe(add_scalar(var, kEps)));

        // update running statistics outside the graph
        Tensor& rm = ctx.params.at(layer.name + ".running_mean");
        Tensor& rv = ctx.params.at(layer.name + ".running_var");
        std::vector<double> new_mean = rm.to_vec();
        std::vector<double> new_var = rv.to_vec();
        for (std::int64_t c = 0; c < channels; ++c) {
            new_mean[static_cast<size_t>(c)] = kMomentum * new_mean[static_cast<size_t>(c)] +
                                               (1.0 - kMomentum) * mu.data()[c];
            new_var[static_cast<size_t>(c)] = kMomentum * new_var[static_cast<size_t>(c)] +
                                              (1.0 - kMomentum) * var.data()[c];
        }
        rm.assign_values(new_mean);
        rv.assign_values(new_var);
    } else {
        Tensor rm = reshape(ctx.params.at(layer.name + ".running_mean").shared_view(),
                            {channels, 1});
        Tensor rv = reshape(ctx.params.at(layer.name + ".running_var").shared_view(),
                            {channels, 1});
        xhat = div(sub(x, rm), sqrt_safe(add_scalar(rv, kEps)));
    }
    return reshape(add(mul(xhat, gamma), beta), input.shape());
}

}  // namespace

ForwardResult forward_segment(const NetworkSpec& spec, ModelParams& params, const Tensor& image,
                              const LabelMap* gt_mask, bool train_mode, bool with_graph) {
    check_shape(image.shape() == spec.input_extents,
                "forward: image " + shape_str(image.shape()) + " does not match network input " +
                    shape_str(spec.input_extents));
    const int rank = spec.spatial_rank;
    ForwardCtx ctx{spec, params, with_graph, train_mode, gt_mask};

    Shape batched = image.shape();
    batched.insert(batched.begin(), 1);
    Tensor net_input = reshape(image, batched);

    std::vector<Tensor> outs(spec.layers.size());
    Tensor final_caps_values;  // cached for caps_mask label fallback

    for (size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerDesc& layer = spec.layers[li];
        const Tensor& in = layer.input < 0 ? net_input : outs[static_cast<size_t>(layer.input)];
        Tensor out;
        switch (layer.kind) {
            case LayerKind::conv: {
                out = conv_nd(in, ctx.P(layer.name + ".w"), layer.stride, layer.padding,
                              layer.dilation, rank);
                out = add(out, channel_bias(ctx.P(layer.name + ".b"), rank));
                if (layer.relu_after) out = relu(out);
                if (layer.sigmoid_after) out = sigmoid(out);
                break;
            }
            case LayerKind::conv_transpose: {
                out = transposed_conv_nd(in, ctx.P(layer.name + ".w"), layer.stride, rank);
                out = center_crop_spatial(out, 2, rank, layer.crop);
                out = add(out, channel_bias(ctx.P(layer.name + ".b"), rank));
                if (layer.relu_after) out = relu(out);
                break;
            }
            case LayerKind::batch_norm:
                out = run_batch_norm(ctx, layer, in);
                break;
            case LayerKind::relu:
                out = relu(in);
                break;
            case LayerKind::sigmoid:
                out = sigmoid(in);
                break;
            case LayerKind::primary_caps: {
                Shape chan_first(in.shape().begin() + 1, in.shape().end());
                out = to_primary_capsules(reshape(in, chan_first), layer.out_dim).values;
                break;
            }
            case LayerKind::caps_conv:
            case LayerKind::caps_deconv: {
                CapsuleLayerParams p;
                p.transform = ctx.P(layer.name + ".M");
                p.iterations = layer.routing;
                p.kernel = layer.kernel;
                p.stride = layer.stride;
                p.padding = layer.padding;
                p.use_bias = layer.vote_bias;
                if (layer.vote_bias) p.bias = ctx.P(layer.name + ".B");
                CapsuleGrid grid{in, rank};
                if (layer.kind == LayerKind::caps_conv) {
                    p.mode = CapsuleMode::conv;
                    out = capsule_conv_nd(grid, p, rank).values;
                } else {
                    p.mode = CapsuleMode::deconv;
                    out = capsule_deconv_nd(grid, p, rank).values;
                    out = center_crop_spatial(out, 0, rank, layer.crop);
                }
                break;
            }
            case LayerKind::caps_concat:
                out = concat({in, outs[static_cast<size_t>(layer.skip)]}, rank);
                break;
            case LayerKind::caps_to_features: {
                Tensor feats = primary_capsules_to_features(CapsuleGrid{in, rank});
                Shape s = feats.shape();
                s.insert(s.begin(), 1);
                out = reshape(feats, s);
                break;
            }
            case LayerKind::caps_mask: {
                // zero every capsule except the labeled class; background
                // positions contribute nothing
                LabelMap labels =
                    ctx.gt ? *ctx.gt
                           : argmax_labels(vector_lengths(in.detach()));
                Tensor maskhot = one_hot(labels, spec.classes);
                double* mv = maskhot.data();
                const std::int64_t n = labels.numel();
                for (std::int64_t i = 0; i < n; ++i)
                    if (labels.at_flat(i) == 0) mv[i * spec.classes] = 0.0;
                Shape ms = maskhot.shape();
                ms.push_back(1);
                out = mul(in, reshape(maskhot, ms));
                break;
            }
            case LayerKind::concat_channels:
                out = concat({in, outs[static_cast<size_t>(layer.skip)]}, 1);
                break;
        }
        outs[li] = out;
        if (static_cast<int>(li) == spec.final_caps) final_caps_values = out;
    }

    ForwardResult result;
    result.logits = to_classes_last(outs[static_cast<size_t>(spec.logits)], rank);
    result.probs = softmax_axis(result.logits, rank);
    result.caps_lengths = vector_lengths(final_caps_values);
    if (spec.recon >= 0) {
        const Tensor& r = outs[static_cast<size_t>(spec.recon)];
        Shape dropped(r.shape().begin() + 1, r.shape().end());
        result.recon = reshape(r, dropped);
    }
    return result;
}

Tensor forward_extractor(const NetworkSpec& spec, ModelParams& params, const Tensor& image,
                         bool with_graph) {
    check_contract(spec.extractor_out >= 0, "forward_extractor: network has no extractor head");
    check_shape(image.shape() == spec.input_extents,
                "forward_extractor: image " + shape_str(image.shape()) +
                    " does not match network input " + shape_str(spec.input_extents));
    const int rank = spec.spatial_rank;
    ForwardCtx ctx{spec, params, with_graph, /*train_mode=*/true, nullptr};

    Shape batched = image.shape();
    batched.insert(batched.begin(), 1);
    Tensor net_input = reshape(image, batched);

    std::vector<Tensor> outs(static_cast<size_t>(spec.extractor_out) + 1);
    for (size_t li = 0; li <= static_cast<size_t>(spec.extractor_out); ++li) {
        const LayerDesc& layer = spec.layers[li];
        check_contract(layer.kind == LayerKind::conv,
                       "forward_extractor: extractor prefix must be convolutional");
        const Tensor& in = layer.input < 0 ? net_input : outs[static_cast<size_t>(layer.input)];
        Tensor out = conv_nd(in, ctx.P(layer.name + ".w"), layer.stride, layer.padding,
                             layer.dilation, rank);
        out = add(out, channel_bias(ctx.P(layer.name + ".b"), rank));
        if (layer.relu_after) out = relu(out);
        if (layer.sigmoid_after) out = sigmoid(out);
        outs[li] = out;
    }
    return outs[static_cast<size_t>(spec.extractor_out)];
}

std::vector<std::string> extractor_param_names(const NetworkSpec& spec) {
    std::vector<std::string> names;
    for (int li = 0; li <= spec.extractor_out; ++li) {
        const LayerDesc& layer = spec.layers[static_cast<size_t>(li)];
        if (layer.kind == LayerKind::conv) {
            names.push_back(layer.name + ".w");
            names.push_back(layer.name + ".b");
        }
    }
    return names;
}

}  // namespace capseg
