#include "capseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "capseg/rng.hpp"

namespace capseg {

namespace {

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

SegDataset gen_shapes_2d(std::uint64_t seed, int count, std::int64_t size, int classes) {
    check_shape(size >= 16, "gen_shapes_2d: size must be >= 16");
    check_contract(classes == 2 || classes == 3, "gen_shapes_2d: classes must be 2 or 3");
    check_contract(count >= 1, "gen_shapes_2d: count must be >= 1");

    SegDataset ds;
    ds.classes = classes;
    ds.spatial_rank = 2;
    Rng rng(seed);
    const auto s = static_cast<double>(size);

    for (int n = 0; n < count; ++n) {
        Rng item = rng.fork(static_cast<std::uint64_t>(n) + 1);
        Tensor image = Tensor::zeros({1, size, size});
        LabelMap mask = all_background({size, size});
        double* iv = image.data();
        for (std::int64_t i = 0; i < size * size; ++i)
            iv[i] = quantize_f32(item.uniform(0.0, 0.25));

        const int shapes = 1 + static_cast<int>(item.below(3));
        for (int sh = 0; sh < shapes; ++sh) {
            const bool circle = item.below(2) == 0;
            const std::uint8_t label = classes == 2 ? 1 : (circle ? 1 : 2);
            const double cy = item.uniform(0.2 * s, 0.8 * s);
            const double cx = item.uniform(0.2 * s, 0.8 * s);
            const double intensity = item.uniform(0.55, 0.95);
            if (circle) {
                const double r = item.uniform(0.10 * s, 0.22 * s);
                for (std::int64_t y = 0; y < size; ++y)
                    for (std::int64_t x = 0; x < size; ++x) {
                        const double dy = static_cast<double>(y) - cy;
                        const double dx = static_cast<double>(x) - cx;
                        if (dy * dy + dx * dx <= r * r) {
                            iv[y * size + x] =
                                quantize_f32(clamp01(intensity + item.normal(0.0, 0.02)));
                            mask.labels[static_cast<size_t>(y * size + x)] = label;
                        }
                    }
            } else {
                const double hy = item.uniform(0.08 * s, 0.20 * s);
                const double hx = item.uniform(0.08 * s, 0.20 * s);
                for (std::int64_t y = 0; y < size; ++y)
                    for (std::int64_t x = 0; x < size; ++x) {
                        if (std::abs(static_cast<double>(y) - cy) <= hy &&
                            std::abs(static_cast<double>(x) - cx) <= hx) {
                            iv[y * size + x] =
                                quantize_f32(clamp01(intensity + item.normal(0.0, 0.02)));
                            mask.labels[static_cast<size_t>(y * size + x)] = label;
                        }
                    }
            }
        }
        ds.samples.push_back({image, mask});
    }
    return ds;
}

void raster_sphere(LabelMap& mask, Tensor& image, const std::vector<double>& center, double r,
                   std::uint8_t label, double intensity, Rng& noise) {
    const std::int64_t sz = mask.shape[0];
    const std::int64_t sy = mask.shape[1];
    const std::int64_t sx = mask.shape[2];
    double* iv = image.data();
    for (std::int64_t z = 0; z < sz; ++z)
        for (std::int64_t y = 0; y < sy; ++y)
            for (std::int64_t x = 0; x < sx; ++x) {
                const double dz = static_cast<double>(z) - center[0];
                const double dy = static_cast<double>(y) - center[1];
                const double dx = static_cast<double>(x) - center[2];
                if (dz * dz + dy * dy + dx * dx <= r * r) {
                    const std::int64_t off = (z * sy + y) * sx + x;
                    iv[off] = quantize_f32(clamp01(intensity + noise.normal(0.0, 0.02)));
                    mask.labels[static_cast<size_t>(off)] = label;
                }
            }
}

std::int64_t sphere_voxel_count(std::int64_t size, const std::vector<double>& center, double r) {
    std::int64_t count = 0;
    for (std::int64_t z = 0; z < size; ++z)
        for (std::int64_t y = 0; y < size; ++y)
            for (std::int64_t x = 0; x < size; ++x) {
                const double dz = static_cast<double>(z) - center[0];
                const double dy = static_cast<double>(y) - center[1];
                const double dx = static_cast<double>(x) - center[2];
                if (dz * dz + dy * dy + dx * dx <= r * r) ++count;
            }
    return count;
}

SegDataset gen_blobs_3d(std::uint64_t seed, int count, std::int64_t size, int classes) {
    check_shape(size >= 16, "gen_blobs_3d: size must be >= 16");
    check_contract(classes == 2 || classes == 3, "gen_blobs_3d: classes must be 2 or 3");
    check_contract(count >= 1, "gen_blobs_3d: count must be >= 1");

    SegDataset ds;
    ds.classes = classes;
    ds.spatial_rank = 3;
    Rng rng(seed);
    const auto s = static_cast<double>(size);

    for (int n = 0; n < count; ++n) {
        Rng item = rng.fork(static_cast<std::uint64_t>(n) + 1);
        Tensor image = Tensor::zeros({1, size, size, size});
        LabelMap mask = all_background({size, size, size});
        double* iv = image.data();
        for (std::int64_t i = 0; i < size * size * size; ++i)
            iv[i] = quantize_f32(item.uniform(0.0, 0.25));

        const int blobs = 1 + static_cast<int>(item.below(3));
        for (int b = 0; b < blobs; ++b) {
            const bool sphere = item.below(2) == 0;
            const std::uint8_t label = classes == 2 ? 1 : (sphere ? 1 : 2);
            std::vector<double> c{item.uniform(0.3 * s, 0.7 * s), item.uniform(0.3 * s, 0.7 * s),
                                  item.uniform(0.3 * s, 0.7 * s)};
            const double intensity = item.uniform(0.55, 0.95);
            if (sphere) {
                const double r = item.uniform(0.18 * s, 0.28 * s);
                raster_sphere(mask, image, c, r, label, intensity, item);
            } else {
                const double hz = item.uniform(0.15 * s, 0.25 * s);
                const double hy = item.uniform(0.15 * s, 0.25 * s);
                const double hx = item.uniform(0.15 * s, 0.25 * s);
                for (std::int64_t z = 0; z < size; ++z)
                    for (std::int64_t y = 0; y < size; ++y)
                        for (std::int64_t x = 0; x < size; ++x) {
                            if (std::abs(static_cast<double>(z) - c[0]) <= hz &&
                                std::abs(static_cast<double>(y) - c[1]) <= hy &&
                                std::abs(static_cast<double>(x) - c[2]) <= hx) {
                                const std::int64_t off = (z * size + y) * size + x;
                                iv[off] =
                                    quantize_f32(clamp01(intensity + item.normal(0.0, 0.02)));
                                mask.labels[static_cast<size_t>(off)] = label;
                            }
                        }
            }
        }
        ds.samples.push_back({image, mask});
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

namespace {

Tensor blur_image(const Tensor& image, double sigma) {
    const std::int64_t radius = static_cast<std::int64_t>(std::ceil(2.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) / sigma) *
                                  (static_cast<double>(i) / sigma));
        kernel[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    // separable passes with zero padding, one spatial axis at a time
    const int sr = image.rank() - 1;
    Shape spatial(image.shape().begin() + 1, image.shape().end());
    const std::int64_t channels = image.extent(0);
    const std::int64_t sp_n = shape_numel(spatial);
    std::vector<std::int64_t> strides(static_cast<size_t>(sr), 1);
    for (int i = sr - 2; i >= 0; --i)
        strides[static_cast<size_t>(i)] =
            strides[static_cast<size_t>(i + 1)] * spatial[static_cast<size_t>(i + 1)];

    std::vector<double> cur = image.to_vec();
    std::vector<double> next(cur.size());
    for (int axis = 0; axis < sr; ++axis) {
        const std::int64_t ext = spatial[static_cast<size_t>(axis)];
        const std::int64_t stride = strides[static_cast<size_t>(axis)];
        for (std::int64_t c = 0; c < channels; ++c) {
            const double* src = cur.data() + c * sp_n;
            double* dst = next.data() + c * sp_n;
            std::vector<std::int64_t> idx(static_cast<size_t>(sr), 0);
            for (std::int64_t p = 0; p < sp_n; ++p) {
                const std::int64_t pos = idx[static_cast<size_t>(axis)];
                double acc = 0.0;
                for (std::int64_t k = -radius; k <= radius; ++k) {
                    const std::int64_t q = pos + k;
                    if (q < 0 || q >= ext) continue;
                    acc += kernel[static_cast<size_t>(k + radius)] * src[p + k * stride];
                }
                dst[p] = acc;
                for (int d = sr - 1; d >= 0; --d) {
                    if (++idx[static_cast<size_t>(d)] < spatial[static_cast<size_t>(d)]) break;
                    idx[static_cast<size_t>(d)] = 0;
                }
            }
        }
        std::swap(cur, next);
    }
    return Tensor::from_vec(image.shape(), std::move(cur));
}

Tensor swap_patches_image(const Tensor& image, std::uint64_t seed) {
    const int sr = image.rank() - 1;
    Shape spatial(image.shape().begin() + 1, image.shape().end());
    const std::int64_t channels = image.extent(0);
    const std::int64_t sp_n = shape_numel(spatial);

    // Patches live on a 4^rank cell grid, each patch a quarter extent per axis.
    std::vector<std::int64_t> patch(static_cast<size_t>(sr));
    std::int64_t cells = 1;
    for (int i = 0; i < sr; ++i) {
        patch[static_cast<size_t>(i)] = std::max<std::int64_t>(1, spatial[static_cast<size_t>(i)] / 4);
        cells *= 4;
    }
    // four distinct cells, seeded; pairs (0,1) and (2,3) exchange
    Rng rng(seed);
    std::vector<std::int64_t> chosen;
    while (chosen.size() < 4) {
        const auto cell = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cells)));
        if (std::find(chosen.begin(), chosen.end(), cell) == chosen.end())
            chosen.push_back(cell);
    }

    std::vector<std::int64_t> strides(static_cast<size_t>(sr), 1);
    for (int i = sr - 2; i >= 0; --i)
        strides[static_cast<size_t>(i)] =
            strides[static_cast<size_t>(i + 1)] * spatial[static_cast<size_t>(i + 1)];
    auto cell_origin = [&](std::int64_t cell) {
        std::int64_t base = 0;
        for (int i = sr - 1; i >= 0; --i) {
            base += (cell % 4) * patch[static_cast<size_t>(i)] * strides[static_cast<size_t>(i)];
            cell /= 4;
        }
        return base;
    };

    Tensor out = Tensor::from_vec(image.shape(), image.to_vec());
    double* ov = out.data();
    const std::int64_t patch_n = [&] {
        std::int64_t n = 1;
        for (auto p : patch) n *= p;
        return n;
    }();

    for (int pair = 0; pair < 2; ++pair) {
        const std::int64_t a = cell_origin(chosen[static_cast<size_t>(2 * pair)]);
        const std::int64_t b = cell_origin(chosen[static_cast<size_t>(2 * pair + 1)]);
        std::vector<std::int64_t> idx(static_cast<size_t>(sr), 0);
        for (std::int64_t p = 0; p < patch_n; ++p) {
            std::int64_t off = 0;
            for (int d = 0; d < sr; ++d)
                off += idx[static_cast<size_t>(d)] * strides[static_cast<size_t>(d)];
            for (std::int64_t c = 0; c < channels; ++c)
                std::swap(ov[c * sp_n + a + off], ov[c * sp_n + b + off]);
            for (int d = sr - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < patch[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }
    return out;
}

}  // namespace

Tensor apply_transform(const Tensor& image, const Transform& t) {
    check_shape(image.rank() >= 2, "apply_transform: image must be [C, spatial...]");
    switch (t.kind) {
        case TransformKind::identity:
            return image.detach();
        case TransformKind::zero_channel: {
            if (image.extent(0) < 3)
                throw UnsupportedError("zero_channel requires >= 3 channels, image has " +
                                       std::to_string(image.extent(0)));
            check_contract(t.channel >= 0 && t.channel < 3, "zero_channel: channel must be 0..2");
            Tensor out = image.detach();
            const std::int64_t sp_n = image.numel() / image.extent(0);
            std::memset(out.data() + t.channel * sp_n, 0,
                        static_cast<size_t>(sp_n) * sizeof(double));
            return out;
        }
        case TransformKind::swap_patches:
            return swap_patches_image(image, t.seed);
        case TransformKind::blur:
            return blur_image(image, t.blur_sigma);
        case TransformKind::noise: {
            Rng rng(t.seed);
            Tensor out = image.detach();
            double* ov = out.data();
            for (std::int64_t i = 0; i < out.numel(); ++i)
                ov[i] = clamp01(ov[i] + rng.normal(0.0, t.noise_std));
            return out;
        }
    }
    throw ContractError("apply_transform: unknown transform kind");
}

std::vector<Transform> transform_pool(std::int64_t channels) {
    std::vector<Transform> pool;
    pool.push_back({TransformKind::identity, 0, 1.0, 0.05, 0});
    if (channels >= 3)
        for (int c = 0; c < 3; ++c) pool.push_back({TransformKind::zero_channel, c, 1.0, 0.05, 0});
    pool.push_back({TransformKind::swap_patches, 0, 1.0, 0.05, 0});
    pool.push_back({TransformKind::blur, 0, 1.0, 0.05, 0});
    pool.push_back({TransformKind::noise, 0, 1.0, 0.05, 0});
    return pool;
}

// ---------------------------------------------------------------------------
// Rotation
// ---------------------------------------------------------------------------

RotationAxis rotation_axis_from_string(const std::string& s) {
    if (s == "x") return RotationAxis::x;
    if (s == "y") return RotationAxis::y;
    if (s == "z") return RotationAxis::z;
    if (s == "all") return RotationAxis::all;
    throw ConfigError("unknown rotation axis '" + s + "' (expected x, y, z or all)");
}

std::string rotation_axis_name(RotationAxis axis) {
    switch (axis) {
        case RotationAxis::x: return "x";
        case RotationAxis::y: return "y";
        case RotationAxis::z: return "z";
        case RotationAxis::all: return "all";
    }
    return "?";
}

namespace {

struct Mat3 {
    double m[3][3];
};

Mat3 mat_mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += a.m[i][k] * b.m[k][j];
            r.m[i][j] = acc;
        }
    return r;
}

Mat3 transpose(const Mat3& a) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.m[i][j] = a.m[j][i];
    return r;
}

void exact_trig(int angle_deg, double& c, double& s) {
    int a = angle_deg % 360;
    if (a < 0) a += 360;
    if (a % 90 == 0) {
        static const double cs[4] = {1.0, 0.0, -1.0, 0.0};
        static const double sn[4] = {0.0, 1.0, 0.0, -1.0};
        c = cs[a / 90];
        s = sn[a / 90];
    } else {
        const double rad = static_cast<double>(angle_deg) * 3.14159265358979323846 / 180.0;
        c = std::cos(rad);
        s = std::sin(rad);
    }
}

// Coordinates ordered (z, y, x) matching the volume layout. Rotation "about
// x" turns the (z, y) plane, etc.
Mat3 axis_rotation(int angle_deg, int fixed_axis /*0=z,1=y,2=x*/) {
    double c, s;
    exact_trig(angle_deg, c, s);
    Mat3 r{};
    for (int i = 0; i < 3; ++i) r.m[i][i] = 1.0;
    const int a = fixed_axis == 0 ? 1 : 0;
    const int b = fixed_axis == 2 ? 1 : 2;
    r.m[a][a] = c;
    r.m[a][b] = -s;
    r.m[b][a] = s;
    r.m[b][b] = c;
    return r;
}

Mat3 rotation_matrix(int angle_deg, RotationAxis axis) {
    switch (axis) {
        case RotationAxis::x: return axis_rotation(angle_deg, 2);
        case RotationAxis::y: return axis_rotation(angle_deg, 1);
        case RotationAxis::z: return axis_rotation(angle_deg, 0);
        case RotationAxis::all:
            // same angle about x, then y, then z
            return mat_mul(axis_rotation(angle_deg, 0),
                           mat_mul(axis_rotation(angle_deg, 1), axis_rotation(angle_deg, 2)));
    }
    throw ContractError("rotation_matrix: bad axis");
}

template <typename Sampler>
void resample_volume(const Shape& spatial, const Mat3& to_source, Sampler&& sample) {
    const double cz = static_cast<double>(spatial[0] - 1) / 2.0;
    const double cy = static_cast<double>(spatial[1] - 1) / 2.0;
    const double cx = static_cast<double>(spatial[2] - 1) / 2.0;
    for (std::int64_t z = 0; z < spatial[0]; ++z)
        for (std::int64_t y = 0; y < spatial[1]; ++y)
            for (std::int64_t x = 0; x < spatial[2]; ++x) {
                const double dz = static_cast<double>(z) - cz;
                const double dy = static_cast<double>(y) - cy;
                const double dx = static_cast<double>(x) - cx;
                const double sz = to_source.m[0][0] * dz + to_source.m[0][1] * dy +
                                  to_source.m[0][2] * dx + cz;
                const double sy = to_source.m[1][0] * dz + to_source.m[1][1] * dy +
                                  to_source.m[1][2] * dx + cy;
                const double sx = to_source.m[2][0] * dz + to_source.m[2][1] * dy +
                                  to_source.m[2][2] * dx + cx;
                sample(z, y, x, sz, sy, sx);
            }
}

}  // namespace

Tensor rotate_image_3d(const Tensor& image, int angle_deg, RotationAxis axis, bool inverse) {
    check_shape(image.rank() == 4, "rotate_image_3d: image must be [C, Z, Y, X]");
    if (angle_deg % 360 == 0) return image.detach();
    Shape spatial(image.shape().begin() + 1, image.shape().end());
    Mat3 r = rotation_matrix(angle_deg, axis);
    Mat3 to_source = inverse ? r : transpose(r);

    const std::int64_t channels = image.extent(0);
    const std::int64_t sp_n = shape_numel(spatial);
    Tensor out = Tensor::zeros(image.shape());
    const double* iv = image.data();
    double* ov = out.data();
    resample_volume(spatial, to_source, [&](std::int64_t z, std::int64_t y, std::int64_t x,
                                            double sz, double sy, double sx) {
        const std::int64_t z0 = static_cast<std::int64_t>(std::floor(sz));
        const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
        const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
        const double fz = sz - static_cast<double>(z0);
        const double fy = sy - static_cast<double>(y0);
        const double fx = sx - static_cast<double>(x0);
        for (std::int64_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (int oz = 0; oz < 2; ++oz)
                for (int oy = 0; oy < 2; ++oy)
                    for (int ox = 0; ox < 2; ++ox) {
                        const double w = (oz ? fz : 1.0 - fz) * (oy ? fy : 1.0 - fy) *
                                         (ox ? fx : 1.0 - fx);
                        if (w == 0.0) continue;
                        const std::int64_t zz = z0 + oz, yy = y0 + oy, xx = x0 + ox;
                        if (zz < 0 || zz >= spatial[0] || yy < 0 || yy >= spatial[1] || xx < 0 ||
                            xx >= spatial[2])
                            continue;
                        acc += w * iv[c * sp_n + (zz * spatial[1] + yy) * spatial[2] + xx];
                    }
            ov[c * sp_n + (z * spatial[1] + y) * spatial[2] + x] = acc;
        }
    });
    return out;
}

LabelMap rotate_labels_3d(const LabelMap& labels, int angle_deg, RotationAxis axis,
                          bool inverse) {
    check_shape(labels.shape.size() == 3, "rotate_labels_3d: labels must be [Z, Y, X]");
    if (angle_deg % 360 == 0) return labels;
    Mat3 r = rotation_matrix(angle_deg, axis);
    Mat3 to_source = inverse ? r : transpose(r);

    LabelMap out = all_background(labels.shape);
    resample_volume(labels.shape, to_source, [&](std::int64_t z, std::int64_t y, std::int64_t x,
                                                 double sz, double sy, double sx) {
        const std::int64_t zz = static_cast<std::int64_t>(std::floor(sz + 0.5));
        const std::int64_t yy = static_cast<std::int64_t>(std::floor(sy + 0.5));
        const std::int64_t xx = static_cast<std::int64_t>(std::floor(sx + 0.5));
        if (zz < 0 || zz >= labels.shape[0] || yy < 0 || yy >= labels.shape[1] || xx < 0 ||
            xx >= labels.shape[2])
            return;
        out.labels[static_cast<size_t>((z * labels.shape[1] + y) * labels.shape[2] + x)] =
            labels.labels[static_cast<size_t>((zz * labels.shape[1] + yy) * labels.shape[2] + xx)];
    });
    return out;
}

SegSample rotate_volume(const SegSample& sample, int angle_deg, RotationAxis axis) {
    return SegSample{rotate_image_3d(sample.image, angle_deg, axis, false),
                     rotate_labels_3d(sample.mask, angle_deg, axis, false)};
}

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kVolumeMagic[4] = {'C', 'P', 'S', 'V'};
constexpr std::uint32_t kVolumeVersion = 1;

void put_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32le(out, bits);
}

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open '" + path + "'", 0);
        std::ostringstream ss;
        ss << in.rdbuf();
        bytes_ = ss.str();
    }

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[offset_++]);
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[offset_ + i])) << (8 * i);
        offset_ += 4;
        return v;
    }

    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }

    void raw(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, bytes_.data() + offset_, n);
        offset_ += n;
    }

    void expect_magic(const char magic[4]) {
        need(4);
        if (std::memcmp(bytes_.data() + offset_, magic, 4) != 0)
            throw FormatError("bad magic in '" + path_ + "'", offset_);
        offset_ += 4;
    }

    void expect_end() {
        if (offset_ != bytes_.size())
            throw FormatError("trailing bytes in '" + path_ + "'", offset_);
    }

    std::uint64_t offset() const { return offset_; }

private:
    void need(size_t n) {
        if (offset_ + n > bytes_.size())
            throw FormatError("truncated file '" + path_ + "'", offset_);
    }

    std::string path_;
    std::string bytes_;
    std::uint64_t offset_ = 0;
};

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing", 0);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to '" + path + "'", 0);
}

std::string volume_header(std::uint8_t dtype, const Shape& shape) {
    std::string out;
    out.append(kVolumeMagic, 4);
    put_u32le(out, kVolumeVersion);
    out.push_back(static_cast<char>(dtype));
    out.push_back(static_cast<char>(shape.size()));
    for (auto e : shape) put_u32le(out, static_cast<std::uint32_t>(e));
    return out;
}

}  // namespace

void save_volume_f32(const std::string& path, const Tensor& tensor) {
    std::string out = volume_header(0, tensor.shape());
    const double* v = tensor.data();
    for (std::int64_t i = 0; i < tensor.numel(); ++i)
        put_f32le(out, static_cast<float>(v[i]));
    write_file(path, out);
}

Tensor load_volume_f32(const std::string& path) {
    Reader r(path);
    r.expect_magic(kVolumeMagic);
    const std::uint32_t version = r.u32();
    if (version != kVolumeVersion)
        throw FormatError("unsupported volume version " + std::to_string(version), r.offset() - 4);
    const std::uint8_t dtype = r.u8();
    if (dtype != 0) throw FormatError("expected f32 volume, dtype code " + std::to_string(dtype),
                                      r.offset() - 1);
    const std::uint8_t rank = r.u8();
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.u32()));
    Tensor t = Tensor::zeros(shape);
    double* v = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) v[i] = static_cast<double>(r.f32());
    r.expect_end();
    return t;
}

void save_labels_u8(const std::string& path, const LabelMap& labels) {
    std::string out = volume_header(1, labels.shape);
    out.append(reinterpret_cast<const char*>(labels.labels.data()), labels.labels.size());
    write_file(path, out);
}

LabelMap load_labels_u8(const std::string& path) {
    Reader r(path);
    r.expect_magic(kVolumeMagic);
    const std::uint32_t version = r.u32();
    if (version != kVolumeVersion)
        throw FormatError("unsupported volume version " + std::to_string(version), r.offset() - 4);
    const std::uint8_t dtype = r.u8();
    if (dtype != 1) throw FormatError("expected u8 labels, dtype code " + std::to_string(dtype),
                                      r.offset() - 1);
    const std::uint8_t rank = r.u8();
    LabelMap out;
    for (int i = 0; i < rank; ++i) out.shape.push_back(static_cast<std::int64_t>(r.u32()));
    out.labels.resize(static_cast<size_t>(out.numel()));
    r.raw(out.labels.data(), out.labels.size());
    r.expect_end();
    return out;
}

void save_dataset(const SegDataset& dataset, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::string manifest;
    char name[64];
    for (size_t i = 0; i < dataset.samples.size(); ++i) {
        std::snprintf(name, sizeof name, "image_%04zu.cpsv", i);
        const std::string image_name = name;
        std::snprintf(name, sizeof name, "mask_%04zu.cpsv", i);
        const std::string mask_name = name;
        save_volume_f32(dir + "/" + image_name, dataset.samples[i].image);
        save_labels_u8(dir + "/" + mask_name, dataset.samples[i].mask);
        manifest += image_name + "\t" + mask_name + "\n";
    }
    std::ofstream m(dir + "/manifest.txt", std::ios::trunc);
    if (!m) throw FormatError("cannot write manifest in '" + dir + "'", 0);
    m << manifest;
}

SegDataset load_dataset(const std::string& dir) {
    std::ifstream m(dir + "/manifest.txt");
    if (!m) throw FormatError("cannot open manifest in '" + dir + "'", 0);
    SegDataset ds;
    std::string line;
    int max_label = 0;
    while (std::getline(m, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw FormatError("manifest line missing tab separator: '" + line + "'", 0);
        SegSample sample;
        sample.image = load_volume_f32(dir + "/" + line.substr(0, tab));
        sample.mask = load_labels_u8(dir + "/" + line.substr(tab + 1));
        {
            Shape spatial(sample.image.shape().begin() + 1, sample.image.shape().end());
            check_shape(sample.mask.shape == spatial,
                        "dataset: image/mask extent mismatch in '" + line + "'");
        }
        for (auto l : sample.mask.labels) max_label = std::max(max_label, static_cast<int>(l));
        ds.samples.push_back(std::move(sample));
    }
    check_contract(!ds.samples.empty(), "dataset: manifest lists no samples");
    ds.spatial_rank = ds.samples[0].image.rank() - 1;
    ds.classes = std::max(2, max_label + 1);
    return ds;
}

}  // namespace capseg
