#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capseg/labels.hpp"
#include "capseg/tensor.hpp"

namespace capseg {

// One segmentation example: image [channels, spatial...] with intensities in
// [0,1] (quantized to f32 so disk round trips are bit exact), integer mask.
struct SegSample {
    Tensor image;
    LabelMap mask;
};

struct SegDataset {
    std::vector<SegSample> samples;
    int classes = 2;
    int spatial_rank = 2;
};

// Noisy background plus 1-3 bright circles/rectangles per sample. With
// classes == 3, circles are class 1 and rectangles class 2; with classes == 2
// every shape is class 1.
SegDataset gen_shapes_2d(std::uint64_t seed, int count, std::int64_t size, int classes);

// Volumetric analog with spheres/cuboids.
SegDataset gen_blobs_3d(std::uint64_t seed, int count, std::int64_t size, int classes);

// Rasterization helpers shared with the generators (tests verify the sphere
// voxel count against the analytic volume).
void raster_sphere(LabelMap& mask, Tensor& image, const std::vector<double>& center, double r,
                   std::uint8_t label, double intensity, Rng& noise);
std::int64_t sphere_voxel_count(std::int64_t size, const std::vector<double>& center, double r);

// ---------------------------------------------------------------------------
// Input transformations for the pretext task
// ---------------------------------------------------------------------------

enum class TransformKind : std::uint8_t {
    identity,
    zero_channel,
    swap_patches,
    blur,
    noise,
};

struct Transform {
    TransformKind kind = TransformKind::identity;
    int channel = 0;          // zero_channel: 0=R, 1=G, 2=B
    double blur_sigma = 1.0;  // blur: kernel radius ceil(2 sigma), truncated
    double noise_std = 0.05;
    std::uint64_t seed = 0;   // swap_patches and noise draws
};

Tensor apply_transform(const Tensor& image, const Transform& t);

// The transform pool: identity plus zero-R/G/B (when the data has >= 3
// channels), swap, blur, noise. Single-channel data drops the zero-channel
// entries and the sampler renormalizes over what remains.
std::vector<Transform> transform_pool(std::int64_t channels);

// ---------------------------------------------------------------------------
// Volume rotation
// ---------------------------------------------------------------------------

enum class RotationAxis : std::uint8_t { x, y, z, all };

RotationAxis rotation_axis_from_string(const std::string& s);
std::string rotation_axis_name(RotationAxis axis);

// Rotates image (trilinear) and mask (nearest neighbor) about the volume
// center; out-of-bounds reads fill with 0. Multiples of 90 degrees use exact
// trig values, so they are exact voxel permutations. `axis == all` applies
// the angle about x, then y, then z.
SegSample rotate_volume(const SegSample& sample, int angle_deg, RotationAxis axis);

Tensor rotate_image_3d(const Tensor& image, int angle_deg, RotationAxis axis, bool inverse);
LabelMap rotate_labels_3d(const LabelMap& labels, int angle_deg, RotationAxis axis, bool inverse);

// ---------------------------------------------------------------------------
// Bit-exact dataset I/O
// ---------------------------------------------------------------------------

// Volume file: magic "CPSV", version u32 LE, dtype u8 (0 = f32, 1 = u8),
// rank u8, extents u32 x rank LE, raw row-major little-endian elements.
void save_volume_f32(const std::string& path, const Tensor& tensor);
Tensor load_volume_f32(const std::string& path);
void save_labels_u8(const std::string& path, const LabelMap& labels);
LabelMap load_labels_u8(const std::string& path);

// Dataset directory: numbered volume files plus manifest.txt with one
// "image_path<TAB>mask_path" line per sample, in order.
void save_dataset(const SegDataset& dataset, const std::string& dir);
SegDataset load_dataset(const std::string& dir);

}  // namespace capseg
