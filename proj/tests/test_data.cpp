#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "capseg/data.hpp"
#include "capseg/metrics.hpp"
#include "test_utils.hpp"

using namespace capseg;

namespace {

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double foreground_fraction(const SegDataset& ds) {
    std::int64_t fg = 0, total = 0;
    for (const auto& s : ds.samples) {
        for (auto l : s.mask.labels) fg += l > 0 ? 1 : 0;
        total += s.mask.numel();
    }
    return static_cast<double>(fg) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("gen_shapes_2d: determinism, label range, foreground fraction") {
    SegDataset a = gen_shapes_2d(123, 20, 32, 2);
    SegDataset b = gen_shapes_2d(123, 20, 32, 2);
    REQUIRE(a.samples.size() == 20);
    for (size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].image.to_vec() == b.samples[i].image.to_vec());
        CHECK(a.samples[i].mask.labels == b.samples[i].mask.labels);
    }

    SegDataset c = gen_shapes_2d(7, 50, 32, 3);
    for (const auto& s : c.samples) {
        for (auto l : s.mask.labels) CHECK(l < 3);
        for (std::int64_t i = 0; i < s.image.numel(); ++i) {
            CHECK(s.image.data()[i] >= 0.0);
            CHECK(s.image.data()[i] <= 1.0);
        }
    }

    // mean foreground fraction over many samples stays in a sane band
    SegDataset big = gen_shapes_2d(99, 1000, 32, 2);
    const double frac = foreground_fraction(big);
    CHECK(frac > 0.05);
    CHECK(frac < 0.5);

    CHECK_THROWS_AS(gen_shapes_2d(1, 5, 8, 2), ShapeError);
    CHECK_THROWS_AS(gen_shapes_2d(1, 5, 32, 4), ContractError);
}

TEST_CASE("gen_blobs_3d: determinism, labels, sphere volume") {
    SegDataset a = gen_blobs_3d(5, 4, 16, 2);
    SegDataset b = gen_blobs_3d(5, 4, 16, 2);
    for (size_t i = 0; i < a.samples.size(); ++i)
        CHECK(a.samples[i].image.to_vec() == b.samples[i].image.to_vec());
    for (const auto& s : a.samples)
        for (auto l : s.mask.labels) CHECK(l < 2);

    // rasterized sphere voxel count vs (4/3) pi r^3
    for (double r : {4.0, 5.0, 6.0}) {
        const std::int64_t count = sphere_voxel_count(16, {7.5, 7.5, 7.5}, r);
        const double analytic = 4.0 / 3.0 * 3.14159265358979323846 * r * r * r;
        CHECK(std::abs(static_cast<double>(count) - analytic) / analytic < 0.10);
    }
}

TEST_CASE("apply_transform: identity, zero_channel, swap involution, blur, noise") {
    Tensor rgb = Tensor::uniform({3, 16, 16}, 11, 0.0, 1.0);
    Tensor gray = Tensor::uniform({1, 16, 16}, 12, 0.0, 1.0);

    Transform ident;
    CHECK(apply_transform(rgb, ident).to_vec() == rgb.to_vec());

    Transform zr{TransformKind::zero_channel, 0, 1.0, 0.05, 0};
    Tensor zred = apply_transform(rgb, zr);
    double red_sum = 0.0;
    for (std::int64_t i = 0; i < 16 * 16; ++i) red_sum += zred.data()[i];
    CHECK(red_sum == 0.0);
    CHECK(zred.shape() == rgb.shape());
    CHECK_THROWS_AS(apply_transform(gray, zr), UnsupportedError);

    Transform sw{TransformKind::swap_patches, 0, 1.0, 0.05, 42};
    Tensor once = apply_transform(gray, sw);
    CHECK(once.to_vec() != gray.to_vec());
    Tensor twice = apply_transform(once, sw);
    CHECK(twice.to_vec() == gray.to_vec());  // same pairing swaps back

    Transform bl{TransformKind::blur, 0, 1.0, 0.05, 0};
    Tensor blurred = apply_transform(gray, bl);
    CHECK(blurred.shape() == gray.shape());
    CHECK(blurred.to_vec() != gray.to_vec());

    Transform nz{TransformKind::noise, 0, 1.0, 0.05, 7};
    Tensor noisy1 = apply_transform(gray, nz);
    Tensor noisy2 = apply_transform(gray, nz);
    CHECK(noisy1.to_vec() == noisy2.to_vec());
    for (std::int64_t i = 0; i < noisy1.numel(); ++i) {
        CHECK(noisy1.data()[i] >= 0.0);
        CHECK(noisy1.data()[i] <= 1.0);
    }

    CHECK(transform_pool(3).size() == 7);
    CHECK(transform_pool(1).size() == 4);
}

TEST_CASE("rotate_volume: identity at 0, exact permutation at 90 degrees") {
    SegDataset ds = gen_blobs_3d(21, 1, 16, 2);
    const SegSample& s = ds.samples[0];

    SegSample r0 = rotate_volume(s, 0, RotationAxis::z);
    CHECK(r0.image.to_vec() == s.image.to_vec());
    CHECK(r0.mask.labels == s.mask.labels);

    for (auto axis : {RotationAxis::x, RotationAxis::y, RotationAxis::z, RotationAxis::all}) {
        SegSample r90 = rotate_volume(s, 90, axis);
        std::int64_t before = 0, after = 0;
        for (auto l : s.mask.labels) before += l > 0;
        for (auto l : r90.mask.labels) after += l > 0;
        CHECK(before == after);  // right angles permute voxels exactly

        // inverse rotation restores the mask exactly at right angles
        LabelMap back = rotate_labels_3d(r90.mask, 90, axis, /*inverse=*/true);
        CHECK(back.labels == s.mask.labels);
        Tensor img_back = rotate_image_3d(r90.image, 90, axis, true);
        CHECK(img_back.to_vec() == s.image.to_vec());
    }

    // rotating mask and prediction jointly leaves dice unchanged
    SegDataset two = gen_blobs_3d(22, 2, 16, 2);
    const LabelMap& pred = two.samples[1].mask;
    SegMetrics base = seg_metrics(pred, s.mask, 2);
    LabelMap pred_rot = rotate_labels_3d(pred, 90, RotationAxis::z, false);
    LabelMap mask_rot = rotate_labels_3d(s.mask, 90, RotationAxis::z, false);
    SegMetrics rot = seg_metrics(pred_rot, mask_rot, 2);
    CHECK(base.mean_dice == doctest::Approx(rot.mean_dice).epsilon(1e-12));
}

TEST_CASE("dataset io: bitwise round trip, manifest order, corrupt files") {
    const std::string dir = "/tmp/capseg_test_ds";
    std::filesystem::remove_all(dir);
    SegDataset ds = gen_shapes_2d(31, 3, 32, 2);
    save_dataset(ds, dir);

    SegDataset loaded = load_dataset(dir);
    REQUIRE(loaded.samples.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        // images were quantized to f32 at generation, so the round trip is lossless
        CHECK(loaded.samples[i].image.to_vec() == ds.samples[i].image.to_vec());
        CHECK(loaded.samples[i].mask.labels == ds.samples[i].mask.labels);
    }

    // save -> load -> save produces identical bytes
    const std::string dir2 = "/tmp/capseg_test_ds2";
    std::filesystem::remove_all(dir2);
    save_dataset(loaded, dir2);
    for (const auto& name : {"manifest.txt", "image_0001.cpsv", "mask_0002.cpsv"})
        CHECK(read_bytes(dir + "/" + std::string(name)) ==
              read_bytes(dir2 + "/" + std::string(name)));

    // truncation and corruption produce format errors, not crashes
    {
        std::string bytes = read_bytes(dir + "/image_0000.cpsv");
        std::ofstream out(dir + "/image_0000.cpsv", std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_volume_f32(dir + "/image_0000.cpsv"), FormatError);
    {
        std::ofstream out(dir + "/mask_0000.cpsv", std::ios::binary | std::ios::trunc);
        out << "NOTAVOLUME";
    }
    CHECK_THROWS_AS(load_labels_u8(dir + "/mask_0000.cpsv"), FormatError);
    try {
        load_labels_u8(dir + "/mask_0000.cpsv");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
}
