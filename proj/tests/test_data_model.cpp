#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pcda/volume.hpp"

using namespace pcda;
namespace fs = std::filesystem;

namespace {

Volume random_volume(int nx, int ny, int nz, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(-3.0f, 7.0f);
    Volume v;
    v.voxels = Grid3<float>(nx, ny, nz);
    for (auto& x : v.voxels.values) {
        x = d(rng);
    }
    return v;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("pcda_dm_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("NIfTI round trip is bit-exact, compressed or not") {
    const fs::path dir = scratch_dir("nifti");
    Volume v = random_volume(32, 32, 16, 1);
    v.spacing = {1.0, 1.0, 3.0};
    for (const char* name : {"v.nii", "v.nii.gz"}) {
        save_volume(dir / name, v);
        const Volume back = load_volume(dir / name);
        CHECK(back.voxels == v.voxels);
        CHECK(back.spacing == v.spacing);
    }
    fs::remove_all(dir);
}

TEST_CASE("spacing is read from the header") {
    const fs::path dir = scratch_dir("spacing");
    Volume v = random_volume(4, 5, 6, 2);
    v.spacing = {1.04, 1.04, 0.56};
    save_volume(dir / "s.nii.gz", v);
    const Volume back = load_volume(dir / "s.nii.gz");
    // pixdim is float32 on disk; it is read back as the shortest decimal
    CHECK(back.spacing == Spacing{1.04, 1.04, 0.56});
    fs::remove_all(dir);
}

TEST_CASE("loading rejects non-finite voxels, missing files and garbage") {
    const fs::path dir = scratch_dir("errors");
    Volume v = random_volume(4, 4, 2, 3);
    v.voxels.values[7] = std::nanf("");
    save_volume(dir / "nan.nii", v);
    CHECK_THROWS_AS(load_volume(dir / "nan.nii"), ValidationError);
    CHECK_THROWS_AS(load_volume(dir / "missing.nii"), IoError);
    std::ofstream(dir / "junk.nii") << "this is not a nifti header";
    CHECK_THROWS_AS(load_volume(dir / "junk.nii"), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("mask round trip and binary check") {
    const fs::path dir = scratch_dir("mask");
    Mask3D m(6, 5, 3);
    m.at(1, 2, 0) = 1;
    m.at(5, 4, 2) = 1;
    save_mask(dir / "m.nii.gz", m, {1, 1, 3});
    CHECK(load_mask(dir / "m.nii.gz") == m);
    Volume v = random_volume(2, 2, 1, 4);
    save_volume(dir / "notbinary.nii", v);
    CHECK_THROWS_AS(load_mask(dir / "notbinary.nii"), ValidationError);
    fs::remove_all(dir);
}

TEST_CASE("identity slicing keeps every slice") {
    const Volume v = random_volume(256, 256, 10, 5);
    const auto slices = extract_slices(v, {256, 256});
    REQUIRE(slices.size() == 10);
    for (int z = 0; z < 10; ++z) {
        CHECK(slices[z].ny == 256);
        CHECK(slices[z].at(17, 200) == v.voxels.at(200, 17, z));
    }
}

TEST_CASE("oversized slices are center cropped") {
    const Volume v = random_volume(300, 300, 5, 6);
    const auto slices = extract_slices(v, {256, 256});
    REQUIRE(slices.size() == 5);
    // (300 - 256) / 2 = 22 rows and columns dropped on the low side
    for (int z = 0; z < 5; ++z) {
        for (int y = 0; y < 256; y += 15) {
            for (int x = 0; x < 256; x += 13) {
                REQUIRE(slices[z].at(y, x) == v.voxels.at(x + 22, y + 22, z));
            }
        }
    }
}

TEST_CASE("undersized slices are zero padded symmetrically") {
    const Volume v = random_volume(200, 200, 5, 7);
    const auto slices = extract_slices(v, {256, 256});
    REQUIRE(slices.size() == 5);
    for (int z = 0; z < 5; ++z) {
        for (int y = 0; y < 256; ++y) {
            for (int x = 0; x < 256; ++x) {
                const bool inside = y >= 28 && y < 228 && x >= 28 && x < 228;
                const float expected = inside ? v.voxels.at(x - 28, y - 28, z) : 0.0f;
                REQUIRE(slices[z].at(y, x) == expected);
            }
        }
    }
}

TEST_CASE("assembly inverts slicing") {
    const Volume v = random_volume(40, 30, 4, 8);
    CHECK(assemble_volume(extract_slices(v, {30, 40}), v).voxels == v.voxels);

    // cropped: the retained window matches and the rest is zero
    const Volume big = random_volume(40, 40, 3, 9);
    const Volume back = assemble_volume(extract_slices(big, {20, 20}), big);
    CHECK(back.voxels.at(10, 10, 1) == big.voxels.at(10, 10, 1));
    CHECK(back.voxels.at(29, 29, 2) == big.voxels.at(29, 29, 2));
    CHECK(back.voxels.at(5, 5, 0) == 0.0f);

    std::vector<Image2D> three(3, Image2D(4, 4));
    const Volume four = random_volume(4, 4, 4, 10);
    CHECK_THROWS_AS(assemble_volume(three, four), ShapeError);

    Volume empty;
    empty.voxels = Grid3<float>(4, 4, 0);
    CHECK(assemble_volume({}, empty).voxels.size() == 0);
    CHECK_THROWS_AS(extract_slices(v, {0, 4}), ShapeError);
}

TEST_CASE("intensity normalization over nonzero voxels") {
    Volume c;
    c.voxels = Grid3<float>(4, 4, 2, 5.0f);
    for (float x : normalize_intensity(c).voxels.values) {
        CHECK(x == 0.0f);
    }

    Volume v = random_volume(20, 20, 4, 11);
    for (std::size_t i = 0; i < v.voxels.size(); i += 3) {
        v.voxels.values[i] = 0.0f;
    }
    const Volume n = normalize_intensity(v);
    double sum = 0.0;
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n.voxels.size(); ++i) {
        if (v.voxels.values[i] == 0.0f) {
            REQUIRE(n.voxels.values[i] == 0.0f);
            continue;
        }
        sum += n.voxels.values[i];
        sq += static_cast<double>(n.voxels.values[i]) * n.voxels.values[i];
        ++count;
    }
    const double mean = sum / count;
    CHECK(std::fabs(mean) < 1e-6);
    CHECK(std::fabs(std::sqrt(sq / count - mean * mean) - 1.0) < 1e-6);
}

TEST_CASE("manifest round trip, partition and validation") {
    const fs::path dir = scratch_dir("manifest");
    Manifest m;
    m.name = "toy";
    const Split splits[] = {Split::train, Split::train, Split::val, Split::test, Split::test};
    for (int i = 0; i < 5; ++i) {
        ManifestEntry e;
        e.subject_id = "s" + std::to_string(i);
        e.split = splits[i];
        e.volumes.push_back({"s" + std::to_string(i) + ".nii", 0});
        e.mask = fs::path("s" + std::to_string(i) + "_mask.nii");
        e.age_years = 50.0 + i;
        Volume v = random_volume(4, 4, 2, 20 + i);
        save_volume(dir / e.volumes[0].path, v);
        save_mask(dir / *e.mask, Mask3D(4, 4, 2), v.spacing);
        m.entries.push_back(e);
    }
    save_manifest(dir / "m.json", m);
    const Manifest back = load_manifest(dir / "m.json");
    CHECK(back.counts() == std::array<int, 3>{2, 1, 2});
    std::size_t total = 0;
    for (Split s : {Split::train, Split::val, Split::test}) {
        total += back.split(s).size();
    }
    CHECK(total == back.entries.size());
    CHECK(back.entries[3].age_years == 53.0);
    const LabeledSample s = load_labeled(back, back.entries[1]);
    CHECK(s.mask.same_shape(s.image.voxels));

    Manifest dup = back;
    dup.entries[1].subject_id = "s0";
    CHECK_THROWS_AS(dup.validate(false), ValidationError);
    Manifest missing = back;
    missing.entries[0].volumes[0].path = "nowhere.nii";
    CHECK_THROWS_AS(missing.validate(true), IoError);
    CHECK_THROWS_AS(split_from_string("holdout"), ValidationError);
    fs::remove_all(dir);
}

TEST_CASE("pair invariants") {
    PairedSample p;
    p.image_a = random_volume(4, 4, 2, 1);
    p.image_b = random_volume(4, 4, 2, 2);
    p.image_a.subject_id = p.image_b.subject_id = "x";
    p.image_a.domain_id = 1;
    p.image_b.domain_id = 2;
    CHECK_NOTHROW(p.validate());
    p.image_b.domain_id = 1;
    CHECK_THROWS_AS(p.validate(), ValidationError);
    p.image_b = random_volume(4, 4, 3, 2);
    p.image_b.subject_id = "x";
    p.image_b.domain_id = 2;
    CHECK_THROWS_AS(p.validate(), ValidationError);
}
