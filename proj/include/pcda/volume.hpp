#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcda/errors.hpp"

namespace pcda {

/// Row-major 2D array: pixel (y, x) is values[y * nx + x].
template <typename T>
struct Grid2 {
    int ny = 0;
    int nx = 0;
    std::vector<T> values;

    Grid2() = default;
    Grid2(int ny_, int nx_, T fill = T{})
        : ny(ny_), nx(nx_), values(static_cast<std::size_t>(ny_) * nx_, fill) {}

    T& at(int y, int x) { return values[static_cast<std::size_t>(y) * nx + x]; }
    [[nodiscard]] const T& at(int y, int x) const {
        return values[static_cast<std::size_t>(y) * nx + x];
    }
    [[nodiscard]] std::size_t size() const { return values.size(); }
    bool operator==(const Grid2&) const = default;
};

/// 3D array in NIfTI order: voxel (x, y, z) is values[(z * ny + y) * nx + x].
/// Axial slice z is the contiguous block of nx * ny values.
template <typename T>
struct Grid3 {
    int nx = 0;
    int ny = 0;
    int nz = 0;
    std::vector<T> values;

    Grid3() = default;
    Grid3(int nx_, int ny_, int nz_, T fill = T{})
        : nx(nx_), ny(ny_), nz(nz_),
          values(static_cast<std::size_t>(nx_) * ny_ * nz_, fill) {}

    T& at(int x, int y, int z) {
        return values[(static_cast<std::size_t>(z) * ny + y) * nx + x];
    }
    [[nodiscard]] const T& at(int x, int y, int z) const {
        return values[(static_cast<std::size_t>(z) * ny + y) * nx + x];
    }
    [[nodiscard]] std::size_t size() const { return values.size(); }
    [[nodiscard]] bool same_shape(const auto& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz;
    }
    bool operator==(const Grid3&) const = default;
};

using Image2D = Grid2<float>;
using Mask2D = Grid2<std::uint8_t>;
using Mask3D = Grid3<std::uint8_t>;
using Spacing = std::array<double, 3>;

struct Volume {
    Grid3<float> voxels;
    Spacing spacing{1.0, 1.0, 1.0};
    int domain_id = 0;
    std::string subject_id;
    std::optional<double> age_years;
    std::optional<double> tiv_mm3;

    /// Throws ValidationError on non-finite voxels, non-positive spacing or empty extent.
    void validate() const;
    [[nodiscard]] double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }
};

struct LabeledSample {
    Volume image;
    Mask3D mask;

    void validate() const;
};

/// Two coregistered acquisitions of one subject on a common grid.
struct PairedSample {
    Volume image_a;
    Volume image_b;

    void validate() const;
};

// ---------------------------------------------------------------- NIfTI-1

/// Reads a .nii or .nii.gz file. Only pixdim[1..3] is used from the geometry.
Volume load_volume(const std::filesystem::path& path);
/// Writes float32 voxels; gzip-compressed when the path ends in ".gz".
void save_volume(const std::filesystem::path& path, const Volume& v);

/// Binary masks are stored as uint8 NIfTI; loading rejects values other than 0/1.
Mask3D load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const Mask3D& mask, const Spacing& spacing);

// ---------------------------------------------------------------- slicing

struct SliceSize {
    int ny = 0;
    int nx = 0;
};

namespace detail {

struct Span1 {
    int src = 0;  // first source index
    int dst = 0;  // first destination index
    int len = 0;
};

/// Center-aligned crop/pad mapping between an extent of `src` and one of `dst`.
inline Span1 center_span(int src, int dst) {
    Span1 s;
    s.src = src > dst ? (src - dst) / 2 : 0;
    s.dst = dst > src ? (dst - src) / 2 : 0;
    s.len = src < dst ? src : dst;
    return s;
}

} // namespace detail

/// One 2D array per axial index, center-cropped or zero-padded to `size`.
template <typename T>
std::vector<Grid2<T>> extract_slices(const Grid3<T>& grid, SliceSize size) {
    if (size.ny <= 0 || size.nx <= 0) {
        throw ShapeError("extract_slices: slice size must be positive");
    }
    const auto sx = detail::center_span(grid.nx, size.nx);
    const auto sy = detail::center_span(grid.ny, size.ny);
    std::vector<Grid2<T>> out;
    out.reserve(static_cast<std::size_t>(grid.nz));
    for (int z = 0; z < grid.nz; ++z) {
        Grid2<T> s(size.ny, size.nx);
        for (int y = 0; y < sy.len; ++y) {
            for (int x = 0; x < sx.len; ++x) {
                s.at(sy.dst + y, sx.dst + x) = grid.at(sx.src + x, sy.src + y, z);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Inverse of extract_slices onto a grid of shape `nx, ny, nz`; voxels outside
/// the slice window are zero.
template <typename T>
Grid3<T> assemble_grid(const std::vector<Grid2<T>>& slices, int nx, int ny, int nz) {
    if (static_cast<int>(slices.size()) != nz) {
        throw ShapeError("assemble_volume: " + std::to_string(slices.size()) +
                         " slices for an axial extent of " + std::to_string(nz));
    }
    Grid3<T> out(nx, ny, nz);
    for (int z = 0; z < nz; ++z) {
        const auto& s = slices[z];
        if (z > 0 && (s.ny != slices[0].ny || s.nx != slices[0].nx)) {
            throw ShapeError("assemble_volume: slices have different sizes");
        }
        const auto sx = detail::center_span(nx, s.nx);
        const auto sy = detail::center_span(ny, s.ny);
        for (int y = 0; y < sy.len; ++y) {
            for (int x = 0; x < sx.len; ++x) {
                out.at(sx.src + x, sy.src + y, z) = s.at(sy.dst + y, sx.dst + x);
            }
        }
    }
    return out;
}

std::vector<Image2D> extract_slices(const Volume& v, SliceSize size);
/// Reassembles slices onto `reference`'s grid, carrying over its metadata.
Volume assemble_volume(const std::vector<Image2D>& slices, const Volume& reference);

// ---------------------------------------------------------------- intensity

struct IntensityStats {
    double mean = 0.0;
    double stddev = 0.0;
};

/// Mean and population standard deviation over nonzero voxels.
IntensityStats foreground_stats(std::span<const float> values);

/// Maps nonzero voxels to (v - mean) / stddev; zeros stay zero. A constant
/// foreground maps to all zeros.
Volume normalize_intensity(const Volume& v);

/// Applies precomputed statistics to a slice, restricted to `foreground`.
void normalize_slice(Image2D& img, const Mask2D& foreground, const IntensityStats& stats);

Mask3D nonzero_mask(const Volume& v);

// ---------------------------------------------------------------- manifests

enum class Split { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestVolume {
    std::filesystem::path path;  // relative to the manifest directory
    int domain_id = 0;
};

struct ManifestEntry {
    std::string subject_id;
    Split split = Split::train;
    std::vector<ManifestVolume> volumes;  // one (labeled) or two (pair)
    std::optional<std::filesystem::path> mask;
    std::optional<double> age_years;
    std::optional<double> tiv_mm3;
};

/// JSON document:
///   { "version": 1, "name": str,
///     "entries": [ { "subject_id": str, "split": "train"|"val"|"test",
///                    "volumes": [ {"path": str, "domain_id": int}, ... ],
///                    "mask": str?, "age_years": real?, "tiv_mm3": real? } ] }
struct Manifest {
    std::string name;
    std::filesystem::path base_dir;
    std::vector<ManifestEntry> entries;

    [[nodiscard]] std::array<int, 3> counts() const;
    [[nodiscard]] std::vector<const ManifestEntry*> split(Split s) const;
    [[nodiscard]] std::filesystem::path resolve(const std::filesystem::path& p) const;
    /// Sorted distinct domain ids across all entries.
    [[nodiscard]] std::vector<int> domain_ids() const;
    /// Unique subjects, one split each; with `check_files`, every path must exist.
    void validate(bool check_files) const;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Manifest& m);

LabeledSample load_labeled(const Manifest& m, const ManifestEntry& e);
PairedSample load_pair(const Manifest& m, const ManifestEntry& e);

} // namespace pcda
