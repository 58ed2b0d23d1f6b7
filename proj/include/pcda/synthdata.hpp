#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include <json.hpp>

#include "pcda/volume.hpp"

namespace pcda {

/// Appearance of one rendered domain. Intensities are built from a tissue map
/// (~1 inside the head, darker ventricles) plus `lesion_contrast` on lesion voxels.
struct AppearanceParams {
    double lesion_contrast = 1.0;
    double texture_gain = 1.0;     ///< multiplies the smooth tissue texture
    double through_plane_blur = 0.0;  ///< Gaussian sigma along z, in voxels
    double gamma = 1.0;            ///< I -> I^gamma on foreground
    double gain = 1.0;             ///< linear contrast
    double offset = 0.0;
    double noise_sigma = 0.0;
    /// Coefficient range of a smooth multiplicative field exp(cubic polynomial)
    /// over normalized volume coordinates, drawn per rendered volume.
    double inhomogeneity = 0.0;
};

struct SynthConfig {
    std::uint64_t seed = 7;
    int n_source_subjects = 30;
    int n_target_subjects = 24;
    int nx = 64;
    int ny = 64;
    int nz = 16;
    Spacing spacing{1.0, 1.0, 3.0};
    int lesion_count_min = 2;
    int lesion_count_max = 8;
    double lesion_radius_min = 1.0;  ///< in-plane, voxels
    double lesion_radius_max = 3.0;
    double lesion_z_ratio = 0.5;     ///< through-plane radius per in-plane radius (voxels)
    double lesion_load_at_60 = 0.004;  ///< lesion volume / TIV at age 60
    double lesion_load_sigma = 0.05;   ///< log-normal spread of the planted load
    double age_min = 45.0;
    double age_max = 75.0;
    double fold_per_decade = 1.4;
    double texture_amplitude = 0.12;
    AppearanceParams source{1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.03, 0.3};
    AppearanceParams target_a{0.8, 1.0, 0.8, 0.7, 1.0, 0.0, 0.05, 0.3};
    AppearanceParams target_b{0.7, 2.5, 0.0, 1.0, 0.8, 0.3, 0.1, 0.3};

    /// Throws ConfigError on non-positive shapes/counts/fold or inverted ranges.
    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static SynthConfig from_json(const nlohmann::json& j);
};

/// Split sizes scaled from `full` (e.g. 40:10:10) to n subjects; val and test
/// are rounded, the remainder goes to train.
std::array<int, 3> scaled_splits(int n, std::array<int, 3> full);

/// One subject's latent anatomy shared by every appearance.
struct SynthSubject {
    std::string subject_id;
    double age_years = 0.0;
    double tiv_mm3 = 0.0;
    double planted_lesion_mm3 = 0.0;
    Grid3<float> tissue;     ///< base intensity: 1 in parenchyma, darker in ventricles, 0 outside
    Grid3<float> texture;    ///< smooth zero-mean texture, scaled by the appearance gain
    Mask3D foreground;
    Mask3D lesions;
};

SynthSubject generate_subject(const SynthConfig& cfg, const std::string& subject_id,
                              std::uint64_t seed);

/// Renders an appearance; background stays exactly 0.
Volume render_appearance(const SynthSubject& s, const AppearanceParams& p, const Spacing& spacing,
                         std::uint64_t noise_seed);

struct SynthDataset {
    std::filesystem::path source_manifest;
    std::filesystem::path target_manifest;
    Manifest source;
    Manifest target;
};

/// Writes source (image + mask, domain 0) and target pairs (a: domain 1,
/// b: domain 2, plus the shared latent mask) under `out_dir`, with
/// source_manifest.json, target_manifest.json and synth_config.json.
SynthDataset generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// Ground-truth lesion mask stored for a generated subject.
Mask3D oracle_segment(const Manifest& m, const ManifestEntry& e);

} // namespace pcda
