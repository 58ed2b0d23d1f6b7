#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "pcda/volume.hpp"

namespace pcda {

/// Sampling ranges for the geometric augmentation.
struct AffineRanges {
    double max_rotation_deg = 10.0;
    double max_shear = 0.5;
    double min_scale = 0.75;
    double max_scale = 1.5;

    void validate() const;
};

/// In-plane rotation, x-shear and isotropic scale, composed as R * Sh * S
/// about the image center.
struct AffineParams {
    double rotation_deg = 0.0;
    double shear = 0.0;
    double scale = 1.0;

    /// Validated construction; values outside `ranges` raise ConfigError.
    static AffineParams make(double rotation_deg, double shear, double scale,
                             const AffineRanges& ranges = {});
    [[nodiscard]] std::array<double, 4> matrix() const;
};

/// General 2D affine about the image center: out = m * (in - c) + c + t.
struct Affine2D {
    std::array<double, 4> m{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
    std::array<double, 2> t{0.0, 0.0};             // (x, y) translation in pixels
};

AffineParams sample_affine(std::uint64_t seed, const AffineRanges& ranges = {});

/// Inverse-mapped bilinear warp with zero fill outside the input.
Image2D warp_affine(const Image2D& img, const Affine2D& transform);
Image2D apply_affine(const Image2D& img, const AffineParams& p);
/// Warps a binary mask (bilinear, then threshold at 0.5).
Mask2D apply_affine(const Mask2D& mask, const AffineParams& p);

struct BiasFieldParams {
    int polynomial_order = 3;
    double coeff_range = 0.5;

    void validate() const;
};

/// Number of monomials u^i v^j with i + j <= order.
int bias_coefficient_count(int order);

/// exp(P(u, v)) on normalized coordinates u, v in [-1, 1]; coefficients of P
/// are uniform in [-coeff_range, coeff_range].
Image2D bias_field(int ny, int nx, const BiasFieldParams& p, std::uint64_t seed);
Image2D apply_bias_field(const Image2D& img, const BiasFieldParams& p, std::uint64_t seed);

struct MotionParams {
    int n_movements = 2;
    double max_rotation_deg = 3.0;
    double max_translation_px = 2.0;

    void validate() const;
};

struct RigidMotion {
    double rotation_deg = 0.0;
    double tx = 0.0;
    double ty = 0.0;
};

/// Copy k (pose 0 = identity, pose k >= 1 = movements[k-1]) supplies the
/// phase-encode lines [boundaries[k], boundaries[k+1]) in centered k-space order.
/// Poses are applied relative to the copy that owns the k-space center.
struct MotionPlan {
    std::vector<RigidMotion> movements;
    std::vector<int> boundaries;
};

MotionPlan sample_motion_plan(const MotionParams& p, int phase_lines, std::uint64_t seed);
Image2D apply_motion_plan(const Image2D& img, const MotionPlan& plan);
/// Segment-wise k-space composition of rigidly moved copies; returns the magnitude image.
Image2D apply_motion_artifact(const Image2D& img, const MotionParams& p, std::uint64_t seed);

/// Which augmentations run and how pair members share them.
struct PairAugPolicy {
    bool geometric_shared = true;
    bool nongeometric_on_b_only = true;
    bool affine = true;
    bool bias_field = true;
    bool motion = true;
    AffineRanges affine_ranges;
    BiasFieldParams bias;
    int max_movements = 4;
    double motion_max_rotation_deg = 3.0;
    double motion_max_translation_px = 2.0;

    static PairAugPolicy disabled();
    [[nodiscard]] bool any_enabled() const { return affine || bias_field || motion; }
    void validate() const;
};

/// Sampled augmentation for one slice.
struct SliceTransform {
    std::optional<AffineParams> affine;
    std::optional<std::uint64_t> bias_seed;
    BiasFieldParams bias;
    std::optional<MotionPlan> motion;
};

/// Draws the geometric part and (if `nongeometric`) the intensity part for one slice.
SliceTransform sample_slice_transform(const PairAugPolicy& policy, int ny, int nx,
                                      bool nongeometric, std::uint64_t seed);
/// Affine, then bias field, then motion.
Image2D apply_transform(const Image2D& img, const SliceTransform& t);
/// Geometric part only.
Mask2D apply_geometric(const Mask2D& mask, const SliceTransform& t);

struct PairTransform {
    SliceTransform a;
    SliceTransform b;
};

PairTransform sample_pair_transform(const PairAugPolicy& policy, int ny, int nx,
                                    std::uint64_t seed);

/// (x_u, x_u_hat) from the two members of a pair slice.
std::pair<Image2D, Image2D> augment_pair(const Image2D& slice_a, const Image2D& slice_b,
                                         const PairAugPolicy& policy, std::uint64_t seed);

} // namespace pcda
