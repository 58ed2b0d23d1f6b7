#include "pcda/augment.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>

#include "pcda/random.hpp"

namespace pcda {

namespace {

double deg_to_rad(double deg) {
    return deg * std::numbers::pi / 180.0;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

} // namespace

// ---------------------------------------------------------------- affine

void AffineRanges::validate() const {
    if (max_rotation_deg < 0.0 || max_shear < 0.0 || !(min_scale > 0.0) ||
        min_scale > max_scale) {
        throw ConfigError("affine ranges are invalid");
    }
}

AffineParams AffineParams::make(double rotation_deg, double shear, double scale,
                                const AffineRanges& ranges) {
    ranges.validate();
    if (std::fabs(rotation_deg) > ranges.max_rotation_deg) {
        throw ConfigError("affine: rotation " + std::to_string(rotation_deg) +
                          " deg outside the allowed range");
    }
    if (std::fabs(shear) > ranges.max_shear) {
        throw ConfigError("affine: shear " + std::to_string(shear) + " outside the allowed range");
    }
    if (scale < ranges.min_scale || scale > ranges.max_scale) {
        throw ConfigError("affine: scale " + std::to_string(scale) + " outside the allowed range");
    }
    return {rotation_deg, shear, scale};
}

std::array<double, 4> AffineParams::matrix() const {
    const double c = std::cos(deg_to_rad(rotation_deg));
    const double s = std::sin(deg_to_rad(rotation_deg));
    // R * Sh * S with Sh = [[1, shear], [0, 1]]
    return {c * scale, (c * shear - s) * scale, s * scale, (s * shear + c) * scale};
}

AffineParams sample_affine(std::uint64_t seed, const AffineRanges& ranges) {
    ranges.validate();
    std::mt19937_64 rng(seed);
    AffineParams p;
    p.rotation_deg = uniform(rng, -ranges.max_rotation_deg, ranges.max_rotation_deg);
    p.shear = uniform(rng, -ranges.max_shear, ranges.max_shear);
    p.scale = uniform(rng, ranges.min_scale, ranges.max_scale);
    return p;
}

Image2D warp_affine(const Image2D& img, const Affine2D& tr) {
    const auto& m = tr.m;
    const double det = m[0] * m[3] - m[1] * m[2];
    if (det == 0.0 || !std::isfinite(det)) {
        throw ConfigError("warp_affine: singular transform");
    }
    const std::array<double, 4> inv{m[3] / det, -m[1] / det, -m[2] / det, m[0] / det};
    const double cx = (img.nx - 1) * 0.5;
    const double cy = (img.ny - 1) * 0.5;
    Image2D out(img.ny, img.nx);
    const auto sample = [&img](int y, int x) -> double {
        if (x < 0 || y < 0 || x >= img.nx || y >= img.ny) {
            return 0.0;
        }
        return img.at(y, x);
    };
#pragma omp parallel for schedule(static)
    for (int y = 0; y < img.ny; ++y) {
        for (int x = 0; x < img.nx; ++x) {
            const double dx = x - cx - tr.t[0];
            const double dy = y - cy - tr.t[1];
            const double sx = inv[0] * dx + inv[1] * dy + cx;
            const double sy = inv[2] * dx + inv[3] * dy + cy;
            const double fx0 = std::floor(sx);
            const double fy0 = std::floor(sy);
            if (fx0 < -1.0 || fy0 < -1.0 || fx0 > img.nx || fy0 > img.ny) {
                continue;
            }
            const int x0 = static_cast<int>(fx0);
            const int y0 = static_cast<int>(fy0);
            const double ax = sx - fx0;
            const double ay = sy - fy0;
            double v = sample(y0, x0) * (1.0 - ax) * (1.0 - ay);
            if (ax != 0.0) {
                v += sample(y0, x0 + 1) * ax * (1.0 - ay);
            }
            if (ay != 0.0) {
                v += sample(y0 + 1, x0) * (1.0 - ax) * ay;
                if (ax != 0.0) {
                    v += sample(y0 + 1, x0 + 1) * ax * ay;
                }
            }
            out.at(y, x) = static_cast<float>(v);
        }
    }
    return out;
}

Image2D apply_affine(const Image2D& img, const AffineParams& p) {
    return warp_affine(img, Affine2D{p.matrix(), {0.0, 0.0}});
}

Mask2D apply_affine(const Mask2D& mask, const AffineParams& p) {
    Image2D f(mask.ny, mask.nx);
    std::transform(mask.values.begin(), mask.values.end(), f.values.begin(),
                   [](std::uint8_t v) { return static_cast<float>(v); });
    const Image2D w = apply_affine(f, p);
    Mask2D out(mask.ny, mask.nx);
    std::transform(w.values.begin(), w.values.end(), out.values.begin(),
                   [](float v) { return static_cast<std::uint8_t>(v >= 0.5f ? 1 : 0); });
    return out;
}

// ---------------------------------------------------------------- bias field

void BiasFieldParams::validate() const {
    if (polynomial_order < 0 || coeff_range < 0.0) {
        throw ConfigError("bias field: order and coefficient range must be non-negative");
    }
}

int bias_coefficient_count(int order) {
    return (order + 1) * (order + 2) / 2;
}

Image2D bias_field(int ny, int nx, const BiasFieldParams& p, std::uint64_t seed) {
    p.validate();
    std::mt19937_64 rng(seed);
    std::vector<double> coeff(static_cast<std::size_t>(bias_coefficient_count(p.polynomial_order)));
    for (auto& c : coeff) {
        c = p.coeff_range > 0.0 ? uniform(rng, -p.coeff_range, p.coeff_range) : 0.0;
    }
    const auto norm = [](int i, int n) { return n > 1 ? -1.0 + 2.0 * i / (n - 1) : 0.0; };
    Image2D field(ny, nx);
    for (int y = 0; y < ny; ++y) {
        const double v = norm(y, ny);
        for (int x = 0; x < nx; ++x) {
            const double u = norm(x, nx);
            double poly = 0.0;
            std::size_t k = 0;
            for (int total = 0; total <= p.polynomial_order; ++total) {
                for (int i = total; i >= 0; --i) {
                    poly += coeff[k++] * std::pow(u, i) * std::pow(v, total - i);
                }
            }
            field.at(y, x) = static_cast<float>(std::exp(poly));
        }
    }
    return field;
}

Image2D apply_bias_field(const Image2D& img, const BiasFieldParams& p, std::uint64_t seed) {
    const Image2D field = bias_field(img.ny, img.nx, p, seed);
    Image2D out = img;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values[i] *= field.values[i];
    }
    return out;
}

// ---------------------------------------------------------------- motion

void MotionParams::validate() const {
    if (n_movements < 0 || n_movements > 4) {
        throw ConfigError("motion: n_movements must be in [0, 4]");
    }
    if (max_rotation_deg < 0.0 || max_translation_px < 0.0) {
        throw ConfigError("motion: limits must be non-negative");
    }
}

MotionPlan sample_motion_plan(const MotionParams& p, int phase_lines, std::uint64_t seed) {
    p.validate();
    if (phase_lines < p.n_movements + 1) {
        throw ConfigError("motion: too few phase-encode lines for the requested movements");
    }
    std::mt19937_64 rng(seed);
    MotionPlan plan;
    for (int k = 0; k < p.n_movements; ++k) {
        RigidMotion m;
        m.rotation_deg = uniform(rng, -p.max_rotation_deg, p.max_rotation_deg);
        m.tx = uniform(rng, -p.max_translation_px, p.max_translation_px);
        m.ty = uniform(rng, -p.max_translation_px, p.max_translation_px);
        plan.movements.push_back(m);
    }
    std::vector<int> cuts(static_cast<std::size_t>(phase_lines - 1));
    std::iota(cuts.begin(), cuts.end(), 1);
    std::shuffle(cuts.begin(), cuts.end(), rng);
    cuts.resize(static_cast<std::size_t>(p.n_movements));
    std::sort(cuts.begin(), cuts.end());
    plan.boundaries.push_back(0);
    plan.boundaries.insert(plan.boundaries.end(), cuts.begin(), cuts.end());
    plan.boundaries.push_back(phase_lines);
    return plan;
}

namespace {

std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

void fft2(std::vector<std::complex<double>>& data, int ny, int nx, int sign) {
    auto* buf = reinterpret_cast<fftw_complex*>(data.data());
    fftw_plan plan = nullptr;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_2d(ny, nx, buf, buf, sign, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
}

} // namespace

Image2D apply_motion_plan(const Image2D& img, const MotionPlan& plan) {
    const int ny = img.ny;
    const int nx = img.nx;
    const std::size_t copies = plan.movements.size() + 1;
    if (plan.boundaries.size() != copies + 1 || plan.boundaries.front() != 0 ||
        plan.boundaries.back() != ny ||
        !std::is_sorted(plan.boundaries.begin(), plan.boundaries.end())) {
        throw ConfigError("motion: segment boundaries must partition the phase-encode lines");
    }
    // segment owning each raw FFT row
    std::vector<std::size_t> owner(static_cast<std::size_t>(ny));
    for (int r = 0; r < ny; ++r) {
        const int centered = (r + ny / 2) % ny;
        std::size_t s = 0;
        while (centered >= plan.boundaries[s + 1]) {
            ++s;
        }
        owner[r] = s;
    }
    // poses are taken relative to the one held while the k-space center was
    // read, so the artifact ghosts and blurs but does not displace the object
    std::size_t ref = 0;
    while (ny / 2 >= plan.boundaries[ref + 1]) {
        ++ref;
    }
    const auto pose = [&plan](std::size_t k) {
        return k == 0 ? RigidMotion{} : plan.movements[k - 1];
    };
    const RigidMotion p_ref = pose(ref);
    const std::size_t n = img.size();
    std::vector<std::complex<double>> hybrid(n);
    std::vector<std::complex<double>> spectrum(n);
    for (std::size_t k = 0; k < copies; ++k) {
        if (plan.boundaries[k] == plan.boundaries[k + 1]) {
            continue;
        }
        Image2D moved = img;
        if (k != ref) {
            // pose_k composed with the inverse of the reference pose
            const RigidMotion pk = pose(k);
            const double a = deg_to_rad(pk.rotation_deg - p_ref.rotation_deg);
            const double c = std::cos(a);
            const double s = std::sin(a);
            const double tx = pk.tx - (c * p_ref.tx - s * p_ref.ty);
            const double ty = pk.ty - (s * p_ref.tx + c * p_ref.ty);
            moved = warp_affine(img, Affine2D{{c, -s, s, c}, {tx, ty}});
        }
        for (std::size_t i = 0; i < n; ++i) {
            spectrum[i] = moved.values[i];
        }
        fft2(spectrum, ny, nx, FFTW_FORWARD);
        for (int r = 0; r < ny; ++r) {
            if (owner[r] != k) {
                continue;
            }
            std::copy_n(spectrum.begin() + static_cast<std::ptrdiff_t>(r) * nx, nx,
                        hybrid.begin() + static_cast<std::ptrdiff_t>(r) * nx);
        }
    }
    fft2(hybrid, ny, nx, FFTW_BACKWARD);
    Image2D out(ny, nx);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] = static_cast<float>(std::abs(hybrid[i]) * scale);
    }
    return out;
}

Image2D apply_motion_artifact(const Image2D& img, const MotionParams& p, std::uint64_t seed) {
    return apply_motion_plan(img, sample_motion_plan(p, img.ny, seed));
}

// ---------------------------------------------------------------- policy

PairAugPolicy PairAugPolicy::disabled() {
    PairAugPolicy p;
    p.affine = false;
    p.bias_field = false;
    p.motion = false;
    return p;
}

void PairAugPolicy::validate() const {
    affine_ranges.validate();
    bias.validate();
    if (max_movements < 1 || max_movements > 4) {
        throw ConfigError("augmentation: max_movements must be in [1, 4]");
    }
    if (motion_max_rotation_deg < 0.0 || motion_max_translation_px < 0.0) {
        throw ConfigError("augmentation: motion limits must be non-negative");
    }
}

namespace {

enum Stream : std::uint64_t { kAffine = 1, kBias = 2, kMotionCount = 3, kMotionPlan = 4 };

void sample_nongeometric(const PairAugPolicy& policy, int ny, std::uint64_t seed,
                         SliceTransform& t) {
    if (policy.bias_field) {
        t.bias_seed = derive_seed(seed, kBias);
        t.bias = policy.bias;
    }
    if (policy.motion) {
        std::mt19937_64 rng(derive_seed(seed, kMotionCount));
        MotionParams mp;
        mp.n_movements = std::uniform_int_distribution<int>(1, policy.max_movements)(rng);
        mp.max_rotation_deg = policy.motion_max_rotation_deg;
        mp.max_translation_px = policy.motion_max_translation_px;
        t.motion = sample_motion_plan(mp, ny, derive_seed(seed, kMotionPlan));
    }
}

} // namespace

SliceTransform sample_slice_transform(const PairAugPolicy& policy, int ny, int nx,
                                      bool nongeometric, std::uint64_t seed) {
    (void)nx;
    SliceTransform t;
    if (policy.affine) {
        t.affine = sample_affine(derive_seed(seed, kAffine), policy.affine_ranges);
    }
    if (nongeometric) {
        sample_nongeometric(policy, ny, seed, t);
    }
    return t;
}

Image2D apply_transform(const Image2D& img, const SliceTransform& t) {
    Image2D out = t.affine ? apply_affine(img, *t.affine) : img;
    if (t.bias_seed) {
        out = apply_bias_field(out, t.bias, *t.bias_seed);
    }
    if (t.motion) {
        out = apply_motion_plan(out, *t.motion);
    }
    return out;
}

Mask2D apply_geometric(const Mask2D& mask, const SliceTransform& t) {
    return t.affine ? apply_affine(mask, *t.affine) : mask;
}

PairTransform sample_pair_transform(const PairAugPolicy& policy, int ny, int nx,
                                    std::uint64_t seed) {
    policy.validate();
    PairTransform pt;
    pt.b = sample_slice_transform(policy, ny, nx, true, derive_seed(seed, 11));
    if (policy.geometric_shared) {
        pt.a.affine = pt.b.affine;
    } else if (policy.affine) {
        pt.a.affine = sample_affine(derive_seed(seed, 12, kAffine), policy.affine_ranges);
    }
    if (!policy.nongeometric_on_b_only) {
        sample_nongeometric(policy, ny, derive_seed(seed, 13), pt.a);
    }
    return pt;
}

std::pair<Image2D, Image2D> augment_pair(const Image2D& slice_a, const Image2D& slice_b,
                                         const PairAugPolicy& policy, std::uint64_t seed) {
    if (slice_a.ny != slice_b.ny || slice_a.nx != slice_b.nx) {
        throw ShapeError("augment_pair: pair slices differ in shape");
    }
    if (!policy.any_enabled()) {
        return {slice_a, slice_b};
    }
    const PairTransform pt = sample_pair_transform(policy, slice_a.ny, slice_a.nx, seed);
    return {apply_transform(slice_a, pt.a), apply_transform(slice_b, pt.b)};
}

} // namespace pcda
