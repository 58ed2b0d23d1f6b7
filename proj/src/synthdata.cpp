#include "pcda/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "pcda/errors.hpp"
#include "pcda/random.hpp"

namespace pcda {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json appearance_to_json(const AppearanceParams& p) {
    return {{"lesion_contrast", p.lesion_contrast}, {"texture_gain", p.texture_gain},
            {"through_plane_blur", p.through_plane_blur}, {"gamma", p.gamma},
            {"gain", p.gain}, {"offset", p.offset}, {"noise_sigma", p.noise_sigma},
            {"inhomogeneity", p.inhomogeneity}};
}

AppearanceParams appearance_from_json(const json& j, AppearanceParams p) {
    p.lesion_contrast = j.value("lesion_contrast", p.lesion_contrast);
    p.texture_gain = j.value("texture_gain", p.texture_gain);
    p.through_plane_blur = j.value("through_plane_blur", p.through_plane_blur);
    p.gamma = j.value("gamma", p.gamma);
    p.gain = j.value("gain", p.gain);
    p.offset = j.value("offset", p.offset);
    p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
    p.inhomogeneity = j.value("inhomogeneity", p.inhomogeneity);
    return p;
}

void validate_appearance(const AppearanceParams& p, const char* name) {
    if (!(p.lesion_contrast > 0.0) || p.texture_gain < 0.0 || p.through_plane_blur < 0.0 ||
        !(p.gamma > 0.0) || !(p.gain > 0.0) || p.noise_sigma < 0.0 || p.inhomogeneity < 0.0) {
        throw ConfigError(std::string("synth: invalid appearance '") + name + "'");
    }
}

/// exp of a random cubic in normalized (x, y, z); all ones for amplitude 0.
std::vector<double> inhomogeneity_field(int nx, int ny, int nz, double amplitude,
                                        std::uint64_t seed) {
    std::vector<double> field(static_cast<std::size_t>(nx) * ny * nz, 1.0);
    if (amplitude <= 0.0) {
        return field;
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> coeff(-amplitude, amplitude);
    struct Term {
        int i, j, k;
        double c;
    };
    std::vector<Term> terms;
    for (int i = 0; i <= 3; ++i) {
        for (int j = 0; i + j <= 3; ++j) {
            for (int k = 0; i + j + k <= 3; ++k) {
                if (i + j + k > 0) {  // no global gain; normalization removes it anyway
                    terms.push_back({i, j, k, coeff(rng)});
                }
            }
        }
    }
    const auto norm = [](int v, int n) { return n > 1 ? -1.0 + 2.0 * v / (n - 1) : 0.0; };
    std::size_t idx = 0;
    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x, ++idx) {
                const double u = norm(x, nx);
                const double v = norm(y, ny);
                const double w = norm(z, nz);
                double poly = 0.0;
                for (const auto& t : terms) {
                    poly += t.c * std::pow(u, t.i) * std::pow(v, t.j) * std::pow(w, t.k);
                }
                field[idx] = std::exp(poly);
            }
        }
    }
    return field;
}

struct Ellipsoid {
    double cx, cy, cz, rx, ry, rz;

    [[nodiscard]] double radius2(double x, double y, double z) const {
        const double u = (x - cx) / rx;
        const double v = (y - cy) / ry;
        const double w = (z - cz) / rz;
        return u * u + v * v + w * w;
    }
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}

Mask3D rasterize_lesions(const std::vector<Ellipsoid>& base, double scale, const SynthConfig& cfg,
                         const Mask3D& allowed) {
    Mask3D m(cfg.nx, cfg.ny, cfg.nz);
    for (const auto& b : base) {
        Ellipsoid e = b;
        e.rx = std::clamp(b.rx * scale, cfg.lesion_radius_min, cfg.lesion_radius_max);
        e.ry = std::clamp(b.ry * scale, cfg.lesion_radius_min, cfg.lesion_radius_max);
        e.rz = std::max(0.5, e.rx * cfg.lesion_z_ratio);
        const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.rx)));
        const int x1 = std::min(cfg.nx - 1, static_cast<int>(std::ceil(e.cx + e.rx)));
        const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.ry)));
        const int y1 = std::min(cfg.ny - 1, static_cast<int>(std::ceil(e.cy + e.ry)));
        const int z0 = std::max(0, static_cast<int>(std::floor(e.cz - e.rz)));
        const int z1 = std::min(cfg.nz - 1, static_cast<int>(std::ceil(e.cz + e.rz)));
        for (int z = z0; z <= z1; ++z) {
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    if (allowed.at(x, y, z) != 0 && e.radius2(x, y, z) <= 1.0) {
                        m.at(x, y, z) = 1;
                    }
                }
            }
        }
    }
    return m;
}

std::size_t count(const Mask3D& m) {
    return static_cast<std::size_t>(std::count(m.values.begin(), m.values.end(), 1));
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot write " + path.string());
    }
    os << j.dump(2) << '\n';
}

} // namespace

void SynthConfig::validate() const {
    if (n_source_subjects < 3 || n_target_subjects < 3) {
        throw ConfigError("synth: need at least 3 source and 3 target subjects");
    }
    if (nx < 1 || ny < 1 || nz < 1) {
        throw ConfigError("synth: volume shape must be positive");
    }
    if (!(spacing[0] > 0.0 && spacing[1] > 0.0 && spacing[2] > 0.0)) {
        throw ConfigError("synth: spacing must be positive");
    }
    if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) {
        throw ConfigError("synth: invalid lesion count range");
    }
    if (!(lesion_radius_min > 0.0) || lesion_radius_max < lesion_radius_min ||
        !(lesion_z_ratio > 0.0)) {
        throw ConfigError("synth: invalid lesion radius range");
    }
    if (!(lesion_load_at_60 > 0.0) || lesion_load_sigma < 0.0) {
        throw ConfigError("synth: invalid lesion load");
    }
    if (!(age_min > 0.0) || age_max < age_min) {
        throw ConfigError("synth: invalid age range");
    }
    if (!(fold_per_decade > 0.0)) {
        throw ConfigError("synth: fold_per_decade must be positive");
    }
    if (texture_amplitude < 0.0) {
        throw ConfigError("synth: texture_amplitude must be non-negative");
    }
    validate_appearance(source, "source");
    validate_appearance(target_a, "target_a");
    validate_appearance(target_b, "target_b");
}

json SynthConfig::to_json() const {
    return {{"seed", seed},
            {"n_source_subjects", n_source_subjects},
            {"n_target_subjects", n_target_subjects},
            {"shape", {nx, ny, nz}},
            {"spacing", spacing},
            {"lesion_count", {lesion_count_min, lesion_count_max}},
            {"lesion_radius", {lesion_radius_min, lesion_radius_max}},
            {"lesion_z_ratio", lesion_z_ratio},
            {"lesion_load_at_60", lesion_load_at_60},
            {"lesion_load_sigma", lesion_load_sigma},
            {"age_range", {age_min, age_max}},
            {"fold_per_decade", fold_per_decade},
            {"texture_amplitude", texture_amplitude},
            {"source", appearance_to_json(source)},
            {"target_a", appearance_to_json(target_a)},
            {"target_b", appearance_to_json(target_b)}};
}

SynthConfig SynthConfig::from_json(const json& j) {
    SynthConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.n_source_subjects = j.value("n_source_subjects", c.n_source_subjects);
        c.n_target_subjects = j.value("n_target_subjects", c.n_target_subjects);
        if (j.contains("shape")) {
            const auto s = j.at("shape").get<std::array<int, 3>>();
            c.nx = s[0];
            c.ny = s[1];
            c.nz = s[2];
        }
        c.spacing = j.value("spacing", c.spacing);
        if (j.contains("lesion_count")) {
            const auto r = j.at("lesion_count").get<std::array<int, 2>>();
            c.lesion_count_min = r[0];
            c.lesion_count_max = r[1];
        }
        if (j.contains("lesion_radius")) {
            const auto r = j.at("lesion_radius").get<std::array<double, 2>>();
            c.lesion_radius_min = r[0];
            c.lesion_radius_max = r[1];
        }
        c.lesion_z_ratio = j.value("lesion_z_ratio", c.lesion_z_ratio);
        c.lesion_load_at_60 = j.value("lesion_load_at_60", c.lesion_load_at_60);
        c.lesion_load_sigma = j.value("lesion_load_sigma", c.lesion_load_sigma);
        if (j.contains("age_range")) {
            const auto r = j.at("age_range").get<std::array<double, 2>>();
            c.age_min = r[0];
            c.age_max = r[1];
        }
        c.fold_per_decade = j.value("fold_per_decade", c.fold_per_decade);
        c.texture_amplitude = j.value("texture_amplitude", c.texture_amplitude);
        if (j.contains("source")) {
            c.source = appearance_from_json(j.at("source"), c.source);
        }
        if (j.contains("target_a")) {
            c.target_a = appearance_from_json(j.at("target_a"), c.target_a);
        }
        if (j.contains("target_b")) {
            c.target_b = appearance_from_json(j.at("target_b"), c.target_b);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

std::array<int, 3> scaled_splits(int n, std::array<int, 3> full) {
    const double total = full[0] + full[1] + full[2];
    const int val = static_cast<int>(std::lround(n * full[1] / total));
    const int test = static_cast<int>(std::lround(n * full[2] / total));
    return {n - val - test, val, test};
}

SynthSubject generate_subject(const SynthConfig& cfg, const std::string& subject_id,
                              std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SynthSubject s;
    s.subject_id = subject_id;
    s.age_years = uniform(rng, cfg.age_min, cfg.age_max);

    const double sx = cfg.nx / 64.0;
    const double sy = cfg.ny / 64.0;
    const Ellipsoid head{(cfg.nx - 1) / 2.0 + uniform(rng, -1.0, 1.0),
                         (cfg.ny - 1) / 2.0 + uniform(rng, -1.0, 1.0),
                         (cfg.nz - 1) / 2.0,
                         uniform(rng, 0.36, 0.44) * cfg.nx,
                         uniform(rng, 0.40, 0.46) * cfg.ny,
                         uniform(rng, 0.40, 0.46) * cfg.nz};
    const double vx = uniform(rng, 3.0, 5.0) * sx;
    const double vy = uniform(rng, -2.0, 2.0) * sy;
    std::vector<Ellipsoid> ventricles;
    for (double side : {-1.0, 1.0}) {
        ventricles.push_back({head.cx + side * vx, head.cy + vy, head.cz,
                              uniform(rng, 2.0, 3.5) * sx, uniform(rng, 6.0, 9.0) * sy,
                              std::max(1.0, uniform(rng, 0.20, 0.28) * cfg.nz)});
    }

    // smooth texture: a few low-frequency plane waves
    struct Wave {
        double kx, ky, kz, phase, amp;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 6; ++k) {
        const double period = uniform(rng, 8.0, 32.0);
        const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double w = 2.0 * std::numbers::pi / period;
        waves.push_back({w * std::cos(theta), w * std::sin(theta), uniform(rng, -0.3, 0.3),
                         uniform(rng, 0.0, 2.0 * std::numbers::pi), uniform(rng, 0.5, 1.0)});
    }
    double amp_sum = 0.0;
    for (const auto& w : waves) {
        amp_sum += w.amp;
    }

    s.tissue = Grid3<float>(cfg.nx, cfg.ny, cfg.nz);
    s.texture = Grid3<float>(cfg.nx, cfg.ny, cfg.nz);
    s.foreground = Mask3D(cfg.nx, cfg.ny, cfg.nz);
    Mask3D allowed(cfg.nx, cfg.ny, cfg.nz);
    std::vector<std::array<int, 3>> candidates;
    for (int z = 0; z < cfg.nz; ++z) {
        for (int y = 0; y < cfg.ny; ++y) {
            for (int x = 0; x < cfg.nx; ++x) {
                const double r2 = head.radius2(x, y, z);
                if (r2 > 1.0) {
                    continue;
                }
                s.foreground.at(x, y, z) = 1;
                bool in_ventricle = false;
                for (const auto& v : ventricles) {
                    in_ventricle = in_ventricle || v.radius2(x, y, z) <= 1.0;
                }
                s.tissue.at(x, y, z) = in_ventricle ? 0.45f : 1.0f;
                double t = 0.0;
                for (const auto& w : waves) {
                    t += w.amp * std::cos(w.kx * x + w.ky * y + w.kz * z + w.phase);
                }
                s.texture.at(x, y, z) = static_cast<float>(cfg.texture_amplitude * t / amp_sum);
                if (!in_ventricle && r2 <= 0.8 * 0.8) {
                    allowed.at(x, y, z) = 1;
                    if (r2 <= 0.65 * 0.65) {
                        candidates.push_back({x, y, z});
                    }
                }
            }
        }
    }
    const double voxel = cfg.spacing[0] * cfg.spacing[1] * cfg.spacing[2];
    s.tiv_mm3 = static_cast<double>(count(s.foreground)) * voxel;

    std::normal_distribution<double> normal(0.0, 1.0);
    const double load = cfg.lesion_load_at_60 *
                        std::pow(cfg.fold_per_decade, (s.age_years - 60.0) / 10.0) *
                        std::exp(cfg.lesion_load_sigma * normal(rng));
    s.planted_lesion_mm3 = load * s.tiv_mm3;
    const double target_voxels = s.planted_lesion_mm3 / voxel;

    const double r_mid = 0.5 * (cfg.lesion_radius_min + cfg.lesion_radius_max);
    const double typical = 4.0 / 3.0 * std::numbers::pi * r_mid * r_mid *
                           std::max(0.5, r_mid * cfg.lesion_z_ratio);
    const int n_lesions =
        candidates.empty() ? 0
                           : std::clamp(static_cast<int>(std::lround(target_voxels / typical)),
                                        cfg.lesion_count_min, cfg.lesion_count_max);
    std::vector<Ellipsoid> lesions;
    for (int i = 0; i < n_lesions; ++i) {
        const auto& c = candidates[std::uniform_int_distribution<std::size_t>(
            0, candidates.size() - 1)(rng)];
        const double r = uniform(rng, cfg.lesion_radius_min, cfg.lesion_radius_max);
        const double elong = uniform(rng, 0.8, 1.25);
        lesions.push_back({c[0] + uniform(rng, -0.5, 0.5), c[1] + uniform(rng, -0.5, 0.5),
                           c[2] + uniform(rng, -0.3, 0.3), r * elong, r / elong, 0.0});
    }
    // pick the common radius scale whose rasterized volume is closest to the plant
    double lo = 0.05;
    double hi = 10.0;
    double best_scale = 1.0;
    double best_err = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 40 && !lesions.empty(); ++it) {
        const double mid = std::sqrt(lo * hi);
        const double n = static_cast<double>(count(rasterize_lesions(lesions, mid, cfg, allowed)));
        if (std::fabs(n - target_voxels) < best_err) {
            best_err = std::fabs(n - target_voxels);
            best_scale = mid;
        }
        (n < target_voxels ? lo : hi) = mid;
    }
    s.lesions = lesions.empty() ? Mask3D(cfg.nx, cfg.ny, cfg.nz)
                                : rasterize_lesions(lesions, best_scale, cfg, allowed);
    return s;
}

Volume render_appearance(const SynthSubject& s, const AppearanceParams& p, const Spacing& spacing,
                         std::uint64_t noise_seed) {
    const int nx = s.tissue.nx;
    const int ny = s.tissue.ny;
    const int nz = s.tissue.nz;
    std::vector<double> img(s.tissue.size(), 0.0);
    for (std::size_t i = 0; i < img.size(); ++i) {
        if (s.foreground.values[i] != 0) {
            img[i] = s.tissue.values[i] + p.texture_gain * s.texture.values[i] +
                     p.lesion_contrast * s.lesions.values[i];
        }
    }
    if (p.through_plane_blur > 0.0) {
        const int radius = static_cast<int>(std::ceil(3.0 * p.through_plane_blur));
        std::vector<double> kernel(2 * radius + 1);
        for (int k = -radius; k <= radius; ++k) {
            kernel[k + radius] = std::exp(-0.5 * k * k / (p.through_plane_blur * p.through_plane_blur));
        }
        std::vector<double> blurred(img.size(), 0.0);
        const std::size_t plane = static_cast<std::size_t>(nx) * ny;
        for (int z = 0; z < nz; ++z) {
            double wsum = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                const int zz = z + k;
                if (zz < 0 || zz >= nz) {
                    continue;
                }
                const double w = kernel[k + radius];
                wsum += w;
                for (std::size_t i = 0; i < plane; ++i) {
                    blurred[z * plane + i] += w * img[zz * plane + i];
                }
            }
            for (std::size_t i = 0; i < plane; ++i) {
                blurred[z * plane + i] /= wsum;
            }
        }
        img.swap(blurred);
    }
    const auto field = inhomogeneity_field(nx, ny, nz, p.inhomogeneity, derive_seed(noise_seed, 0xb1));
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Volume v;
    v.voxels = Grid3<float>(nx, ny, nz);
    v.spacing = spacing;
    v.subject_id = s.subject_id;
    v.age_years = s.age_years;
    v.tiv_mm3 = s.tiv_mm3;
    for (std::size_t i = 0; i < img.size(); ++i) {
        if (s.foreground.values[i] == 0) {
            continue;
        }
        double value = p.gain * std::pow(std::max(img[i], 1e-3), p.gamma) * field[i] + p.offset;
        if (p.noise_sigma > 0.0) {
            value += p.noise_sigma * normal(rng);
        }
        v.voxels.values[i] = static_cast<float>(std::max(value, 1e-3));
    }
    return v;
}

SynthDataset generate_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    try {
        fs::create_directories(out_dir / "source");
        fs::create_directories(out_dir / "target");
    } catch (const fs::filesystem_error& e) {
        throw IoError("cannot create dataset directory " + out_dir.string() + ": " + e.what());
    }
    const auto name = [](const char* prefix, int i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s-%03d", prefix, i);
        return std::string(buf);
    };

    SynthDataset ds;
    ds.source.name = "synth-source";
    ds.source.base_dir = out_dir;
    ds.target.name = "synth-target";
    ds.target.base_dir = out_dir;
    ds.source.entries.resize(static_cast<std::size_t>(cfg.n_source_subjects));
    ds.target.entries.resize(static_cast<std::size_t>(cfg.n_target_subjects));

    const auto src_splits = scaled_splits(cfg.n_source_subjects, {40, 10, 10});
    const auto tgt_splits = scaled_splits(cfg.n_target_subjects, {38, 15, 20});
    const auto split_of = [](int i, const std::array<int, 3>& sizes) {
        if (i < sizes[0]) {
            return Split::train;
        }
        return i < sizes[0] + sizes[1] ? Split::val : Split::test;
    };

    const int total = cfg.n_source_subjects + cfg.n_target_subjects;
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (int k = 0; k < total; ++k) {
        try {
            const bool is_source = k < cfg.n_source_subjects;
            const int i = is_source ? k : k - cfg.n_source_subjects;
            const std::string id = name(is_source ? "src" : "tgt", i);
            const SynthSubject s = generate_subject(cfg, id, derive_seed(cfg.seed, is_source ? 1 : 2, i));
            ManifestEntry e;
            e.subject_id = id;
            e.age_years = s.age_years;
            e.tiv_mm3 = s.tiv_mm3;
            const std::string dir = is_source ? "source/" : "target/";
            e.mask = dir + id + "_mask.nii.gz";
            save_mask(out_dir / *e.mask, s.lesions, cfg.spacing);
            if (is_source) {
                e.split = split_of(i, src_splits);
                Volume v = render_appearance(s, cfg.source, cfg.spacing, derive_seed(cfg.seed, 3, i));
                v.domain_id = 0;
                e.volumes.push_back({dir + id + "_img.nii.gz", 0});
                save_volume(out_dir / e.volumes[0].path, v);
                ds.source.entries[i] = std::move(e);
            } else {
                e.split = split_of(i, tgt_splits);
                Volume a = render_appearance(s, cfg.target_a, cfg.spacing, derive_seed(cfg.seed, 4, i));
                Volume b = render_appearance(s, cfg.target_b, cfg.spacing, derive_seed(cfg.seed, 5, i));
                a.domain_id = 1;
                b.domain_id = 2;
                e.volumes.push_back({dir + id + "_a.nii.gz", 1});
                e.volumes.push_back({dir + id + "_b.nii.gz", 2});
                save_volume(out_dir / e.volumes[0].path, a);
                save_volume(out_dir / e.volumes[1].path, b);
                ds.target.entries[i] = std::move(e);
            }
        } catch (...) {
#pragma omp critical(synth_failure)
            if (!failure) {
                failure = std::current_exception();
            }
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    ds.source_manifest = out_dir / "source_manifest.json";
    ds.target_manifest = out_dir / "target_manifest.json";
    save_manifest(ds.source_manifest, ds.source);
    save_manifest(ds.target_manifest, ds.target);
    write_json(out_dir / "synth_config.json", cfg.to_json());
    return ds;
}

Mask3D oracle_segment(const Manifest& m, const ManifestEntry& e) {
    if (!e.mask) {
        throw IoError("subject " + e.subject_id + " has no stored mask");
    }
    return load_mask(m.resolve(*e.mask));
}

} // namespace pcda
