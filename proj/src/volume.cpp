#include "pcda/volume.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace pcda {

namespace fs = std::filesystem;

void Volume::validate() const {
    if (voxels.nx < 1 || voxels.ny < 1 || voxels.nz < 1) {
        throw ValidationError("volume " + subject_id + ": empty extent");
    }
    if (voxels.values.size() != static_cast<std::size_t>(voxels.nx) * voxels.ny * voxels.nz) {
        throw ValidationError("volume " + subject_id + ": voxel count does not match shape");
    }
    for (double s : spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) {
            throw ValidationError("volume " + subject_id + ": spacing must be positive");
        }
    }
    if (!std::all_of(voxels.values.begin(), voxels.values.end(),
                     [](float v) { return std::isfinite(v); })) {
        throw ValidationError("volume " + subject_id + ": non-finite voxel");
    }
}

void LabeledSample::validate() const {
    image.validate();
    if (!mask.same_shape(image.voxels)) {
        throw ValidationError("labeled sample " + image.subject_id + ": mask shape differs");
    }
    if (!std::all_of(mask.values.begin(), mask.values.end(),
                     [](std::uint8_t v) { return v <= 1; })) {
        throw ValidationError("labeled sample " + image.subject_id + ": mask is not binary");
    }
}

void PairedSample::validate() const {
    image_a.validate();
    image_b.validate();
    if (!image_a.voxels.same_shape(image_b.voxels)) {
        throw ValidationError("pair " + image_a.subject_id + ": members have different shapes");
    }
    if (image_a.subject_id != image_b.subject_id) {
        throw ValidationError("pair: subject ids differ (" + image_a.subject_id + ", " +
                              image_b.subject_id + ")");
    }
    if (image_a.domain_id == image_b.domain_id) {
        throw ValidationError("pair " + image_a.subject_id + ": members share a domain id");
    }
}

// ---------------------------------------------------------------- NIfTI-1

namespace {

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;

enum : std::int16_t {
    kUint8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUint16 = 512,
    kUint32 = 768,
};

bool has_gz_suffix(const fs::path& p) {
    return p.extension() == ".gz";
}

std::vector<char> read_file_bytes(const fs::path& path) {
    if (!fs::exists(path)) {
        throw IoError("file not found: " + path.string());
    }
    std::vector<char> bytes;
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.string().c_str(), "rb");
        if (f == nullptr) {
            throw IoError("cannot open " + path.string());
        }
        char buf[1 << 16];
        int n = 0;
        while ((n = gzread(f, buf, sizeof(buf))) > 0) {
            bytes.insert(bytes.end(), buf, buf + n);
        }
        const bool failed = n < 0;
        gzclose(f);
        if (failed) {
            throw FormatError("corrupt gzip stream in " + path.string());
        }
        return bytes;
    }
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open " + path.string());
    }
    bytes.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const fs::path& path, const std::vector<char>& bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.string().c_str(), "wb6");
        if (f == nullptr) {
            throw IoError("cannot write " + path.string());
        }
        const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(f);
        if (n != static_cast<int>(bytes.size())) {
            throw IoError("failed writing " + path.string());
        }
        return;
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError("cannot write " + path.string());
    }
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw IoError("failed writing " + path.string());
    }
}

class HeaderReader {
public:
    HeaderReader(const std::vector<char>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

    template <typename T>
    T get(std::size_t offset) const {
        T v;
        std::memcpy(&v, bytes_.data() + offset, sizeof(T));
        if (swap_) {
            auto* p = reinterpret_cast<unsigned char*>(&v);
            std::reverse(p, p + sizeof(T));
        }
        return v;
    }

private:
    const std::vector<char>& bytes_;
    bool swap_;
};

template <typename T>
void put(std::vector<char>& bytes, std::size_t offset, T v) {
    std::memcpy(bytes.data() + offset, &v, sizeof(T));
}

// Shortest decimal that round-trips the stored float, so that a spacing
// written as 1.04 reads back as the double 1.04.
double float_to_decimal_double(float f) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), f);
    double d = 0.0;
    std::from_chars(buf, res.ptr, d);
    return d;
}

struct RawImage {
    int nx = 0;
    int ny = 0;
    int nz = 0;
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<double> values;
};

RawImage read_nifti(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < static_cast<std::size_t>(kHeaderSize)) {
        throw FormatError("truncated NIfTI header: " + path.string());
    }
    std::int32_t sizeof_hdr;
    std::memcpy(&sizeof_hdr, bytes.data(), 4);
    bool swap = false;
    if (sizeof_hdr != kHeaderSize) {
        auto* p = reinterpret_cast<unsigned char*>(&sizeof_hdr);
        std::reverse(p, p + 4);
        if (sizeof_hdr != kHeaderSize) {
            throw FormatError("not a NIfTI-1 file (sizeof_hdr): " + path.string());
        }
        swap = true;
    }
    if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0) {
        throw FormatError("unsupported NIfTI magic (expected single-file n+1): " +
                          path.string());
    }
    const HeaderReader hdr(bytes, swap);
    const auto ndim = hdr.get<std::int16_t>(40);
    if (ndim < 1 || ndim > 7) {
        throw FormatError("invalid NIfTI dim[0] in " + path.string());
    }
    std::array<int, 8> dim{};
    for (int i = 1; i <= 7; ++i) {
        dim[i] = i <= ndim ? hdr.get<std::int16_t>(40 + 2 * i) : 1;
    }
    for (int i = 4; i <= 7; ++i) {
        if (dim[i] != 1) {
            throw FormatError("only 3D NIfTI images are supported: " + path.string());
        }
    }
    RawImage img;
    img.nx = dim[1];
    img.ny = ndim >= 2 ? dim[2] : 1;
    img.nz = ndim >= 3 ? dim[3] : 1;
    if (img.nx < 1 || img.ny < 1 || img.nz < 1) {
        throw FormatError("non-positive NIfTI dimensions in " + path.string());
    }
    for (int i = 0; i < 3; ++i) {
        const float pd = hdr.get<float>(76 + 4 * (i + 1));
        img.spacing[i] = float_to_decimal_double(std::fabs(pd));
    }
    const auto datatype = hdr.get<std::int16_t>(70);
    const auto vox_offset = static_cast<std::size_t>(hdr.get<float>(108));
    float slope = hdr.get<float>(112);
    float inter = hdr.get<float>(116);
    if (slope == 0.0f || !std::isfinite(slope)) {
        slope = 1.0f;
        inter = 0.0f;
    }
    int bytes_per = 0;
    switch (datatype) {
    case kUint8:
    case kInt8: bytes_per = 1; break;
    case kInt16:
    case kUint16: bytes_per = 2; break;
    case kInt32:
    case kUint32:
    case kFloat32: bytes_per = 4; break;
    case kFloat64: bytes_per = 8; break;
    default:
        throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype) + " in " +
                          path.string());
    }
    const std::size_t count = static_cast<std::size_t>(img.nx) * img.ny * img.nz;
    if (vox_offset < static_cast<std::size_t>(kHeaderSize) ||
        bytes.size() < vox_offset + count * bytes_per) {
        throw FormatError("NIfTI payload truncated in " + path.string());
    }
    img.values.resize(count);
    const HeaderReader data(bytes, swap);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t off = vox_offset + i * bytes_per;
        double v = 0.0;
        switch (datatype) {
        case kUint8: v = static_cast<unsigned char>(bytes[off]); break;
        case kInt8: v = static_cast<signed char>(bytes[off]); break;
        case kInt16: v = data.get<std::int16_t>(off); break;
        case kUint16: v = data.get<std::uint16_t>(off); break;
        case kInt32: v = data.get<std::int32_t>(off); break;
        case kUint32: v = data.get<std::uint32_t>(off); break;
        case kFloat32: v = data.get<float>(off); break;
        case kFloat64: v = data.get<double>(off); break;
        default: break;
        }
        img.values[i] = (slope == 1.0f && inter == 0.0f) ? v : v * slope + inter;
    }
    return img;
}

std::vector<char> make_header(int nx, int ny, int nz, const Spacing& spacing,
                              std::int16_t datatype, std::int16_t bitpix) {
    std::vector<char> bytes(kDataOffset, '\0');
    put<std::int32_t>(bytes, 0, kHeaderSize);
    put<char>(bytes, 38, 'r');
    const std::int16_t dims[8] = {3, static_cast<std::int16_t>(nx), static_cast<std::int16_t>(ny),
                                  static_cast<std::int16_t>(nz), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) {
        put<std::int16_t>(bytes, 40 + 2 * i, dims[i]);
    }
    put<std::int16_t>(bytes, 70, datatype);
    put<std::int16_t>(bytes, 72, bitpix);
    const float pixdim[8] = {1.0f, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                             static_cast<float>(spacing[2]), 0.0f, 0.0f, 0.0f, 0.0f};
    for (int i = 0; i < 8; ++i) {
        put<float>(bytes, 76 + 4 * i, pixdim[i]);
    }
    put<float>(bytes, 108, static_cast<float>(kDataOffset));
    put<float>(bytes, 112, 1.0f);
    put<float>(bytes, 116, 0.0f);
    put<char>(bytes, 123, 2);  // xyzt_units: mm
    put<std::int16_t>(bytes, 254, 1);  // sform_code: scanner
    put<float>(bytes, 280, static_cast<float>(spacing[0]));
    put<float>(bytes, 296 + 4, static_cast<float>(spacing[1]));
    put<float>(bytes, 312 + 8, static_cast<float>(spacing[2]));
    std::memcpy(bytes.data() + 344, "n+1\0", 4);
    return bytes;
}

void check_dims_fit(int nx, int ny, int nz) {
    constexpr int limit = 32767;
    if (nx > limit || ny > limit || nz > limit) {
        throw FormatError("volume dimension exceeds the NIfTI-1 int16 limit");
    }
}

} // namespace

Volume load_volume(const fs::path& path) {
    const RawImage raw = read_nifti(path);
    Volume v;
    v.voxels = Grid3<float>(raw.nx, raw.ny, raw.nz);
    for (std::size_t i = 0; i < raw.values.size(); ++i) {
        v.voxels.values[i] = static_cast<float>(raw.values[i]);
    }
    v.spacing = raw.spacing;
    v.subject_id = path.filename().string();
    v.validate();
    return v;
}

void save_volume(const fs::path& path, const Volume& v) {
    check_dims_fit(v.voxels.nx, v.voxels.ny, v.voxels.nz);
    auto bytes = make_header(v.voxels.nx, v.voxels.ny, v.voxels.nz, v.spacing, kFloat32, 32);
    const std::size_t payload = v.voxels.values.size() * sizeof(float);
    bytes.resize(kDataOffset + payload);
    std::memcpy(bytes.data() + kDataOffset, v.voxels.values.data(), payload);
    write_file_bytes(path, bytes);
}

Mask3D load_mask(const fs::path& path) {
    const RawImage raw = read_nifti(path);
    Mask3D m(raw.nx, raw.ny, raw.nz);
    for (std::size_t i = 0; i < raw.values.size(); ++i) {
        const double v = raw.values[i];
        if (v != 0.0 && v != 1.0) {
            throw ValidationError("mask " + path.string() + " is not binary");
        }
        m.values[i] = static_cast<std::uint8_t>(v);
    }
    return m;
}

void save_mask(const fs::path& path, const Mask3D& mask, const Spacing& spacing) {
    check_dims_fit(mask.nx, mask.ny, mask.nz);
    auto bytes = make_header(mask.nx, mask.ny, mask.nz, spacing, kUint8, 8);
    bytes.insert(bytes.end(), mask.values.begin(), mask.values.end());
    write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------- slicing

std::vector<Image2D> extract_slices(const Volume& v, SliceSize size) {
    return extract_slices(v.voxels, size);
}

Volume assemble_volume(const std::vector<Image2D>& slices, const Volume& reference) {
    Volume out = reference;
    out.voxels =
        assemble_grid(slices, reference.voxels.nx, reference.voxels.ny, reference.voxels.nz);
    return out;
}

// ---------------------------------------------------------------- intensity

IntensityStats foreground_stats(std::span<const float> values) {
    double sum = 0.0;
    std::size_t count = 0;
    for (float v : values) {
        if (v != 0.0f) {
            sum += v;
            ++count;
        }
    }
    IntensityStats s;
    if (count == 0) {
        return s;
    }
    s.mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (float v : values) {
        if (v != 0.0f) {
            const double d = v - s.mean;
            sq += d * d;
        }
    }
    s.stddev = std::sqrt(sq / static_cast<double>(count));
    return s;
}

namespace {

bool is_constant(const IntensityStats& s) {
    return !(s.stddev > 1e-12 * std::max(1.0, std::fabs(s.mean)));
}

} // namespace

Volume normalize_intensity(const Volume& v) {
    Volume out = v;
    const IntensityStats s = foreground_stats(v.voxels.values);
    const bool constant = is_constant(s);
    for (auto& x : out.voxels.values) {
        if (x == 0.0f || constant) {
            x = 0.0f;
        } else {
            x = static_cast<float>((x - s.mean) / s.stddev);
        }
    }
    return out;
}

void normalize_slice(Image2D& img, const Mask2D& foreground, const IntensityStats& stats) {
    if (img.size() != foreground.size()) {
        throw ShapeError("normalize_slice: mask shape differs from image");
    }
    const bool constant = is_constant(stats);
    for (std::size_t i = 0; i < img.size(); ++i) {
        if (foreground.values[i] == 0 || constant) {
            img.values[i] = 0.0f;
        } else {
            img.values[i] = static_cast<float>((img.values[i] - stats.mean) / stats.stddev);
        }
    }
}

Mask3D nonzero_mask(const Volume& v) {
    Mask3D m(v.voxels.nx, v.voxels.ny, v.voxels.nz);
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        m.values[i] = v.voxels.values[i] != 0.0f ? 1 : 0;
    }
    return m;
}

// ---------------------------------------------------------------- manifests

std::string to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "val") {
        return Split::val;
    }
    if (s == "test") {
        return Split::test;
    }
    throw ValidationError("unknown split '" + s + "'");
}

std::array<int, 3> Manifest::counts() const {
    std::array<int, 3> c{0, 0, 0};
    for (const auto& e : entries) {
        ++c[static_cast<int>(e.split)];
    }
    return c;
}

std::vector<const ManifestEntry*> Manifest::split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
        if (e.split == s) {
            out.push_back(&e);
        }
    }
    return out;
}

fs::path Manifest::resolve(const fs::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
}

std::vector<int> Manifest::domain_ids() const {
    std::set<int> ids;
    for (const auto& e : entries) {
        for (const auto& v : e.volumes) {
            ids.insert(v.domain_id);
        }
    }
    return {ids.begin(), ids.end()};
}

void Manifest::validate(bool check_files) const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (e.subject_id.empty()) {
            throw ValidationError("manifest " + name + ": entry without subject_id");
        }
        if (!seen.insert(e.subject_id).second) {
            throw ValidationError("manifest " + name + ": subject " + e.subject_id +
                                  " appears more than once");
        }
        if (e.volumes.empty() || e.volumes.size() > 2) {
            throw ValidationError("manifest " + name + ": subject " + e.subject_id +
                                  " must list one or two volumes");
        }
        if (e.volumes.size() == 2 && e.volumes[0].domain_id == e.volumes[1].domain_id) {
            throw ValidationError("manifest " + name + ": pair " + e.subject_id +
                                  " has two volumes from the same domain");
        }
        if ((e.age_years && !(*e.age_years > 0.0)) || (e.tiv_mm3 && !(*e.tiv_mm3 > 0.0))) {
            throw ValidationError("manifest " + name + ": subject " + e.subject_id +
                                  " has non-positive age or TIV");
        }
        if (check_files) {
            for (const auto& v : e.volumes) {
                if (!fs::exists(resolve(v.path))) {
                    throw IoError("manifest " + name + ": missing file " +
                                  resolve(v.path).string());
                }
            }
            if (e.mask && !fs::exists(resolve(*e.mask))) {
                throw IoError("manifest " + name + ": missing file " + resolve(*e.mask).string());
            }
        }
    }
}

Manifest load_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open manifest " + path.string());
    }
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    Manifest m;
    m.base_dir = path.parent_path();
    try {
        m.name = j.value("name", path.stem().string());
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.subject_id = je.at("subject_id").get<std::string>();
            e.split = split_from_string(je.at("split").get<std::string>());
            for (const auto& jv : je.at("volumes")) {
                e.volumes.push_back(
                    {jv.at("path").get<std::string>(), jv.at("domain_id").get<int>()});
            }
            if (je.contains("mask")) {
                e.mask = je.at("mask").get<std::string>();
            }
            if (je.contains("age_years")) {
                e.age_years = je.at("age_years").get<double>();
            }
            if (je.contains("tiv_mm3")) {
                e.tiv_mm3 = je.at("tiv_mm3").get<double>();
            }
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    m.validate(true);
    return m;
}

void save_manifest(const fs::path& path, const Manifest& m) {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["name"] = m.name;
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : m.entries) {
        nlohmann::ordered_json je;
        je["subject_id"] = e.subject_id;
        je["split"] = to_string(e.split);
        je["volumes"] = nlohmann::ordered_json::array();
        for (const auto& v : e.volumes) {
            je["volumes"].push_back({{"path", v.path.generic_string()}, {"domain_id", v.domain_id}});
        }
        if (e.mask) {
            je["mask"] = e.mask->generic_string();
        }
        if (e.age_years) {
            je["age_years"] = *e.age_years;
        }
        if (e.tiv_mm3) {
            je["tiv_mm3"] = *e.tiv_mm3;
        }
        j["entries"].push_back(std::move(je));
    }
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw IoError("cannot write manifest " + path.string());
    }
    os << j.dump(2) << "\n";
}

namespace {

Volume load_member(const Manifest& m, const ManifestEntry& e, const ManifestVolume& mv) {
    Volume v = load_volume(m.resolve(mv.path));
    v.subject_id = e.subject_id;
    v.domain_id = mv.domain_id;
    v.age_years = e.age_years;
    v.tiv_mm3 = e.tiv_mm3;
    return v;
}

} // namespace

LabeledSample load_labeled(const Manifest& m, const ManifestEntry& e) {
    if (e.volumes.size() != 1 || !e.mask) {
        throw ValidationError("subject " + e.subject_id + " is not a labeled entry");
    }
    LabeledSample s;
    s.image = load_member(m, e, e.volumes[0]);
    s.mask = load_mask(m.resolve(*e.mask));
    s.validate();
    return s;
}

PairedSample load_pair(const Manifest& m, const ManifestEntry& e) {
    if (e.volumes.size() != 2) {
        throw ValidationError("subject " + e.subject_id + " is not a paired entry");
    }
    PairedSample p;
    p.image_a = load_member(m, e, e.volumes[0]);
    p.image_b = load_member(m, e, e.volumes[1]);
    p.validate();
    return p;
}

} // namespace pcda
