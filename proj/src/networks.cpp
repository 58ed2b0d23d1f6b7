#include "pcda/networks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace pcda {

// ---------------------------------------------------------------- segmenter

void SegmenterConfig::validate() const {
    if (depth < 1) {
        throw ConfigError("segmenter: depth must be >= 1");
    }
    if (base_filters < 1 || in_channels < 1 || out_channels != 1) {
        throw ConfigError("segmenter: invalid channel configuration");
    }
    if (base_filters * (1 << (depth - 1)) != max_filters) {
        throw ConfigError("segmenter: base_filters * 2^(depth-1) must equal max_filters (" +
                          std::to_string(base_filters) + ", " + std::to_string(depth) + ", " +
                          std::to_string(max_filters) + ")");
    }
}

std::vector<int> SegmenterConfig::widths() const {
    std::vector<int> w(static_cast<std::size_t>(depth));
    for (int i = 0; i < depth; ++i) {
        w[i] = base_filters << i;
    }
    return w;
}

int SegmenterConfig::feature_channels() const {
    return tap == FeatureTap::decoder ? base_filters : max_filters;
}

nlohmann::json SegmenterConfig::to_json() const {
    return {{"depth", depth},
            {"base_filters", base_filters},
            {"max_filters", max_filters},
            {"in_channels", in_channels},
            {"out_channels", out_channels},
            {"feature_tap", tap == FeatureTap::decoder ? "decoder" : "bottleneck"}};
}

SegmenterConfig SegmenterConfig::from_json(const nlohmann::json& j) {
    SegmenterConfig c;
    c.depth = j.value("depth", c.depth);
    c.base_filters = j.value("base_filters", c.base_filters);
    c.max_filters = j.value("max_filters", c.base_filters * (1 << (c.depth - 1)));
    c.in_channels = j.value("in_channels", c.in_channels);
    c.out_channels = j.value("out_channels", c.out_channels);
    const auto tap = j.value("feature_tap", std::string("decoder"));
    if (tap == "decoder") {
        c.tap = FeatureTap::decoder;
    } else if (tap == "bottleneck") {
        c.tap = FeatureTap::bottleneck;
    } else {
        throw ConfigError("segmenter: unknown feature_tap '" + tap + "'");
    }
    return c;
}

namespace {

Tensor pad_spatial(const Tensor& x, int h, int w) {
    if (x.h == h && x.w == w) {
        return x;
    }
    Tensor out(x.n, x.c, h, w);
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            for (int y = 0; y < x.h; ++y) {
                std::copy_n(&x.data[((static_cast<std::size_t>(n) * x.c + c) * x.h + y) * x.w],
                            x.w, &out.at(n, c, y, 0));
            }
        }
    }
    return out;
}

Tensor crop_spatial(const Tensor& x, int h, int w) {
    if (x.h == h && x.w == w) {
        return x;
    }
    Tensor out(x.n, x.c, h, w);
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            for (int y = 0; y < h; ++y) {
                std::copy_n(&x.at(n, c, y, 0), w,
                            &out.data[((static_cast<std::size_t>(n) * x.c + c) * h + y) * w]);
            }
        }
    }
    return out;
}

constexpr float kProbFloor = 1e-7f;

} // namespace

Segmenter::Segmenter(SegmenterConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const auto widths = config_.widths();
    int prev = config_.in_channels;
    for (int i = 0; i < config_.depth; ++i) {
        encoder_.emplace_back(prev, widths[i], rng);
        prev = widths[i];
    }
    pools_.resize(static_cast<std::size_t>(config_.depth - 1));
    decoder_.resize(static_cast<std::size_t>(config_.depth - 1));
    for (int i = config_.depth - 2; i >= 0; --i) {
        decoder_[i].reduce = nn::Conv2d({widths[i + 1], widths[i], 1, 1, 0}, rng);
        decoder_[i].block = nn::DoubleConv(2 * widths[i], widths[i], rng);
    }
    head_ = nn::Conv2d({widths[0], config_.out_channels, 1, 1, 0}, rng);
}

SegmenterOutput Segmenter::forward(const Tensor& x, nn::Mode mode) {
    if (x.c != config_.in_channels) {
        throw ShapeError("segmenter: expected " + std::to_string(config_.in_channels) +
                         " input channels, got " + x.shape_string());
    }
    if (!all_finite(x.data)) {
        throw ValidationError("segmenter: non-finite input");
    }
    const int multiple = 1 << (config_.depth - 1);
    in_h_ = x.h;
    in_w_ = x.w;
    padded_h_ = (x.h + multiple - 1) / multiple * multiple;
    padded_w_ = (x.w + multiple - 1) / multiple * multiple;

    std::vector<Tensor> skips(static_cast<std::size_t>(config_.depth));
    Tensor t = pad_spatial(x, padded_h_, padded_w_);
    for (int i = 0; i < config_.depth; ++i) {
        if (i > 0) {
            t = pools_[i - 1].forward(t, mode);
        }
        t = encoder_[i].forward(t, mode);
        if (i < config_.depth - 1) {
            skips[i] = t;
        }
    }
    Tensor bottleneck = config_.tap == FeatureTap::bottleneck ? t : Tensor{};
    skip_channels_.assign(static_cast<std::size_t>(config_.depth), 0);
    for (int i = config_.depth - 2; i >= 0; --i) {
        Tensor u = decoder_[i].upsample.forward(decoder_[i].reduce.forward(t, mode), mode);
        skip_channels_[i] = skips[i].c;
        t = decoder_[i].block.forward(concat_channels(skips[i], u), mode);
    }
    Tensor logits = head_.forward(t, mode);
    Tensor probs(logits.n, logits.c, logits.h, logits.w);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const float p = 1.0f / (1.0f + std::exp(-logits.data[i]));
        probs.data[i] = std::clamp(p, kProbFloor, 1.0f - kProbFloor);
    }
    if (mode == nn::Mode::train) {
        probabilities_ = probs;
    }
    SegmenterOutput out;
    out.probabilities = crop_spatial(probs, in_h_, in_w_);
    out.features = config_.tap == FeatureTap::decoder ? crop_spatial(t, in_h_, in_w_)
                                                       : std::move(bottleneck);
    return out;
}

Tensor Segmenter::backward(const Tensor& grad_probabilities, const Tensor* grad_features) {
    Tensor gp = pad_spatial(grad_probabilities, padded_h_, padded_w_);
    if (!gp.same_shape(probabilities_)) {
        throw ShapeError("segmenter backward: gradient shape " + grad_probabilities.shape_string());
    }
    for (std::size_t i = 0; i < gp.size(); ++i) {
        const float p = probabilities_.data[i];
        gp.data[i] *= p * (1.0f - p);
    }
    Tensor g = head_.backward(gp);
    if (grad_features != nullptr && config_.tap == FeatureTap::decoder) {
        Tensor gf = pad_spatial(*grad_features, padded_h_, padded_w_);
        if (!gf.same_shape(g)) {
            throw ShapeError("segmenter backward: feature gradient shape " +
                             grad_features->shape_string());
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            g.data[i] += gf.data[i];
        }
    }
    std::vector<Tensor> skip_grads(static_cast<std::size_t>(config_.depth));
    for (int i = 0; i < config_.depth - 1; ++i) {
        Tensor gcat = decoder_[i].block.backward(g);
        Tensor gu;
        split_channels(gcat, skip_channels_[i], skip_grads[i], gu);
        g = decoder_[i].reduce.backward(decoder_[i].upsample.backward(gu));
    }
    if (grad_features != nullptr && config_.tap == FeatureTap::bottleneck) {
        if (!grad_features->same_shape(g)) {
            throw ShapeError("segmenter backward: feature gradient shape " +
                             grad_features->shape_string());
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            g.data[i] += grad_features->data[i];
        }
    }
    for (int i = config_.depth - 1; i >= 0; --i) {
        g = encoder_[i].backward(g);
        if (i > 0) {
            g = pools_[i - 1].backward(g);
            const Tensor& s = skip_grads[i - 1];
            for (std::size_t k = 0; k < g.size(); ++k) {
                g.data[k] += s.data[k];
            }
        }
    }
    return crop_spatial(g, in_h_, in_w_);
}

nn::ParamList Segmenter::parameters() {
    nn::ParamList out;
    for (int i = 0; i < config_.depth; ++i) {
        encoder_[i].collect("enc" + std::to_string(i), out);
    }
    for (int i = 0; i < config_.depth - 1; ++i) {
        decoder_[i].reduce.collect("dec" + std::to_string(i) + "/reduce", out);
        decoder_[i].block.collect("dec" + std::to_string(i) + "/block", out);
    }
    head_.collect("head", out);
    return out;
}

std::size_t Segmenter::parameter_count() {
    std::size_t total = 0;
    for (const auto& [name, p] : parameters()) {
        if (p->trainable) {
            total += p->size();
        }
    }
    return total;
}

// ---------------------------------------------------------------- GRL

GradientReversal::GradientReversal(double beta) : beta_(beta) {
    if (!(beta >= 0.0)) {
        throw ConfigError("gradient reversal: beta must be non-negative");
    }
}

Tensor GradientReversal::backward(const Tensor& upstream) const {
    Tensor out = upstream;
    const auto scale = static_cast<float>(-beta_);
    for (auto& v : out.data) {
        v *= scale;
    }
    return out;
}

// ---------------------------------------------------------------- discriminator

void DiscriminatorConfig::validate() const {
    if (conv_layers < 1 || kernel < 1 || stride < 1 || start_channels < 1) {
        throw ConfigError("discriminator: invalid convolution settings");
    }
    if (n_domains < 2) {
        throw ConfigError("discriminator: n_domains must be >= 2");
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
        throw ConfigError("discriminator: dropout_p must be in [0, 1)");
    }
    const int minimum = 1 << conv_layers;
    if (in_h < minimum || in_w < minimum) {
        throw ShapeError("discriminator: input " + std::to_string(in_h) + "x" +
                         std::to_string(in_w) + " is smaller than " + std::to_string(minimum) +
                         "x" + std::to_string(minimum));
    }
}

std::vector<int> DiscriminatorConfig::channel_sequence() const {
    std::vector<int> seq;
    for (int i = 0; i < conv_layers; ++i) {
        seq.push_back(start_channels << i);
    }
    return seq;
}

Discriminator::Discriminator(DiscriminatorConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    int c = config_.in_channels;
    int h = config_.in_h;
    int w = config_.in_w;
    const int pad = config_.kernel / 2;
    for (int out : config_.channel_sequence()) {
        kernels::ConvGeometry g{c, out, config_.kernel, config_.stride, pad};
        convs_.emplace_back(g, rng);
        norms_.emplace_back(out);
        conv_acts_.emplace_back(static_cast<float>(config_.negative_slope));
        h = g.out_h(h);
        w = g.out_w(w);
        c = out;
    }
    flat_c_ = c;
    flat_h_ = h;
    flat_w_ = w;
    int features = c * h * w;
    std::uint64_t dropout_seed = seed ^ 0x9e3779b97f4a7c15ULL;
    for (int hidden : config_.hidden_sizes) {
        fcs_.emplace_back(features, hidden, rng);
        fc_acts_.emplace_back(0.0f);
        dropouts_.emplace_back(config_.dropout_p, dropout_seed++);
        features = hidden;
    }
    fcs_.emplace_back(features, config_.n_domains, rng);
}

Tensor Discriminator::forward(const Tensor& h, nn::Mode mode) {
    if (h.c != config_.in_channels || h.h != config_.in_h || h.w != config_.in_w) {
        throw ShapeError("discriminator: expected (" + std::to_string(config_.in_channels) + "," +
                         std::to_string(config_.in_h) + "," + std::to_string(config_.in_w) +
                         ") features, got " + h.shape_string());
    }
    batch_ = h.n;
    Tensor t = h;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        t = conv_acts_[i].forward(norms_[i].forward(convs_[i].forward(t, mode), mode), mode);
    }
    t.c = static_cast<int>(t.sample_size());
    t.h = 1;
    t.w = 1;
    for (std::size_t i = 0; i + 1 < fcs_.size(); ++i) {
        t = dropouts_[i].forward(fc_acts_[i].forward(fcs_[i].forward(t, mode), mode), mode);
    }
    return fcs_.back().forward(t, mode);
}

Tensor Discriminator::backward(const Tensor& grad_logits) {
    Tensor g = fcs_.back().backward(grad_logits);
    for (std::size_t i = fcs_.size() - 1; i-- > 0;) {
        g = fcs_[i].backward(fc_acts_[i].backward(dropouts_[i].backward(g)));
    }
    g.c = flat_c_;
    g.h = flat_h_;
    g.w = flat_w_;
    for (std::size_t i = convs_.size(); i-- > 0;) {
        g = convs_[i].backward(norms_[i].backward(conv_acts_[i].backward(g)));
    }
    return g;
}

nn::ParamList Discriminator::parameters() {
    nn::ParamList out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        convs_[i].collect("conv" + std::to_string(i), out);
        norms_[i].collect("bn" + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < fcs_.size(); ++i) {
        fcs_[i].collect("fc" + std::to_string(i), out);
    }
    return out;
}

// ---------------------------------------------------------------- checkpoints

void store_parameters(const nn::ParamList& params, const std::string& prefix, Checkpoint& ckpt) {
    for (const auto& [name, p] : params) {
        ckpt.arrays[prefix + "/" + name] = NamedArray{p->shape, p->value};
    }
}

void load_parameters(const Checkpoint& ckpt, const std::string& prefix,
                     const nn::ParamList& params) {
    for (const auto& [name, p] : params) {
        const auto it = ckpt.arrays.find(prefix + "/" + name);
        if (it == ckpt.arrays.end()) {
            throw FormatError("checkpoint: missing array " + prefix + "/" + name);
        }
        if (it->second.shape != p->shape || it->second.values.size() != p->value.size()) {
            throw FormatError("checkpoint: shape mismatch for " + prefix + "/" + name);
        }
        p->value = it->second.values;
    }
}

Checkpoint make_checkpoint(Segmenter& model, int epoch, double val_score,
                           const std::string& config_hash) {
    Checkpoint ckpt;
    ckpt.epoch = epoch;
    ckpt.val_score = val_score;
    ckpt.config_hash = config_hash;
    ckpt.metadata["segmenter"] = model.config().to_json();
    store_parameters(model.parameters(), "segmenter", ckpt);
    return ckpt;
}

Segmenter segmenter_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.metadata.contains("segmenter")) {
        throw FormatError("checkpoint: no segmenter configuration in metadata");
    }
    Segmenter model(SegmenterConfig::from_json(ckpt.metadata["segmenter"]), 0);
    load_parameters(ckpt, "segmenter", model.parameters());
    return model;
}

namespace {

constexpr char kMagic[8] = {'P', 'C', 'D', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) {
        throw FormatError("checkpoint: truncated file");
    }
    return v;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["epoch"] = ckpt.epoch;
    header["val_score"] = ckpt.val_score;
    header["config_hash"] = ckpt.config_hash;
    header["metadata"] = ckpt.metadata;
    header["arrays"] = nlohmann::json::array();
    for (const auto& [name, arr] : ckpt.arrays) {
        header["arrays"].push_back({{"name", name}, {"shape", arr.shape}});
    }
    const std::string text = header.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    os.write(kMagic, sizeof(kMagic));
    write_pod(os, kVersion);
    write_pod(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, arr] : ckpt.arrays) {
        os.write(reinterpret_cast<const char*>(arr.values.data()),
                 static_cast<std::streamsize>(arr.values.size() * sizeof(float)));
    }
    if (!os) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("not a checkpoint file: " + path.string());
    }
    if (read_pod<std::uint32_t>(is) != kVersion) {
        throw FormatError("unsupported checkpoint version in " + path.string());
    }
    const auto len = read_pod<std::uint64_t>(is);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) {
        throw FormatError("checkpoint: truncated header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    }
    Checkpoint ckpt;
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.val_score = header.at("val_score").get<double>();
    ckpt.config_hash = header.at("config_hash").get<std::string>();
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& entry : header.at("arrays")) {
        NamedArray arr;
        arr.shape = entry.at("shape").get<std::vector<int>>();
        std::size_t total = 1;
        for (int d : arr.shape) {
            total *= static_cast<std::size_t>(d);
        }
        arr.values.resize(total);
        is.read(reinterpret_cast<char*>(arr.values.data()),
                static_cast<std::streamsize>(total * sizeof(float)));
        if (!is) {
            throw FormatError("checkpoint: truncated payload");
        }
        ckpt.arrays[entry.at("name").get<std::string>()] = std::move(arr);
    }
    return ckpt;
}

} // namespace pcda
