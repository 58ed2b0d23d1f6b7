#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcda/errors.hpp"
#include "pcda/nn.hpp"
#include "pcda/tensor.hpp"

namespace pcda {

/// Where the segmenter exposes its feature representation h.
enum class FeatureTap { decoder, bottleneck };

struct SegmenterConfig {
    int depth = 4;
    int base_filters = 32;
    int max_filters = 256;
    int in_channels = 1;
    int out_channels = 1;
    FeatureTap tap = FeatureTap::decoder;

    /// Throws ConfigError unless depth >= 1 and widths double up to max_filters.
    void validate() const;
    /// Channel width of each level, shallowest first.
    [[nodiscard]] std::vector<int> widths() const;
    [[nodiscard]] int feature_channels() const;

    [[nodiscard]] nlohmann::json to_json() const;
    static SegmenterConfig from_json(const nlohmann::json& j);
};

struct SegmenterOutput {
    Tensor probabilities;  ///< (N, 1, H, W), strictly inside (0, 1)
    Tensor features;       ///< h
};

/// U-Net with max-pool downsampling and (1x1 conv, bilinear 2x) upsampling.
/// Inputs whose spatial size is not a multiple of 2^(depth-1) are zero-padded
/// at the bottom/right and the outputs cropped back.
class Segmenter {
public:
    Segmenter(SegmenterConfig config, std::uint64_t seed);

    SegmenterOutput forward(const Tensor& x, nn::Mode mode);

    /// Backpropagates d(loss)/d(probabilities) and, optionally, an extra gradient
    /// arriving at the feature tap. Parameter gradients accumulate; returns d/dx.
    Tensor backward(const Tensor& grad_probabilities, const Tensor* grad_features = nullptr);

    nn::ParamList parameters();
    [[nodiscard]] std::size_t parameter_count();
    [[nodiscard]] const SegmenterConfig& config() const { return config_; }

private:
    struct UpBlock {
        nn::Conv2d reduce;
        nn::Upsample2 upsample;
        nn::DoubleConv block;
    };

    SegmenterConfig config_;
    std::vector<nn::DoubleConv> encoder_;
    std::vector<nn::MaxPool2> pools_;
    std::vector<UpBlock> decoder_;  // decoder_[i] produces level i
    nn::Conv2d head_;

    // forward-pass bookkeeping for backward
    std::vector<int> skip_channels_;
    Tensor logits_;
    Tensor probabilities_;
    int in_h_ = 0;
    int in_w_ = 0;
    int padded_h_ = 0;
    int padded_w_ = 0;
};

/// Identity forward; scales the backward gradient by -beta.
class GradientReversal {
public:
    explicit GradientReversal(double beta);

    [[nodiscard]] double beta() const { return beta_; }
    [[nodiscard]] Tensor forward(const Tensor& h) const { return h; }
    [[nodiscard]] Tensor backward(const Tensor& upstream) const;

private:
    double beta_;
};

template <std::floating_point T>
std::vector<T> grl_forward(std::span<const T> h, double beta) {
    if (!(beta >= 0.0)) {
        throw ConfigError("gradient reversal: beta must be non-negative");
    }
    return {h.begin(), h.end()};
}

template <std::floating_point T>
std::vector<T> grl_backward(std::span<const T> upstream, double beta) {
    if (!(beta >= 0.0)) {
        throw ConfigError("gradient reversal: beta must be non-negative");
    }
    std::vector<T> out(upstream.size());
    for (std::size_t i = 0; i < upstream.size(); ++i) {
        out[i] = static_cast<T>(-beta) * upstream[i];
    }
    return out;
}

struct DiscriminatorConfig {
    int in_channels = 32;
    int in_h = 64;
    int in_w = 64;
    int conv_layers = 4;
    int kernel = 3;
    int stride = 2;
    int start_channels = 4;
    std::vector<int> hidden_sizes{64, 32};
    int n_domains = 2;
    double dropout_p = 0.5;
    double negative_slope = 0.2;

    void validate() const;
    /// Output channels of each strided convolution, e.g. (4, 8, 16, 32).
    [[nodiscard]] std::vector<int> channel_sequence() const;
};

/// Domain classifier over the segmenter features: strided conv/BN/leaky blocks,
/// then fully connected layers with ReLU and dropout, ending in n_domains logits.
class Discriminator {
public:
    Discriminator(DiscriminatorConfig config, std::uint64_t seed);

    /// Returns logits shaped (N, n_domains, 1, 1).
    Tensor forward(const Tensor& h, nn::Mode mode);
    /// Accumulates parameter gradients; returns d/dh.
    Tensor backward(const Tensor& grad_logits);

    nn::ParamList parameters();
    [[nodiscard]] const DiscriminatorConfig& config() const { return config_; }

private:
    DiscriminatorConfig config_;
    std::vector<nn::Conv2d> convs_;
    std::vector<nn::BatchNorm2d> norms_;
    std::vector<nn::Rectifier> conv_acts_;
    std::vector<nn::Linear> fcs_;
    std::vector<nn::Rectifier> fc_acts_;
    std::vector<nn::Dropout> dropouts_;
    int flat_c_ = 0;
    int flat_h_ = 0;
    int flat_w_ = 0;
    int batch_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// File layout (little-endian):
//   8 bytes   magic "PCDACKPT"
//   uint32    format version (1)
//   uint64    header length L
//   L bytes   UTF-8 JSON header:
//               { "epoch": int, "val_score": real, "config_hash": str,
//                 "metadata": {...},
//                 "arrays": [ {"name": str, "shape": [int...]}, ... ] }
//   float32 payload for each array, in header order, row-major.

struct NamedArray {
    std::vector<int> shape;
    std::vector<float> values;

    bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
    std::map<std::string, NamedArray> arrays;
    int epoch = 0;
    double val_score = 0.0;
    std::string config_hash;
    nlohmann::json metadata = nlohmann::json::object();
};

/// Copies every named array (parameters and buffers) under `prefix/`.
void store_parameters(const nn::ParamList& params, const std::string& prefix, Checkpoint& ckpt);
/// Restores arrays under `prefix/`; throws FormatError on missing names or shape mismatch.
void load_parameters(const Checkpoint& ckpt, const std::string& prefix, const nn::ParamList& params);

Checkpoint make_checkpoint(Segmenter& model, int epoch, double val_score,
                           const std::string& config_hash);
/// Builds a segmenter from the config stored in the checkpoint metadata.
Segmenter segmenter_from_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace pcda
