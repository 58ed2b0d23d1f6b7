#pragma once

// Layers with explicit forward/backward passes. A layer caches what its
// backward pass needs during a training-mode forward; calling backward
// without a preceding training-mode forward is a logic error.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pcda/kernels.hpp"
#include "pcda/tensor.hpp"

namespace pcda::nn {

enum class Mode { train, inference };

/// A named array owned by a layer. Buffers (running statistics) have no gradient.
struct Param {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;
    bool trainable = true;

    static Param zeros(std::vector<int> shape, bool trainable = true);
    [[nodiscard]] std::size_t size() const { return value.size(); }
};

using ParamList = std::vector<std::pair<std::string, Param*>>;

void zero_grad(const ParamList& params);

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(kernels::ConvGeometry geometry, std::mt19937_64& rng);

    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy, bool need_input_grad = true);
    void collect(const std::string& prefix, ParamList& out);

    kernels::ConvGeometry geometry;
    Param weight;
    Param bias;

private:
    Tensor input_;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels, float momentum = 0.1f, float eps = 1e-5f);

    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy);
    void collect(const std::string& prefix, ParamList& out);

    Param gamma;
    Param beta;
    Param running_mean;
    Param running_var;

private:
    float momentum_ = 0.1f;
    float eps_ = 1e-5f;
    Tensor normalized_;
    std::vector<float> inv_std_;
};

/// ReLU when negative_slope == 0, leaky rectifier otherwise.
class Rectifier {
public:
    explicit Rectifier(float negative_slope = 0.0f) : slope_(negative_slope) {}

    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy) const;

private:
    float slope_;
    std::vector<std::uint8_t> positive_;
};

class MaxPool2 {
public:
    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy) const;

private:
    std::vector<int> argmax_;
    int in_h_ = 0;
    int in_w_ = 0;
};

class Upsample2 {
public:
    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy) const;

private:
    int in_h_ = 0;
    int in_w_ = 0;
};

class Linear {
public:
    Linear() = default;
    Linear(int in_features, int out_features, std::mt19937_64& rng);

    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy);
    void collect(const std::string& prefix, ParamList& out);

    int in_features = 0;
    int out_features = 0;
    Param weight;
    Param bias;

private:
    Tensor input_;
};

/// Inverted dropout; identity in inference mode.
class Dropout {
public:
    Dropout(double p, std::uint64_t seed) : p_(p), rng_(seed) {}

    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy) const;

private:
    double p_;
    std::mt19937_64 rng_;
    std::vector<float> scale_;
};

/// Conv -> BN -> ReLU, twice.
class DoubleConv {
public:
    DoubleConv() = default;
    DoubleConv(int in_channels, int out_channels, std::mt19937_64& rng);

    Tensor forward(const Tensor& x, Mode mode);
    Tensor backward(const Tensor& dy);
    void collect(const std::string& prefix, ParamList& out);

private:
    Conv2d conv1_;
    BatchNorm2d bn1_;
    Rectifier act1_;
    Conv2d conv2_;
    BatchNorm2d bn2_;
    Rectifier act2_;
};

} // namespace pcda::nn
