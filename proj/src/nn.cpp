#include "pcda/nn.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>

#include "pcda/errors.hpp"

namespace pcda::nn {

Param Param::zeros(std::vector<int> shape, bool trainable) {
    Param p;
    std::size_t total = 1;
    for (int d : shape) {
        total *= static_cast<std::size_t>(d);
    }
    p.shape = std::move(shape);
    p.value.assign(total, 0.0f);
    if (trainable) {
        p.grad.assign(total, 0.0f);
    }
    p.trainable = trainable;
    return p;
}

void zero_grad(const ParamList& params) {
    for (const auto& [name, p] : params) {
        std::fill(p->grad.begin(), p->grad.end(), 0.0f);
    }
}

Conv2d::Conv2d(kernels::ConvGeometry g, std::mt19937_64& rng) : geometry(g) {
    weight = Param::zeros({g.out_channels, g.in_channels, g.kernel, g.kernel});
    bias = Param::zeros({g.out_channels});
    // He initialization for rectifier networks.
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(g.patch())));
    for (auto& v : weight.value) {
        v = dist(rng);
    }
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
    Tensor y;
    kernels::conv2d_forward(x, weight.value, bias.value, geometry, y);
    if (mode == Mode::train) {
        input_ = x;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& dy, bool need_input_grad) {
    Tensor dx;
    kernels::conv2d_backward(input_, weight.value, dy, geometry, need_input_grad ? &dx : nullptr,
                             weight.grad, bias.grad);
    return dx;
}

void Conv2d::collect(const std::string& prefix, ParamList& out) {
    out.emplace_back(prefix + "/weight", &weight);
    out.emplace_back(prefix + "/bias", &bias);
}

BatchNorm2d::BatchNorm2d(int channels, float momentum, float eps)
    : momentum_(momentum), eps_(eps) {
    gamma = Param::zeros({channels});
    std::fill(gamma.value.begin(), gamma.value.end(), 1.0f);
    beta = Param::zeros({channels});
    running_mean = Param::zeros({channels}, false);
    running_var = Param::zeros({channels}, false);
    std::fill(running_var.value.begin(), running_var.value.end(), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
    const int channels = static_cast<int>(gamma.size());
    if (x.c != channels) {
        throw ShapeError("batchnorm: channel mismatch " + x.shape_string());
    }
    Tensor y(x.n, x.c, x.h, x.w);
    const std::size_t plane = x.plane();
    const double count = static_cast<double>(x.n) * static_cast<double>(plane);
    if (mode == Mode::inference) {
#pragma omp parallel for schedule(static)
        for (int c = 0; c < channels; ++c) {
            const float scale = gamma.value[c] / std::sqrt(running_var.value[c] + eps_);
            const float shift = beta.value[c] - running_mean.value[c] * scale;
            for (int n = 0; n < x.n; ++n) {
                const float* src = x.data.data() + (static_cast<std::size_t>(n) * x.c + c) * plane;
                float* dst = y.data.data() + (static_cast<std::size_t>(n) * x.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    dst[i] = src[i] * scale + shift;
                }
            }
        }
        return y;
    }
    normalized_ = Tensor(x.n, x.c, x.h, x.w);
    inv_std_.assign(channels, 0.0f);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        double sum = 0.0;
        double sq = 0.0;
        for (int n = 0; n < x.n; ++n) {
            const float* src = x.data.data() + (static_cast<std::size_t>(n) * x.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum += src[i];
                sq += static_cast<double>(src[i]) * src[i];
            }
        }
        const double mean = sum / count;
        const double var = std::max(sq / count - mean * mean, 0.0);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
        inv_std_[c] = inv;
        for (int n = 0; n < x.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * x.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const float xh = (x.data[off + i] - static_cast<float>(mean)) * inv;
                normalized_.data[off + i] = xh;
                y.data[off + i] = xh * gamma.value[c] + beta.value[c];
            }
        }
        const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
        running_mean.value[c] =
            (1.0f - momentum_) * running_mean.value[c] + momentum_ * static_cast<float>(mean);
        running_var.value[c] =
            (1.0f - momentum_) * running_var.value[c] + momentum_ * static_cast<float>(unbiased);
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
    const int channels = static_cast<int>(gamma.size());
    Tensor dx(dy.n, dy.c, dy.h, dy.w);
    const std::size_t plane = dy.plane();
    const double count = static_cast<double>(dy.n) * static_cast<double>(plane);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xh = 0.0;
        for (int n = 0; n < dy.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * dy.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_dy += dy.data[off + i];
                sum_dy_xh += static_cast<double>(dy.data[off + i]) * normalized_.data[off + i];
            }
        }
        gamma.grad[c] += static_cast<float>(sum_dy_xh);
        beta.grad[c] += static_cast<float>(sum_dy);
        const float k = gamma.value[c] * inv_std_[c];
        const auto mean_dy = static_cast<float>(sum_dy / count);
        const auto mean_dy_xh = static_cast<float>(sum_dy_xh / count);
        for (int n = 0; n < dy.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * dy.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                dx.data[off + i] =
                    k * (dy.data[off + i] - mean_dy - normalized_.data[off + i] * mean_dy_xh);
            }
        }
    }
    return dx;
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) {
    out.emplace_back(prefix + "/gamma", &gamma);
    out.emplace_back(prefix + "/beta", &beta);
    out.emplace_back(prefix + "/running_mean", &running_mean);
    out.emplace_back(prefix + "/running_var", &running_var);
}

Tensor Rectifier::forward(const Tensor& x, Mode mode) {
    Tensor y(x.n, x.c, x.h, x.w);
    const auto total = static_cast<std::ptrdiff_t>(x.size());
    if (mode == Mode::train) {
        positive_.assign(x.size(), 0);
    }
    const bool keep = mode == Mode::train;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        const float v = x.data[i];
        const bool pos = v > 0.0f;
        y.data[i] = pos ? v : v * slope_;
        if (keep) {
            positive_[i] = pos ? 1 : 0;
        }
    }
    return y;
}

Tensor Rectifier::backward(const Tensor& dy) const {
    Tensor dx(dy.n, dy.c, dy.h, dy.w);
    const auto total = static_cast<std::ptrdiff_t>(dy.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        dx.data[i] = positive_[i] != 0 ? dy.data[i] : dy.data[i] * slope_;
    }
    return dx;
}

Tensor MaxPool2::forward(const Tensor& x, Mode mode) {
    Tensor y;
    std::vector<int> arg;
    kernels::maxpool2_forward(x, y, arg);
    if (mode == Mode::train) {
        argmax_ = std::move(arg);
        in_h_ = x.h;
        in_w_ = x.w;
    }
    return y;
}

Tensor MaxPool2::backward(const Tensor& dy) const {
    Tensor dx;
    kernels::maxpool2_backward(dy, argmax_, in_h_, in_w_, dx);
    return dx;
}

Tensor Upsample2::forward(const Tensor& x, Mode mode) {
    Tensor y;
    kernels::upsample2_forward(x, y);
    if (mode == Mode::train) {
        in_h_ = x.h;
        in_w_ = x.w;
    }
    return y;
}

Tensor Upsample2::backward(const Tensor& dy) const {
    Tensor dx;
    kernels::upsample2_backward(dy, in_h_, in_w_, dx);
    return dx;
}

Linear::Linear(int in, int out, std::mt19937_64& rng) : in_features(in), out_features(out) {
    weight = Param::zeros({out, in});
    bias = Param::zeros({out});
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(in)));
    for (auto& v : weight.value) {
        v = dist(rng);
    }
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
    if (static_cast<int>(x.sample_size()) != in_features) {
        throw ShapeError("linear: expected " + std::to_string(in_features) + " features, got " +
                         x.shape_string());
    }
    Tensor y;
    kernels::dense_forward(x, weight.value, bias.value, out_features, y);
    if (mode == Mode::train) {
        input_ = x;
    }
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    Tensor dx;
    kernels::dense_backward(input_, weight.value, dy, out_features, &dx, weight.grad, bias.grad);
    return dx;
}

void Linear::collect(const std::string& prefix, ParamList& out) {
    out.emplace_back(prefix + "/weight", &weight);
    out.emplace_back(prefix + "/bias", &bias);
}

Tensor Dropout::forward(const Tensor& x, Mode mode) {
    if (mode == Mode::inference || p_ <= 0.0) {
        scale_.assign(x.size(), 1.0f);
        return x;
    }
    std::bernoulli_distribution keep(1.0 - p_);
    const auto s = static_cast<float>(1.0 / (1.0 - p_));
    scale_.resize(x.size());
    Tensor y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        scale_[i] = keep(rng_) ? s : 0.0f;
        y.data[i] *= scale_[i];
    }
    return y;
}

Tensor Dropout::backward(const Tensor& dy) const {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        dx.data[i] *= scale_[i];
    }
    return dx;
}

DoubleConv::DoubleConv(int in_channels, int out_channels, std::mt19937_64& rng)
    : conv1_({in_channels, out_channels, 3, 1, 1}, rng), bn1_(out_channels),
      conv2_({out_channels, out_channels, 3, 1, 1}, rng), bn2_(out_channels) {}

Tensor DoubleConv::forward(const Tensor& x, Mode mode) {
    Tensor t = act1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
    return act2_.forward(bn2_.forward(conv2_.forward(t, mode), mode), mode);
}

Tensor DoubleConv::backward(const Tensor& dy) {
    Tensor g = conv2_.backward(bn2_.backward(act2_.backward(dy)));
    return conv1_.backward(bn1_.backward(act1_.backward(g)));
}

void DoubleConv::collect(const std::string& prefix, ParamList& out) {
    conv1_.collect(prefix + "/conv1", out);
    bn1_.collect(prefix + "/bn1", out);
    conv2_.collect(prefix + "/conv2", out);
    bn2_.collect(prefix + "/bn2", out);
}

} // namespace pcda::nn
