#pragma once

// Compute kernels for the network layers. The default entry points are the
// OpenMP/BLAS versions used in training; `pcda::kernels::serial` holds direct
// loop implementations kept as references for tests and benchmarks.

#include <span>
#include <vector>

#include "pcda/tensor.hpp"

namespace pcda::kernels {

struct ConvGeometry {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 3;
    int stride = 1;
    int pad = 1;

    [[nodiscard]] int out_h(int h) const { return (h + 2 * pad - kernel) / stride + 1; }
    [[nodiscard]] int out_w(int w) const { return (w + 2 * pad - kernel) / stride + 1; }
    [[nodiscard]] int patch() const { return in_channels * kernel * kernel; }
};

/// y = conv(x, weight) + bias. weight is [out][in][k][k]; y is resized.
void conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                    const ConvGeometry& g, Tensor& y);

/// Accumulates into dweight/dbias. dx (if non-null) is overwritten with the input gradient.
void conv2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& dy,
                     const ConvGeometry& g, Tensor* dx, std::span<float> dweight,
                     std::span<float> dbias);

/// 2x2 max pooling with stride 2. Input dims must be even.
void maxpool2_forward(const Tensor& x, Tensor& y, std::vector<int>& argmax);
void maxpool2_backward(const Tensor& dy, const std::vector<int>& argmax, int in_h, int in_w,
                       Tensor& dx);

/// Bilinear 2x upsampling with half-pixel centers (edge-clamped).
void upsample2_forward(const Tensor& x, Tensor& y);
void upsample2_backward(const Tensor& dy, int in_h, int in_w, Tensor& dx);

/// out[i][j] = sum_k a[i][k] * b[j][k] (row-major, b transposed): y = x * W^T for dense layers.
void dense_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                   int out_features, Tensor& y);
void dense_backward(const Tensor& x, std::span<const float> weight, const Tensor& dy,
                    int out_features, Tensor* dx, std::span<float> dweight, std::span<float> dbias);

namespace serial {

void conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                    const ConvGeometry& g, Tensor& y);
void conv2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& dy,
                     const ConvGeometry& g, Tensor* dx, std::span<float> dweight,
                     std::span<float> dbias);

} // namespace serial

/// Sets OpenMP and BLAS to one thread each; used for bit-reproducible runs.
void force_single_thread();

/// True when PCDA_DETERMINISTIC is set to a non-empty value other than "0".
bool deterministic_mode_requested();

} // namespace pcda::kernels
