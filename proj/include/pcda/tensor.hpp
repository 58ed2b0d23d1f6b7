#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace pcda {

/// Dense NCHW float tensor. Lower-rank data uses trailing unit dimensions.
struct Tensor {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    [[nodiscard]] std::size_t size() const { return data.size(); }
    [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    [[nodiscard]] std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
    [[nodiscard]] bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    float& at(int in, int ic, int iy, int ix) {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    [[nodiscard]] const float& at(int in, int ic, int iy, int ix) const {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }

    std::span<float> sample(int in) {
        return {data.data() + static_cast<std::size_t>(in) * sample_size(), sample_size()};
    }
    [[nodiscard]] std::span<const float> sample(int in) const {
        return {data.data() + static_cast<std::size_t>(in) * sample_size(), sample_size()};
    }

    [[nodiscard]] std::string shape_string() const;
};

/// Samples [first, first + count) of `t` as a new tensor.
Tensor slice_batch(const Tensor& t, int first, int count);

/// Stacks tensors along the batch axis; all must share c/h/w.
Tensor concat_batch(std::span<const Tensor> parts);

/// Stacks tensors along the channel axis; all must share n/h/w.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Inverse of concat_channels: first `channels_a` channels go to `a`.
void split_channels(const Tensor& t, int channels_a, Tensor& a, Tensor& b);

bool all_finite(std::span<const float> v);

} // namespace pcda
