#include "pcda/kernels.hpp"

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string_view>

#include "pcda/errors.hpp"

extern "C" void openblas_set_num_threads(int);

namespace pcda::kernels {

namespace {

// Unfolds one sample into a [patch x out_h*out_w] column matrix.
void im2col(const float* x, int h, int w, const ConvGeometry& g, int oh, int ow, float* col) {
    const int k = g.kernel;
    const int rows = g.patch();
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const int c = r / (k * k);
        const int ky = (r / k) % k;
        const int kx = r % k;
        const float* plane = x + static_cast<std::size_t>(c) * h * w;
        float* dst = col + static_cast<std::size_t>(r) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            float* row = dst + static_cast<std::size_t>(oy) * ow;
            if (iy < 0 || iy >= h) {
                std::fill_n(row, ow, 0.0f);
                continue;
            }
            const float* src = plane + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                row[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
            }
        }
    }
}

// Adjoint of im2col: scatters column gradients back into one sample.
void col2im(const float* col, int h, int w, const ConvGeometry& g, int oh, int ow, float* x) {
    const int k = g.kernel;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < g.in_channels; ++c) {
        float* plane = x + static_cast<std::size_t>(c) * h * w;
        std::fill_n(plane, static_cast<std::size_t>(h) * w, 0.0f);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const int r = (c * k + ky) * k + kx;
                const float* src = col + static_cast<std::size_t>(r) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= h) {
                        continue;
                    }
                    float* row = plane + static_cast<std::size_t>(iy) * w;
                    const float* s = src + static_cast<std::size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < w) {
                            row[ix] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvGeometry& g) {
    return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

void check_conv_input(const Tensor& x, const ConvGeometry& g) {
    if (x.c != g.in_channels) {
        throw ShapeError("conv2d: expected " + std::to_string(g.in_channels) +
                         " input channels, got " + x.shape_string());
    }
    if (g.out_h(x.h) < 1 || g.out_w(x.w) < 1) {
        throw ShapeError("conv2d: input too small " + x.shape_string());
    }
}

} // namespace

void conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                    const ConvGeometry& g, Tensor& y) {
    check_conv_input(x, g);
    const int oh = g.out_h(x.h);
    const int ow = g.out_w(x.w);
    const int p = oh * ow;
    const int kdim = g.patch();
    y = Tensor(x.n, g.out_channels, oh, ow);
    std::vector<float> col;
    if (!is_pointwise(g)) {
        col.resize(static_cast<std::size_t>(kdim) * p);
    }
    for (int n = 0; n < x.n; ++n) {
        const float* b = x.sample(n).data();
        if (!is_pointwise(g)) {
            im2col(b, x.h, x.w, g, oh, ow, col.data());
            b = col.data();
        }
        float* out = y.sample(n).data();
        for (int o = 0; o < g.out_channels; ++o) {
            std::fill_n(out + static_cast<std::size_t>(o) * p, p, bias[o]);
        }
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, g.out_channels, p, kdim, 1.0f,
                    weight.data(), kdim, b, p, 1.0f, out, p);
    }
}

void conv2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& dy,
                     const ConvGeometry& g, Tensor* dx, std::span<float> dweight,
                     std::span<float> dbias) {
    check_conv_input(x, g);
    const int oh = g.out_h(x.h);
    const int ow = g.out_w(x.w);
    const int p = oh * ow;
    const int kdim = g.patch();
    if (dy.n != x.n || dy.c != g.out_channels || dy.h != oh || dy.w != ow) {
        throw ShapeError("conv2d_backward: gradient shape " + dy.shape_string());
    }
    if (dx != nullptr) {
        *dx = Tensor(x.n, x.c, x.h, x.w);
    }
    std::vector<float> col;
    std::vector<float> dcol;
    if (!is_pointwise(g)) {
        col.resize(static_cast<std::size_t>(kdim) * p);
        if (dx != nullptr) {
            dcol.resize(col.size());
        }
    }
    for (int n = 0; n < x.n; ++n) {
        const float* grad = dy.sample(n).data();
#pragma omp parallel for schedule(static)
        for (int o = 0; o < g.out_channels; ++o) {
            const float* row = grad + static_cast<std::size_t>(o) * p;
            double acc = 0.0;
            for (int i = 0; i < p; ++i) {
                acc += row[i];
            }
            dbias[o] += static_cast<float>(acc);
        }
        const float* b = x.sample(n).data();
        if (!is_pointwise(g)) {
            im2col(b, x.h, x.w, g, oh, ow, col.data());
            b = col.data();
        }
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, g.out_channels, kdim, p, 1.0f, grad,
                    p, b, p, 1.0f, dweight.data(), kdim);
        if (dx == nullptr) {
            continue;
        }
        float* dst = dx->sample(n).data();
        if (is_pointwise(g)) {
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kdim, p, g.out_channels, 1.0f,
                        weight.data(), kdim, grad, p, 0.0f, dst, p);
        } else {
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kdim, p, g.out_channels, 1.0f,
                        weight.data(), kdim, grad, p, 0.0f, dcol.data(), p);
            col2im(dcol.data(), x.h, x.w, g, oh, ow, dst);
        }
    }
}

void maxpool2_forward(const Tensor& x, Tensor& y, std::vector<int>& argmax) {
    if (x.h % 2 != 0 || x.w % 2 != 0) {
        throw ShapeError("maxpool2: odd spatial size " + x.shape_string());
    }
    const int oh = x.h / 2;
    const int ow = x.w / 2;
    y = Tensor(x.n, x.c, oh, ow);
    argmax.assign(y.size(), 0);
    const int planes = x.n * x.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes; ++pl) {
        const float* src = x.data.data() + static_cast<std::size_t>(pl) * x.plane();
        float* dst = y.data.data() + static_cast<std::size_t>(pl) * y.plane();
        int* arg = argmax.data() + static_cast<std::size_t>(pl) * y.plane();
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                int best = (2 * oy) * x.w + 2 * ox;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int idx = (2 * oy + dy) * x.w + 2 * ox + dx;
                        if (src[idx] > src[best]) {
                            best = idx;
                        }
                    }
                }
                dst[oy * ow + ox] = src[best];
                arg[oy * ow + ox] = best;
            }
        }
    }
}

void maxpool2_backward(const Tensor& dy, const std::vector<int>& argmax, int in_h, int in_w,
                       Tensor& dx) {
    dx = Tensor(dy.n, dy.c, in_h, in_w);
    const int planes = dy.n * dy.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes; ++pl) {
        const float* src = dy.data.data() + static_cast<std::size_t>(pl) * dy.plane();
        const int* arg = argmax.data() + static_cast<std::size_t>(pl) * dy.plane();
        float* dst = dx.data.data() + static_cast<std::size_t>(pl) * dx.plane();
        for (std::size_t i = 0; i < dy.plane(); ++i) {
            dst[arg[i]] += src[i];
        }
    }
}

namespace {

struct Tap {
    int i0;
    int i1;
    float frac;
};

// Half-pixel source coordinates for a 2x upsample, clamped at the edges.
std::vector<Tap> upsample_taps(int in_size) {
    std::vector<Tap> taps(static_cast<std::size_t>(in_size) * 2);
    for (int o = 0; o < in_size * 2; ++o) {
        float src = (static_cast<float>(o) + 0.5f) * 0.5f - 0.5f;
        src = std::max(src, 0.0f);
        const int i0 = std::min(static_cast<int>(src), in_size - 1);
        const int i1 = std::min(i0 + 1, in_size - 1);
        taps[o] = {i0, i1, src - static_cast<float>(i0)};
    }
    return taps;
}

} // namespace

void upsample2_forward(const Tensor& x, Tensor& y) {
    y = Tensor(x.n, x.c, x.h * 2, x.w * 2);
    const auto ty = upsample_taps(x.h);
    const auto tx = upsample_taps(x.w);
    const int planes = x.n * x.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes; ++pl) {
        const float* src = x.data.data() + static_cast<std::size_t>(pl) * x.plane();
        float* dst = y.data.data() + static_cast<std::size_t>(pl) * y.plane();
        for (int oy = 0; oy < y.h; ++oy) {
            const Tap& a = ty[oy];
            const float* r0 = src + static_cast<std::size_t>(a.i0) * x.w;
            const float* r1 = src + static_cast<std::size_t>(a.i1) * x.w;
            for (int ox = 0; ox < y.w; ++ox) {
                const Tap& b = tx[ox];
                const float top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
                const float bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
                dst[static_cast<std::size_t>(oy) * y.w + ox] = top + (bot - top) * a.frac;
            }
        }
    }
}

void upsample2_backward(const Tensor& dy, int in_h, int in_w, Tensor& dx) {
    dx = Tensor(dy.n, dy.c, in_h, in_w);
    const auto ty = upsample_taps(in_h);
    const auto tx = upsample_taps(in_w);
    const int planes = dy.n * dy.c;
#pragma omp parallel for schedule(static)
    for (int pl = 0; pl < planes; ++pl) {
        const float* src = dy.data.data() + static_cast<std::size_t>(pl) * dy.plane();
        float* dst = dx.data.data() + static_cast<std::size_t>(pl) * dx.plane();
        for (int oy = 0; oy < dy.h; ++oy) {
            const Tap& a = ty[oy];
            float* r0 = dst + static_cast<std::size_t>(a.i0) * in_w;
            float* r1 = dst + static_cast<std::size_t>(a.i1) * in_w;
            for (int ox = 0; ox < dy.w; ++ox) {
                const Tap& b = tx[ox];
                const float gval = src[static_cast<std::size_t>(oy) * dy.w + ox];
                const float g_top = gval * (1.0f - a.frac);
                const float g_bot = gval * a.frac;
                r0[b.i0] += g_top * (1.0f - b.frac);
                r0[b.i1] += g_top * b.frac;
                r1[b.i0] += g_bot * (1.0f - b.frac);
                r1[b.i1] += g_bot * b.frac;
            }
        }
    }
}

void dense_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                   int out_features, Tensor& y) {
    const int in_features = static_cast<int>(x.sample_size());
    if (weight.size() != static_cast<std::size_t>(in_features) * out_features) {
        throw ShapeError("dense: weight size does not match input " + x.shape_string());
    }
    y = Tensor(x.n, out_features, 1, 1);
    for (int n = 0; n < x.n; ++n) {
        std::copy(bias.begin(), bias.end(), y.sample(n).begin());
    }
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, x.n, out_features, in_features, 1.0f,
                x.data.data(), in_features, weight.data(), in_features, 1.0f, y.data.data(),
                out_features);
}

void dense_backward(const Tensor& x, std::span<const float> weight, const Tensor& dy,
                    int out_features, Tensor* dx, std::span<float> dweight,
                    std::span<float> dbias) {
    const int in_features = static_cast<int>(x.sample_size());
    for (int n = 0; n < dy.n; ++n) {
        auto g = dy.sample(n);
        for (int o = 0; o < out_features; ++o) {
            dbias[o] += g[o];
        }
    }
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, out_features, in_features, x.n, 1.0f,
                dy.data.data(), out_features, x.data.data(), in_features, 1.0f, dweight.data(),
                in_features);
    if (dx != nullptr) {
        *dx = Tensor(x.n, x.c, x.h, x.w);
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, x.n, in_features, out_features,
                    1.0f, dy.data.data(), out_features, weight.data(), in_features, 0.0f,
                    dx->data.data(), in_features);
    }
}

void force_single_thread() {
    omp_set_num_threads(1);
    openblas_set_num_threads(1);
}

bool deterministic_mode_requested() {
    const char* v = std::getenv("PCDA_DETERMINISTIC");
    return v != nullptr && *v != '\0' && std::string_view(v) != "0";
}

} // namespace pcda::kernels
