#include "pcda/errors.hpp"
#include "pcda/kernels.hpp"

namespace pcda::kernels::serial {

void conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                    const ConvGeometry& g, Tensor& y) {
    if (x.c != g.in_channels) {
        throw ShapeError("serial conv2d: channel mismatch");
    }
    const int oh = g.out_h(x.h);
    const int ow = g.out_w(x.w);
    const int k = g.kernel;
    y = Tensor(x.n, g.out_channels, oh, ow);
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < g.out_channels; ++o) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bias[o];
                    for (int c = 0; c < g.in_channels; ++c) {
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * g.stride - g.pad + ky;
                            if (iy < 0 || iy >= x.h) {
                                continue;
                            }
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * g.stride - g.pad + kx;
                                if (ix < 0 || ix >= x.w) {
                                    continue;
                                }
                                acc += static_cast<double>(
                                           weight[((o * g.in_channels + c) * k + ky) * k + kx]) *
                                       x.at(n, c, iy, ix);
                            }
                        }
                    }
                    y.at(n, o, oy, ox) = static_cast<float>(acc);
                }
            }
        }
    }
}

void conv2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& dy,
                     const ConvGeometry& g, Tensor* dx, std::span<float> dweight,
                     std::span<float> dbias) {
    const int oh = g.out_h(x.h);
    const int ow = g.out_w(x.w);
    const int k = g.kernel;
    if (dx != nullptr) {
        *dx = Tensor(x.n, x.c, x.h, x.w);
    }
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < g.out_channels; ++o) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const float gy = dy.at(n, o, oy, ox);
                    dbias[o] += gy;
                    for (int c = 0; c < g.in_channels; ++c) {
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * g.stride - g.pad + ky;
                            if (iy < 0 || iy >= x.h) {
                                continue;
                            }
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * g.stride - g.pad + kx;
                                if (ix < 0 || ix >= x.w) {
                                    continue;
                                }
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(o) * g.in_channels + c) * k + ky) *
                                        k +
                                    kx;
                                dweight[wi] += gy * x.at(n, c, iy, ix);
                                if (dx != nullptr) {
                                    dx->at(n, c, iy, ix) += gy * weight[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

} // namespace pcda::kernels::serial
