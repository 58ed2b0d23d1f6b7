#include "pcda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pcda/errors.hpp"

namespace pcda {

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

Tensor slice_batch(const Tensor& t, int first, int count) {
    if (first < 0 || count < 0 || first + count > t.n) {
        throw ShapeError("slice_batch: range out of bounds for " + t.shape_string());
    }
    Tensor out(count, t.c, t.h, t.w);
    const auto stride = t.sample_size();
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(first * stride), count * stride,
                out.data.begin());
    return out;
}

Tensor concat_batch(std::span<const Tensor> parts) {
    if (parts.empty()) {
        return {};
    }
    int total = 0;
    for (const auto& p : parts) {
        if (p.c != parts[0].c || p.h != parts[0].h || p.w != parts[0].w) {
            throw ShapeError("concat_batch: mismatched sample shapes");
        }
        total += p.n;
    }
    Tensor out(total, parts[0].c, parts[0].h, parts[0].w);
    auto it = out.data.begin();
    for (const auto& p : parts) {
        it = std::copy(p.data.begin(), p.data.end(), it);
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
        throw ShapeError("concat_channels: " + a.shape_string() + " vs " + b.shape_string());
    }
    Tensor out(a.n, a.c + b.c, a.h, a.w);
    for (int i = 0; i < a.n; ++i) {
        auto dst = out.sample(i);
        auto sa = a.sample(i);
        auto sb = b.sample(i);
        std::copy(sa.begin(), sa.end(), dst.begin());
        std::copy(sb.begin(), sb.end(), dst.begin() + static_cast<std::ptrdiff_t>(sa.size()));
    }
    return out;
}

void split_channels(const Tensor& t, int channels_a, Tensor& a, Tensor& b) {
    if (channels_a < 0 || channels_a > t.c) {
        throw ShapeError("split_channels: bad split");
    }
    a = Tensor(t.n, channels_a, t.h, t.w);
    b = Tensor(t.n, t.c - channels_a, t.h, t.w);
    for (int i = 0; i < t.n; ++i) {
        auto src = t.sample(i);
        auto da = a.sample(i);
        auto db = b.sample(i);
        std::copy_n(src.begin(), da.size(), da.begin());
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(da.size()), db.size(), db.begin());
    }
}

bool all_finite(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

} // namespace pcda
