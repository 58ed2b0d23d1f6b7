// Parallel kernels against their serial references: 3x3 convolution forward
// and backward at the segmenter's layer shapes, and the surface-distance search.

#include <benchmark/benchmark.h>

#include <random>

#include "pcda/evaluation.hpp"
#include "pcda/kernels.hpp"

using namespace pcda;

namespace {

struct ConvCase {
    Tensor x;
    std::vector<float> w;
    std::vector<float> b;
    kernels::ConvGeometry g;
    Tensor dy;
};

ConvCase make_case(const benchmark::State& state) {
    const int channels = static_cast<int>(state.range(0));
    const int size = static_cast<int>(state.range(1));
    ConvCase c;
    c.g = {channels, channels, 3, 1, 1};
    c.x = Tensor(8, channels, size, size);
    c.dy = Tensor(8, channels, size, size);
    c.w.resize(static_cast<std::size_t>(channels) * c.g.patch());
    c.b.resize(static_cast<std::size_t>(channels));
    std::mt19937 rng(1);
    std::normal_distribution<float> d(0.0f, 1.0f);
    for (auto* v : {&c.x.data, &c.dy.data, &c.w, &c.b}) {
        for (auto& e : *v) {
            e = d(rng);
        }
    }
    return c;
}

void conv_args(benchmark::internal::Benchmark* b) {
    b->Args({8, 64})->Args({16, 32})->Args({32, 16})->Args({64, 8});
}

void BM_ConvForward(benchmark::State& state) {
    ConvCase c = make_case(state);
    Tensor y;
    for (auto _ : state) {
        kernels::conv2d_forward(c.x, c.w, c.b, c.g, y);
        benchmark::DoNotOptimize(y.data.data());
    }
}
BENCHMARK(BM_ConvForward)->Apply(conv_args)->Unit(benchmark::kMicrosecond);

void BM_ConvForwardSerial(benchmark::State& state) {
    ConvCase c = make_case(state);
    Tensor y;
    for (auto _ : state) {
        kernels::serial::conv2d_forward(c.x, c.w, c.b, c.g, y);
        benchmark::DoNotOptimize(y.data.data());
    }
}
BENCHMARK(BM_ConvForwardSerial)->Apply(conv_args)->Unit(benchmark::kMicrosecond);

void BM_ConvBackward(benchmark::State& state) {
    ConvCase c = make_case(state);
    Tensor dx;
    std::vector<float> dw(c.w.size());
    std::vector<float> db(c.b.size());
    for (auto _ : state) {
        kernels::conv2d_backward(c.x, c.w, c.dy, c.g, &dx, dw, db);
        benchmark::DoNotOptimize(dx.data.data());
    }
}
BENCHMARK(BM_ConvBackward)->Apply(conv_args)->Unit(benchmark::kMicrosecond);

void BM_ConvBackwardSerial(benchmark::State& state) {
    ConvCase c = make_case(state);
    Tensor dx;
    std::vector<float> dw(c.w.size());
    std::vector<float> db(c.b.size());
    for (auto _ : state) {
        kernels::serial::conv2d_backward(c.x, c.w, c.dy, c.g, &dx, dw, db);
        benchmark::DoNotOptimize(dx.data.data());
    }
}
BENCHMARK(BM_ConvBackwardSerial)->Apply(conv_args)->Unit(benchmark::kMicrosecond);

std::pair<Mask3D, Mask3D> mask_pair(int n) {
    std::mt19937 rng(2);
    std::bernoulli_distribution d(0.3);
    Mask3D a(n, n, 16);
    Mask3D b(n, n, 16);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a.values[i] = d(rng);
        b.values[i] = d(rng);
    }
    return {a, b};
}

void BM_SurfaceDistances(benchmark::State& state) {
    const auto [a, b] = mask_pair(static_cast<int>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(directed_surface_distances(a, b, {1, 1, 3}));
    }
}
BENCHMARK(BM_SurfaceDistances)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_SurfaceDistancesSerial(benchmark::State& state) {
    const auto [a, b] = mask_pair(static_cast<int>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(serial::directed_surface_distances(a, b, {1, 1, 3}));
    }
}
BENCHMARK(BM_SurfaceDistancesSerial)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
