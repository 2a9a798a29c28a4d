// Convolution kernels (serial reference, im2col + GEMM, OpenMP batch) and the
// hot paths built on them.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "uqseg/kernels.hpp"
#include "uqseg/quality_net.hpp"
#include "uqseg/uncertainty.hpp"

using namespace uqseg;
namespace k = uqseg::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

k::ConvGeometry geometry(const benchmark::State& state)
{
    const auto c_in = static_cast<std::size_t>(state.range(0));
    const auto c_out = static_cast<std::size_t>(state.range(1));
    const auto side = static_cast<std::size_t>(state.range(2));
    return {c_in, c_out, side, side, k::Padding::same};
}

void set_flops(benchmark::State& state, const k::ConvGeometry& g, std::size_t batch, double passes)
{
    const double flops = 2.0 * static_cast<double>(g.weight_size()) *
                         static_cast<double>(g.out_height() * g.out_width()) *
                         static_cast<double>(batch) * passes;
    state.counters["flops"] = benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate);
}

constexpr std::size_t kBatch = 8;

void BM_ConvForwardReference(benchmark::State& state)
{
    const auto g = geometry(state);
    const auto x = random_values(kBatch * g.input_size(), 1), w = random_values(g.weight_size(), 2);
    const auto b = random_values(g.out_channels, 3);
    std::vector<double> y(kBatch * g.output_size());
    for (auto _ : state) {
        for (std::size_t s = 0; s < kBatch; ++s)
            k::reference::conv2d_forward(g, std::span(x).subspan(s * g.input_size(), g.input_size()), w,
                                         b, std::span(y).subspan(s * g.output_size(), g.output_size()));
        benchmark::DoNotOptimize(y.data());
    }
    set_flops(state, g, kBatch, 1.0);
}

void BM_ConvForwardIm2col(benchmark::State& state)
{
    const auto g = geometry(state);
    const auto x = random_values(kBatch * g.input_size(), 1), w = random_values(g.weight_size(), 2);
    const auto b = random_values(g.out_channels, 3);
    std::vector<double> y(kBatch * g.output_size());
    for (auto _ : state) {
        for (std::size_t s = 0; s < kBatch; ++s)
            k::conv2d_forward(g, std::span(x).subspan(s * g.input_size(), g.input_size()), w, b,
                              std::span(y).subspan(s * g.output_size(), g.output_size()));
        benchmark::DoNotOptimize(y.data());
    }
    set_flops(state, g, kBatch, 1.0);
}

void BM_ConvForwardBatch(benchmark::State& state)
{
    const auto g = geometry(state);
    const auto x = random_values(kBatch * g.input_size(), 1), w = random_values(g.weight_size(), 2);
    const auto b = random_values(g.out_channels, 3);
    std::vector<double> y(kBatch * g.output_size());
    for (auto _ : state) {
        k::conv2d_forward_batch(g, kBatch, x, w, b, y);
        benchmark::DoNotOptimize(y.data());
    }
    set_flops(state, g, kBatch, 1.0);
    state.counters["threads"] = k::worker_threads();
}

void BM_ConvBackwardReference(benchmark::State& state)
{
    const auto g = geometry(state);
    const auto x = random_values(kBatch * g.input_size(), 1), w = random_values(g.weight_size(), 2);
    const auto go = random_values(kBatch * g.output_size(), 4);
    std::vector<double> gi(x.size()), gw(w.size()), gb(g.out_channels);
    for (auto _ : state) {
        for (std::size_t s = 0; s < kBatch; ++s)
            k::reference::conv2d_backward(g, std::span(go).subspan(s * g.output_size(), g.output_size()),
                                          std::span(x).subspan(s * g.input_size(), g.input_size()), w,
                                          std::span(gi).subspan(s * g.input_size(), g.input_size()),
                                          gw, gb);
        benchmark::DoNotOptimize(gw.data());
    }
    set_flops(state, g, kBatch, 2.0);
}

void BM_ConvBackwardBatch(benchmark::State& state)
{
    const auto g = geometry(state);
    const auto x = random_values(kBatch * g.input_size(), 1), w = random_values(g.weight_size(), 2);
    const auto go = random_values(kBatch * g.output_size(), 4);
    std::vector<double> gi(x.size()), gw(w.size()), gb(g.out_channels);
    for (auto _ : state) {
        k::conv2d_backward_batch(g, kBatch, go, x, w, gi, gw, gb);
        benchmark::DoNotOptimize(gw.data());
    }
    set_flops(state, g, kBatch, 2.0);
}

// Shapes from the segmenter (16 -> 32 at 64) and the regressor branches.
void conv_shapes(benchmark::internal::Benchmark* b)
{
    b->Args({16, 32, 64})->Args({1, 64, 64})->Args({64, 64, 32})->Args({32, 16, 4});
    b->Unit(benchmark::kMicrosecond);
}

BENCHMARK(BM_ConvForwardReference)->Apply(conv_shapes);
BENCHMARK(BM_ConvForwardIm2col)->Apply(conv_shapes);
BENCHMARK(BM_ConvForwardBatch)->Apply(conv_shapes);
BENCHMARK(BM_ConvBackwardReference)->Apply(conv_shapes);
BENCHMARK(BM_ConvBackwardBatch)->Apply(conv_shapes);

void BM_QualityNetStep(benchmark::State& state)
{
    const auto side = static_cast<std::size_t>(state.range(0));
    QualityNet net(QualityArch::three_way, side);
    Rng rng(5);
    net.init(rng);
    const std::size_t n = 4;
    std::vector<Tensor> xs;
    for (std::size_t b = 0; b < 3; ++b) {
        const auto v = random_values(n * side * side, 10 + b);
        xs.emplace_back(Shape{n, 1, side, side}, v);
    }
    const std::vector<double> targets(n, 0.5);
    for (auto _ : state) {
        std::vector<Tensor> grads = net.zero_grads();
        benchmark::DoNotOptimize(net.mse_gradients(xs, targets, grads));
    }
    state.counters["samples"] = benchmark::Counter(static_cast<double>(n), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_QualityNetStep)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_UncertaintyMaps(benchmark::State& state)
{
    const std::size_t t = 10, side = 64, plane = side * side;
    auto v = random_values(t * 2 * plane, 6);
    for (std::size_t s = 0; s < t; ++s)
        for (std::size_t i = 0; i < plane; ++i) {
            const double p = 0.5 + 0.5 * v[s * 2 * plane + i];
            v[s * 2 * plane + i] = p;
            v[s * 2 * plane + plane + i] = 1.0 - p;
        }
    SampleStack stack;
    stack.probs = Tensor({t, 2, side, side}, v);
    for (std::size_t s = 0; s < t; ++s) stack.meta.push_back({s, 0, 0, 0.0});
    for (auto _ : state) {
        const UncertaintyMaps m = compute_maps(stack);
        benchmark::DoNotOptimize(m.epkl.data());
    }
}
BENCHMARK(BM_UncertaintyMaps)->Unit(benchmark::kMicrosecond);

} // namespace

BENCHMARK_MAIN();
