#include <benchmark/benchmark.h>

#include <vector>

#include "vinpaint/kernels.hpp"
#include "vinpaint/rng.hpp"

using namespace vinpaint;

namespace {

std::vector<float> random_buffer(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

// Batched square GEMM; range(0) is the side, range(1) the batch count.
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), batch = static_cast<std::size_t>(state.range(1));
    kernels::GemmBatch g{n, n, n, {}, {}};
    for (std::size_t i = 0; i < batch; ++i) {
        g.a_offsets.push_back(i * n * n);
        g.b_offsets.push_back(i * n * n);
    }
    const auto a = random_buffer(batch * n * n, 1), b = random_buffer(batch * n * n, 2);
    std::vector<float> c(batch * n * n);
    for (auto _ : state) {
        if constexpr (Parallel) kernels::parallel::gemm(a.data(), b.data(), c.data(), g);
        else kernels::serial::gemm(a.data(), b.data(), c.data(), g);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch * n * n * n));
}

// Multi-head attention over f·w'·h' damped-global tokens; range(0) is the sequence length.
template <bool Parallel>
void BM_Attention(benchmark::State& state) {
    kernels::AttentionDims d;
    d.lq = d.lk = static_cast<std::size_t>(state.range(0));
    d.d = d.dv = 64;
    d.heads = 8;
    const auto q = random_buffer(d.lq * d.d, 3), k = random_buffer(d.lk * d.d, 4), v = random_buffer(d.lk * d.dv, 5);
    std::vector<float> out(d.lq * d.dv);
    for (auto _ : state) {
        if constexpr (Parallel) kernels::parallel::attention(q.data(), k.data(), v.data(), out.data(), d);
        else kernels::serial::attention(q.data(), k.data(), v.data(), out.data(), d);
        benchmark::DoNotOptimize(out.data());
    }
}

// Bilinear downsampling of 64×48 planes to 8×6; range(0) is the plane count.
template <bool Parallel>
void BM_Resize(benchmark::State& state) {
    const auto planes = static_cast<std::size_t>(state.range(0));
    const auto aw = kernels::make_resize_axis(64, 8, ResizeMode::bilinear);
    const auto ah = kernels::make_resize_axis(48, 6, ResizeMode::bilinear);
    const auto x = random_buffer(planes * 64 * 48, 6);
    std::vector<float> y(planes * 8 * 6);
    for (auto _ : state) {
        if constexpr (Parallel) kernels::parallel::resize_planes(x.data(), y.data(), planes, 64, 48, aw, ah);
        else kernels::serial::resize_planes(x.data(), y.data(), planes, 64, 48, aw, ah);
        benchmark::DoNotOptimize(y.data());
    }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Args({64, 16})->Args({128, 8});
BENCHMARK(BM_Gemm<true>)->Args({64, 16})->Args({128, 8});
BENCHMARK(BM_Attention<false>)->Arg(256)->Arg(768);
BENCHMARK(BM_Attention<true>)->Arg(256)->Arg(768);
BENCHMARK(BM_Resize<false>)->Arg(320)->Arg(2560);
BENCHMARK(BM_Resize<true>)->Arg(320)->Arg(2560);

BENCHMARK_MAIN();
