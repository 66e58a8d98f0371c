#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "satloc/kernels.hpp"

namespace k = satloc::kernels;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> nd;
  std::vector<float> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::gemm<float>(false, false, n, n, n, 1.f, a.data(), n, b.data(), n, 0.f, c.data(), n);
    else
      k::serial::gemm<float>(false, false, n, n, n, 1.f, a.data(), n, b.data(), n, 0.f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["FLOPS"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}

// Patch embedding at desk geometry: 64x64 input, 8x8 patches, 64 wide.
template <bool Parallel>
void BM_Conv(benchmark::State& state) {
  k::ConvGeometry g;
  g.batch = static_cast<std::size_t>(state.range(0));
  g.in_channels = 4;
  g.out_channels = 64;
  g.in_h = g.in_w = 64;
  g.kernel_h = g.kernel_w = 8;
  g.stride = 8;
  const auto in = noise(g.batch * g.in_channels * g.in_h * g.in_w, 3);
  const auto w = noise(g.out_channels * g.in_channels * 64, 4);
  const auto bias = noise(g.out_channels, 5);
  std::vector<float> out(g.batch * g.out_channels * g.out_h() * g.out_w());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::conv2d_forward<float>(g, in, w, bias, out);
    else
      k::serial::conv2d_forward<float>(g, in, w, bias, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  k::AttentionGeometry g;
  g.batch = 16;
  g.query_len = static_cast<std::size_t>(state.range(0));
  g.key_len = static_cast<std::size_t>(state.range(0));
  g.width = 64;
  g.heads = 4;
  const auto q = noise(g.batch * g.query_len * g.width, 6);
  const auto kk = noise(g.batch * g.key_len * g.width, 7);
  const auto v = noise(g.batch * g.key_len * g.width, 8);
  std::vector<float> probs(g.batch * g.heads * g.query_len * g.key_len);
  std::vector<float> out(g.batch * g.query_len * g.width);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::attention_forward<float>(g, q, kk, v, {}, probs, out);
    else
      k::serial::attention_forward<float>(g, q, kk, v, {}, probs, out);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_Conv<false>)->Name("conv_patch/serial")->Arg(1)->Arg(16);
BENCHMARK(BM_Conv<true>)->Name("conv_patch/parallel")->Arg(1)->Arg(16);
BENCHMARK(BM_Attention<false>)->Name("attention/serial")->Arg(64)->Arg(192);
BENCHMARK(BM_Attention<true>)->Name("attention/parallel")->Arg(64)->Arg(192);

BENCHMARK_MAIN();
