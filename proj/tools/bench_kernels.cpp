// Serial reference vs OpenMP kernels on training-sized workloads.

#include <benchmark/benchmark.h>

#include <vector>

#include "coda/kernels.hpp"
#include "coda/rng.hpp"

namespace {

using coda::kernels::Conv2dShape;

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  coda::Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

void bench_matmul(benchmark::State& state, bool parallel) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1);
  const auto b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  coda::kernels::set_parallel(parallel);
  for (auto _ : state) {
    if (parallel)
      coda::kernels::matmul(a.data(), b.data(), c.data(), n, n, n);
    else
      coda::kernels::matmul_serial(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

Conv2dShape conv_shape(std::size_t batch) {
  Conv2dShape s;
  s.n = batch;
  s.ic = 16;
  s.h = s.w = 8;
  s.oc = 32;
  s.kh = s.kw = 3;
  s.pad_top = s.pad_left = 1;
  s.oh = s.h;
  s.ow = s.w;
  return s;
}

void bench_conv2d(benchmark::State& state, bool parallel) {
  const Conv2dShape s = conv_shape(static_cast<std::size_t>(state.range(0)));
  const auto x = random_vec(s.n * s.ic * s.h * s.w, 3);
  const auto w = random_vec(s.oc * s.ic * s.kh * s.kw, 4);
  std::vector<double> out(s.n * s.oc * s.oh * s.ow);
  coda::kernels::set_parallel(parallel);
  for (auto _ : state) {
    if (parallel)
      coda::kernels::conv2d(x.data(), w.data(), out.data(), s);
    else
      coda::kernels::conv2d_serial(x.data(), w.data(), out.data(), s);
    benchmark::DoNotOptimize(out.data());
    benchmark::ClobberMemory();
  }
}

void bench_sum(benchmark::State& state, bool parallel) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_vec(n, 5);
  coda::kernels::set_parallel(parallel);
  double acc = 0.0;
  for (auto _ : state) {
    acc = parallel ? coda::kernels::sum(x.data(), n)
                   : coda::kernels::sum_serial(x.data(), n);
    benchmark::DoNotOptimize(acc);
  }
}

}  // namespace

BENCHMARK_CAPTURE(bench_matmul, serial, false)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK_CAPTURE(bench_matmul, openmp, true)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK_CAPTURE(bench_conv2d, serial, false)->Arg(16)->Arg(64);
BENCHMARK_CAPTURE(bench_conv2d, openmp, true)->Arg(16)->Arg(64);
BENCHMARK_CAPTURE(bench_sum, serial, false)->Arg(1 << 16)->Arg(1 << 20);
BENCHMARK_CAPTURE(bench_sum, openmp, true)->Arg(1 << 16)->Arg(1 << 20);

BENCHMARK_MAIN();
