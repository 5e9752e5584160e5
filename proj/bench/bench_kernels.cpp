// Serial reference kernels against the OpenMP im2col + GEMM kernels.
// Args: batch, channels in, spatial extent, channels out.

#include <benchmark/benchmark.h>

#include <vector>

#include "hcount/kernels.hpp"
#include "hcount/rng.hpp"

using namespace hcount;
using namespace hcount::kernels;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

struct ConvCase {
  ConvGeometry g;
  std::vector<float> input, kernel, bias, output, grad_out, grad_in, grad_kernel, grad_bias;

  explicit ConvCase(const benchmark::State& s)
      : g{static_cast<std::size_t>(s.range(0)), static_cast<std::size_t>(s.range(1)),
          static_cast<std::size_t>(s.range(2)), static_cast<std::size_t>(s.range(2)),
          static_cast<std::size_t>(s.range(3))} {
    const std::size_t in = g.batch * g.in_channels * g.height * g.width;
    const std::size_t out = g.batch * g.out_channels * g.height * g.width;
    input = noise(in, 1);
    kernel = noise(g.out_channels * g.in_channels * 9, 2);
    bias = noise(g.out_channels, 3);
    grad_out = noise(out, 4);
    output.resize(out);
    grad_in.resize(in);
    grad_kernel.resize(kernel.size());
    grad_bias.resize(bias.size());
  }
  double flops() const { return 2.0 * 9 * g.in_channels * g.out_channels * g.height * g.width * g.batch; }
};

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    if constexpr (Parallel) {
      conv3x3_forward<float>(c.g, c.input, c.kernel, c.bias, c.output);
    } else {
      reference::conv3x3_forward<float>(c.g, c.input, c.kernel, c.bias, c.output);
    }
    benchmark::DoNotOptimize(c.output.data());
  }
  state.counters["flops"] = benchmark::Counter(c.flops(), benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    if constexpr (Parallel) {
      conv3x3_backward<float>(c.g, c.input, c.kernel, c.grad_out, c.grad_in, c.grad_kernel, c.grad_bias);
    } else {
      reference::conv3x3_backward<float>(c.g, c.input, c.kernel, c.grad_out, c.grad_in, c.grad_kernel, c.grad_bias);
    }
    benchmark::DoNotOptimize(c.grad_in.data());
  }
  state.counters["flops"] = benchmark::Counter(2 * c.flops(), benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void linear(benchmark::State& state) {
  const LinearGeometry g{static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                         static_cast<std::size_t>(state.range(2))};
  const auto input = noise(g.batch * g.in_features, 1), weight = noise(g.in_features * g.out_features, 2),
             bias = noise(g.out_features, 3);
  std::vector<float> output(g.batch * g.out_features);
  for (auto _ : state) {
    if constexpr (Parallel) {
      linear_forward<float>(g, input, weight, bias, output);
    } else {
      reference::linear_forward<float>(g, input, weight, bias, output);
    }
    benchmark::DoNotOptimize(output.data());
  }
}

// RoI-sized node trunks, then an RPN backbone layer.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({64, 16, 7, 16})->Args({64, 16, 3, 16})->Args({4, 16, 32, 32})->Args({4, 3, 64, 16});
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv3x3_forward/reference")->Apply(conv_args);
BENCHMARK(conv_forward<true>)->Name("conv3x3_forward/openmp")->Apply(conv_args);
BENCHMARK(conv_backward<false>)->Name("conv3x3_backward/reference")->Apply(conv_args);
BENCHMARK(conv_backward<true>)->Name("conv3x3_backward/openmp")->Apply(conv_args);
BENCHMARK(linear<false>)->Name("linear_forward/reference")->Args({64, 784, 128})->Args({256, 144, 9});
BENCHMARK(linear<true>)->Name("linear_forward/openmp")->Args({64, 784, 128})->Args({256, 144, 9});

BENCHMARK_MAIN();
