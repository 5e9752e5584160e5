#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Layer kernels over flat NCHW buffers. Two implementations share one
// signature set: `kernels::` is the im2col + GEMM path parallelized over batch
// items with OpenMP, `kernels::reference::` is the direct serial loop nest used
// by the tests and the benchmark as ground truth.
//
// Convolutions are 3x3, stride 1, zero padding 1. Pooling is 2x2, stride 2,
// floor on odd extents. Backward kernels overwrite (never accumulate into)
// their gradient outputs.

namespace hcount::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
};

struct PoolGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t height = 2;
  std::size_t width = 2;
  std::size_t out_height() const { return height / 2; }
  std::size_t out_width() const { return width / 2; }
};

struct LinearGeometry {
  std::size_t batch = 1;
  std::size_t in_features = 1;
  std::size_t out_features = 1;
};

template <typename T>
void conv3x3_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> bias, std::span<T> output);

template <typename T>
void conv3x3_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                      std::span<const T> grad_output, std::span<T> grad_input,
                      std::span<T> grad_kernel, std::span<T> grad_bias);

template <typename T>
void maxpool2x2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                        std::span<std::uint32_t> argmax);

template <typename T>
void maxpool2x2_backward(const PoolGeometry& g, std::span<const T> grad_output,
                         std::span<const std::uint32_t> argmax, std::span<T> grad_input);

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);

template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias);

/// Region in feature-map coordinates; x1/y1 are exclusive.
struct RoiWindow {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;
};

/// Max-pools one C x H x W map over `window` split into a pool x pool grid.
/// Cell bounds are floored/ceiled to whole feature cells and clamped to the
/// map, so every cell reads at least one value. argmax holds flat indices into
/// `input`.
template <typename T>
void roi_max_pool(std::size_t channels, std::size_t height, std::size_t width,
                  std::span<const T> input, const RoiWindow& window, std::size_t pool,
                  std::span<T> output, std::span<std::uint32_t> argmax);

namespace reference {

template <typename T>
void conv3x3_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> bias, std::span<T> output);

template <typename T>
void conv3x3_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                      std::span<const T> grad_output, std::span<T> grad_input,
                      std::span<T> grad_kernel, std::span<T> grad_bias);

template <typename T>
void maxpool2x2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                        std::span<std::uint32_t> argmax);

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);

template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias);

}  // namespace reference

/// Number of OpenMP workers used by the parallel kernels (1 without OpenMP).
int worker_count();
void set_worker_count(int workers);

}  // namespace hcount::kernels
