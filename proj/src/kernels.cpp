#include "hcount/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hcount::kernels {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

using Index = std::ptrdiff_t;

// cols is (C_in * 9) x (N * H * W); sample n owns columns [n*HW, (n+1)*HW).
template <typename T>
void im2col(const ConvGeometry& g, std::span<const T> input, std::vector<T>& cols) {
  const Index hw = static_cast<Index>(g.height * g.width);
  const Index total_cols = hw * static_cast<Index>(g.batch);
  const Index h = static_cast<Index>(g.height);
  const Index w = static_cast<Index>(g.width);
  const Index channels = static_cast<Index>(g.in_channels);
  cols.assign(static_cast<std::size_t>(channels * 9 * total_cols), T{0});
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    const T* src = input.data() + n * channels * hw;
    for (Index c = 0; c < channels; ++c) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx) {
          T* row = cols.data() + ((c * 9 + ky * 3 + kx) * total_cols) + n * hw;
          for (Index y = 0; y < h; ++y) {
            const Index sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (Index x = 0; x < w; ++x) {
              const Index sx = x + kx - 1;
              if (sx < 0 || sx >= w) continue;
              row[y * w + x] = src[(c * h + sy) * w + sx];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const RowMatrix<T>& cols, std::span<T> grad_input) {
  const Index hw = static_cast<Index>(g.height * g.width);
  const Index total_cols = hw * static_cast<Index>(g.batch);
  const Index h = static_cast<Index>(g.height);
  const Index w = static_cast<Index>(g.width);
  const Index channels = static_cast<Index>(g.in_channels);
  std::fill(grad_input.begin(), grad_input.end(), T{0});
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    T* dst = grad_input.data() + n * channels * hw;
    for (Index c = 0; c < channels; ++c) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx) {
          const T* row = cols.data() + ((c * 9 + ky * 3 + kx) * total_cols) + n * hw;
          for (Index y = 0; y < h; ++y) {
            const Index sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (Index x = 0; x < w; ++x) {
              const Index sx = x + kx - 1;
              if (sx < 0 || sx >= w) continue;
              dst[(c * h + sy) * w + sx] += row[y * w + x];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv3x3_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> bias, std::span<T> output) {
  const Index hw = static_cast<Index>(g.height * g.width);
  const Index total_cols = hw * static_cast<Index>(g.batch);
  const Index k = static_cast<Index>(g.in_channels * 9);
  const Index c_out = static_cast<Index>(g.out_channels);

  std::vector<T> cols;
  im2col(g, input, cols);
  ConstMapMatrix<T> weights(kernel.data(), c_out, k);
  ConstMapMatrix<T> col_matrix(cols.data(), k, total_cols);
  RowMatrix<T> result = weights * col_matrix;

#pragma omp parallel for schedule(static)
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    for (Index co = 0; co < c_out; ++co) {
      const T b = bias[static_cast<std::size_t>(co)];
      const T* src = result.data() + co * total_cols + n * hw;
      T* dst = output.data() + (n * c_out + co) * hw;
      for (Index i = 0; i < hw; ++i) dst[i] = src[i] + b;
    }
  }
}

template <typename T>
void conv3x3_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                      std::span<const T> grad_output, std::span<T> grad_input,
                      std::span<T> grad_kernel, std::span<T> grad_bias) {
  const Index hw = static_cast<Index>(g.height * g.width);
  const Index total_cols = hw * static_cast<Index>(g.batch);
  const Index k = static_cast<Index>(g.in_channels * 9);
  const Index c_out = static_cast<Index>(g.out_channels);

  RowMatrix<T> grad(c_out, total_cols);
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    for (Index co = 0; co < c_out; ++co) {
      const T* src = grad_output.data() + (n * c_out + co) * hw;
      std::copy(src, src + hw, grad.data() + co * total_cols + n * hw);
    }
  }

  std::vector<T> cols;
  im2col(g, input, cols);
  ConstMapMatrix<T> col_matrix(cols.data(), k, total_cols);
  MapMatrix<T>(grad_kernel.data(), c_out, k).noalias() = grad * col_matrix.transpose();
  for (Index co = 0; co < c_out; ++co) grad_bias[static_cast<std::size_t>(co)] = grad.row(co).sum();

  if (!grad_input.empty()) {
    ConstMapMatrix<T> weights(kernel.data(), c_out, k);
    RowMatrix<T> grad_cols = weights.transpose() * grad;
    col2im(g, grad_cols, grad_input);
  }
}

template <typename T>
void maxpool2x2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                        std::span<std::uint32_t> argmax) {
  const Index oh = static_cast<Index>(g.out_height());
  const Index ow = static_cast<Index>(g.out_width());
  const Index h = static_cast<Index>(g.height);
  const Index w = static_cast<Index>(g.width);
  const Index planes = static_cast<Index>(g.batch * g.channels);
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < planes; ++p) {
    const T* src = input.data() + p * h * w;
    for (Index y = 0; y < oh; ++y) {
      for (Index x = 0; x < ow; ++x) {
        Index best = (2 * y) * w + 2 * x;
        for (Index dy = 0; dy < 2; ++dy) {
          for (Index dx = 0; dx < 2; ++dx) {
            const Index idx = (2 * y + dy) * w + 2 * x + dx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const Index o = p * oh * ow + y * ow + x;
        output[static_cast<std::size_t>(o)] = src[best];
        argmax[static_cast<std::size_t>(o)] = static_cast<std::uint32_t>(p * h * w + best);
      }
    }
  }
}

template <typename T>
void maxpool2x2_backward(const PoolGeometry& g, std::span<const T> grad_output,
                         std::span<const std::uint32_t> argmax, std::span<T> grad_input) {
  (void)g;
  std::fill(grad_input.begin(), grad_input.end(), T{0});
  for (std::size_t i = 0; i < grad_output.size(); ++i) grad_input[argmax[i]] += grad_output[i];
}

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output) {
  const Index n = static_cast<Index>(g.batch);
  const Index in = static_cast<Index>(g.in_features);
  const Index out = static_cast<Index>(g.out_features);
  ConstMapMatrix<T> x(input.data(), n, in);
  ConstMapMatrix<T> wmat(weight.data(), out, in);
  MapMatrix<T> y(output.data(), n, out);
  y.noalias() = x * wmat.transpose();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data(), out);
  y.rowwise() += b;
}

template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias) {
  const Index n = static_cast<Index>(g.batch);
  const Index in = static_cast<Index>(g.in_features);
  const Index out = static_cast<Index>(g.out_features);
  ConstMapMatrix<T> x(input.data(), n, in);
  ConstMapMatrix<T> gy(grad_output.data(), n, out);
  MapMatrix<T>(grad_weight.data(), out, in).noalias() = gy.transpose() * x;
  for (Index o = 0; o < out; ++o) grad_bias[static_cast<std::size_t>(o)] = gy.col(o).sum();
  if (!grad_input.empty()) {
    ConstMapMatrix<T> wmat(weight.data(), out, in);
    MapMatrix<T>(grad_input.data(), n, in).noalias() = gy * wmat;
  }
}

namespace {

struct CellRange {
  std::ptrdiff_t lo = 0, hi = 0;  // inclusive
};

CellRange cell_range(double start, double end, std::size_t extent) {
  constexpr double kSnap = 1e-6;
  auto lo = static_cast<std::ptrdiff_t>(std::floor(start + kSnap));
  auto hi = static_cast<std::ptrdiff_t>(std::ceil(end - kSnap)) - 1;
  if (hi < lo) hi = lo;
  const auto last = static_cast<std::ptrdiff_t>(extent) - 1;
  lo = std::clamp<std::ptrdiff_t>(lo, 0, last);
  hi = std::clamp<std::ptrdiff_t>(hi, 0, last);
  return {lo, hi};
}

}  // namespace

template <typename T>
void roi_max_pool(std::size_t channels, std::size_t height, std::size_t width,
                  std::span<const T> input, const RoiWindow& window, std::size_t pool,
                  std::span<T> output, std::span<std::uint32_t> argmax) {
  const double cell_w = (window.x1 - window.x0) / static_cast<double>(pool);
  const double cell_h = (window.y1 - window.y0) / static_cast<double>(pool);
  std::vector<CellRange> cols(pool), rows(pool);
  for (std::size_t i = 0; i < pool; ++i) {
    cols[i] = cell_range(window.x0 + static_cast<double>(i) * cell_w,
                         window.x0 + static_cast<double>(i + 1) * cell_w, width);
    rows[i] = cell_range(window.y0 + static_cast<double>(i) * cell_h,
                         window.y0 + static_cast<double>(i + 1) * cell_h, height);
  }
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t plane = c * height * width;
    for (std::size_t py = 0; py < pool; ++py) {
      for (std::size_t px = 0; px < pool; ++px) {
        std::size_t best = plane + static_cast<std::size_t>(rows[py].lo) * width +
                           static_cast<std::size_t>(cols[px].lo);
        for (auto y = rows[py].lo; y <= rows[py].hi; ++y) {
          for (auto x = cols[px].lo; x <= cols[px].hi; ++x) {
            const std::size_t idx =
                plane + static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x);
            if (input[idx] > input[best]) best = idx;
          }
        }
        const std::size_t o = (c * pool + py) * pool + px;
        output[o] = input[best];
        if (!argmax.empty()) argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

namespace reference {

template <typename T>
void conv3x3_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> bias, std::span<T> output) {
  const std::size_t h = g.height, w = g.width;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          T acc = bias[co];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < 3; ++ky) {
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - 1;
                if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) ||
                    sx >= static_cast<std::ptrdiff_t>(w))
                  continue;
                acc += kernel[((co * g.in_channels + ci) * 3 + ky) * 3 + kx] *
                       input[((n * g.in_channels + ci) * h + static_cast<std::size_t>(sy)) * w +
                             static_cast<std::size_t>(sx)];
              }
            }
          }
          output[((n * g.out_channels + co) * h + y) * w + x] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv3x3_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                      std::span<const T> grad_output, std::span<T> grad_input,
                      std::span<T> grad_kernel, std::span<T> grad_bias) {
  const std::size_t h = g.height, w = g.width;
  std::fill(grad_kernel.begin(), grad_kernel.end(), T{0});
  std::fill(grad_bias.begin(), grad_bias.end(), T{0});
  std::fill(grad_input.begin(), grad_input.end(), T{0});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const T go = grad_output[((n * g.out_channels + co) * h + y) * w + x];
          grad_bias[co] += go;
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < 3; ++ky) {
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - 1;
                if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) ||
                    sx >= static_cast<std::ptrdiff_t>(w))
                  continue;
                const std::size_t in_idx =
                    ((n * g.in_channels + ci) * h + static_cast<std::size_t>(sy)) * w +
                    static_cast<std::size_t>(sx);
                const std::size_t k_idx = ((co * g.in_channels + ci) * 3 + ky) * 3 + kx;
                grad_kernel[k_idx] += go * input[in_idx];
                if (!grad_input.empty()) grad_input[in_idx] += go * kernel[k_idx];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void maxpool2x2_forward(const PoolGeometry& g, std::span<const T> input, std::span<T> output,
                        std::span<std::uint32_t> argmax) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t p = 0; p < g.batch * g.channels; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = p * g.height * g.width + 2 * y * g.width + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * g.height * g.width + (2 * y + dy) * g.width + 2 * x + dx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        output[(p * oh + y) * ow + x] = input[best];
        argmax[(p * oh + y) * ow + x] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

template <typename T>
void linear_forward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_features; ++o) {
      T acc = bias[o];
      for (std::size_t i = 0; i < g.in_features; ++i) {
        acc += weight[o * g.in_features + i] * input[n * g.in_features + i];
      }
      output[n * g.out_features + o] = acc;
    }
  }
}

template <typename T>
void linear_backward(const LinearGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias) {
  std::fill(grad_weight.begin(), grad_weight.end(), T{0});
  std::fill(grad_bias.begin(), grad_bias.end(), T{0});
  std::fill(grad_input.begin(), grad_input.end(), T{0});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_features; ++o) {
      const T go = grad_output[n * g.out_features + o];
      grad_bias[o] += go;
      for (std::size_t i = 0; i < g.in_features; ++i) {
        grad_weight[o * g.in_features + i] += go * input[n * g.in_features + i];
        if (!grad_input.empty()) grad_input[n * g.in_features + i] += go * weight[o * g.in_features + i];
      }
    }
  }
}

}  // namespace reference

int worker_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_worker_count(int workers) {
#ifdef _OPENMP
  if (workers > 0) omp_set_num_threads(workers);
#else
  (void)workers;
#endif
}

#define HCOUNT_INSTANTIATE(T)                                                                    \
  template void conv3x3_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,  \
                                   std::span<const T>, std::span<T>);                            \
  template void conv3x3_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                    std::span<const T>, std::span<T>, std::span<T>,              \
                                    std::span<T>);                                               \
  template void maxpool2x2_forward<T>(const PoolGeometry&, std::span<const T>, std::span<T>,     \
                                      std::span<std::uint32_t>);                                 \
  template void maxpool2x2_backward<T>(const PoolGeometry&, std::span<const T>,                  \
                                       std::span<const std::uint32_t>, std::span<T>);            \
  template void linear_forward<T>(const LinearGeometry&, std::span<const T>, std::span<const T>, \
                                  std::span<const T>, std::span<T>);                             \
  template void linear_backward<T>(const LinearGeometry&, std::span<const T>,                    \
                                   std::span<const T>, std::span<const T>, std::span<T>,         \
                                   std::span<T>, std::span<T>);                                  \
  template void roi_max_pool<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,       \
                                const RoiWindow&, std::size_t, std::span<T>,                     \
                                std::span<std::uint32_t>);                                       \
  namespace reference {                                                                          \
  template void conv3x3_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,  \
                                   std::span<const T>, std::span<T>);                            \
  template void conv3x3_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                    std::span<const T>, std::span<T>, std::span<T>,              \
                                    std::span<T>);                                               \
  template void maxpool2x2_forward<T>(const PoolGeometry&, std::span<const T>, std::span<T>,     \
                                      std::span<std::uint32_t>);                                 \
  template void linear_forward<T>(const LinearGeometry&, std::span<const T>, std::span<const T>, \
                                  std::span<const T>, std::span<T>);                             \
  template void linear_backward<T>(const LinearGeometry&, std::span<const T>,                    \
                                   std::span<const T>, std::span<const T>, std::span<T>,         \
                                   std::span<T>, std::span<T>);                                  \
  }

HCOUNT_INSTANTIATE(float)
HCOUNT_INSTANTIATE(double)

#undef HCOUNT_INSTANTIATE

}  // namespace hcount::kernels
