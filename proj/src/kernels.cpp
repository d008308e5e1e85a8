#include "coda/kernels.hpp"

#include <atomic>
#include <cstdint>
#include <vector>

namespace coda::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Per-output work below this many flops is not worth a parallel region.
constexpr std::size_t kParallelCutoff = 16384;

constexpr std::size_t kSumBlock = 1024;

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void set_parallel(bool enabled) {
  g_parallel.store(enabled, std::memory_order_relaxed);
}

void matmul_serial(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n) {
  if (!parallel_enabled() || m * k * n < kParallelCutoff) {
    matmul_serial(a, b, c, m, k, n);
    return;
  }
  const std::int64_t rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace {

inline double conv_out_at(const double* x, const double* wgt,
                          const Conv2dShape& s, std::size_t img,
                          std::size_t oc, std::size_t oy, std::size_t ox) {
  double acc = 0.0;
  for (std::size_t ic = 0; ic < s.ic; ++ic) {
    const double* plane = x + (img * s.ic + ic) * s.h * s.w;
    const double* ker = wgt + (oc * s.ic + ic) * s.kh * s.kw;
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      const std::int64_t iy = static_cast<std::int64_t>(oy + ky) -
                              static_cast<std::int64_t>(s.pad_top);
      if (iy < 0 || iy >= static_cast<std::int64_t>(s.h)) continue;
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        const std::int64_t ix = static_cast<std::int64_t>(ox + kx) -
                                static_cast<std::int64_t>(s.pad_left);
        if (ix < 0 || ix >= static_cast<std::int64_t>(s.w)) continue;
        acc += plane[iy * static_cast<std::int64_t>(s.w) + ix] *
               ker[ky * s.kw + kx];
      }
    }
  }
  return acc;
}

inline double conv_dx_at(const double* dout, const double* wgt,
                         const Conv2dShape& s, std::size_t img, std::size_t ic,
                         std::size_t iy, std::size_t ix) {
  // dx[iy][ix] gathers from every output position the input pixel fed.
  double acc = 0.0;
  for (std::size_t oc = 0; oc < s.oc; ++oc) {
    const double* dplane = dout + (img * s.oc + oc) * s.oh * s.ow;
    const double* ker = wgt + (oc * s.ic + ic) * s.kh * s.kw;
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      const std::int64_t oy = static_cast<std::int64_t>(iy) +
                              static_cast<std::int64_t>(s.pad_top) -
                              static_cast<std::int64_t>(ky);
      if (oy < 0 || oy >= static_cast<std::int64_t>(s.oh)) continue;
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        const std::int64_t ox = static_cast<std::int64_t>(ix) +
                                static_cast<std::int64_t>(s.pad_left) -
                                static_cast<std::int64_t>(kx);
        if (ox < 0 || ox >= static_cast<std::int64_t>(s.ow)) continue;
        acc += dplane[oy * static_cast<std::int64_t>(s.ow) + ox] *
               ker[ky * s.kw + kx];
      }
    }
  }
  return acc;
}

inline double conv_dw_at(const double* dout, const double* x,
                         const Conv2dShape& s, std::size_t oc, std::size_t ic,
                         std::size_t ky, std::size_t kx) {
  double acc = 0.0;
  for (std::size_t img = 0; img < s.n; ++img) {
    const double* dplane = dout + (img * s.oc + oc) * s.oh * s.ow;
    const double* plane = x + (img * s.ic + ic) * s.h * s.w;
    for (std::size_t oy = 0; oy < s.oh; ++oy) {
      const std::int64_t iy = static_cast<std::int64_t>(oy + ky) -
                              static_cast<std::int64_t>(s.pad_top);
      if (iy < 0 || iy >= static_cast<std::int64_t>(s.h)) continue;
      for (std::size_t ox = 0; ox < s.ow; ++ox) {
        const std::int64_t ix = static_cast<std::int64_t>(ox + kx) -
                                static_cast<std::int64_t>(s.pad_left);
        if (ix < 0 || ix >= static_cast<std::int64_t>(s.w)) continue;
        acc += dplane[oy * s.ow + ox] *
               plane[iy * static_cast<std::int64_t>(s.w) + ix];
      }
    }
  }
  return acc;
}

inline std::size_t conv_flops(const Conv2dShape& s) {
  return s.n * s.oc * s.oh * s.ow * s.ic * s.kh * s.kw;
}

}  // namespace

void conv2d_serial(const double* x, const double* wgt, double* out,
                   const Conv2dShape& s) {
  for (std::size_t img = 0; img < s.n; ++img)
    for (std::size_t oc = 0; oc < s.oc; ++oc) {
      double* oplane = out + (img * s.oc + oc) * s.oh * s.ow;
      for (std::size_t oy = 0; oy < s.oh; ++oy)
        for (std::size_t ox = 0; ox < s.ow; ++ox)
          oplane[oy * s.ow + ox] = conv_out_at(x, wgt, s, img, oc, oy, ox);
    }
}

void conv2d(const double* x, const double* wgt, double* out,
            const Conv2dShape& s) {
  if (!parallel_enabled() || conv_flops(s) < kParallelCutoff) {
    conv2d_serial(x, wgt, out, s);
    return;
  }
  const std::int64_t planes = static_cast<std::int64_t>(s.n * s.oc);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::size_t img = static_cast<std::size_t>(p) / s.oc;
    const std::size_t oc = static_cast<std::size_t>(p) % s.oc;
    double* oplane = out + static_cast<std::size_t>(p) * s.oh * s.ow;
    for (std::size_t oy = 0; oy < s.oh; ++oy)
      for (std::size_t ox = 0; ox < s.ow; ++ox)
        oplane[oy * s.ow + ox] = conv_out_at(x, wgt, s, img, oc, oy, ox);
  }
}

void conv2d_grad_input_serial(const double* dout, const double* wgt,
                              double* dx, const Conv2dShape& s) {
  for (std::size_t img = 0; img < s.n; ++img)
    for (std::size_t ic = 0; ic < s.ic; ++ic) {
      double* plane = dx + (img * s.ic + ic) * s.h * s.w;
      for (std::size_t iy = 0; iy < s.h; ++iy)
        for (std::size_t ix = 0; ix < s.w; ++ix)
          plane[iy * s.w + ix] = conv_dx_at(dout, wgt, s, img, ic, iy, ix);
    }
}

void conv2d_grad_input(const double* dout, const double* wgt, double* dx,
                       const Conv2dShape& s) {
  if (!parallel_enabled() || conv_flops(s) < kParallelCutoff) {
    conv2d_grad_input_serial(dout, wgt, dx, s);
    return;
  }
  const std::int64_t planes = static_cast<std::int64_t>(s.n * s.ic);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::size_t img = static_cast<std::size_t>(p) / s.ic;
    const std::size_t ic = static_cast<std::size_t>(p) % s.ic;
    double* plane = dx + static_cast<std::size_t>(p) * s.h * s.w;
    for (std::size_t iy = 0; iy < s.h; ++iy)
      for (std::size_t ix = 0; ix < s.w; ++ix)
        plane[iy * s.w + ix] = conv_dx_at(dout, wgt, s, img, ic, iy, ix);
  }
}

void conv2d_grad_weight_serial(const double* dout, const double* x, double* dw,
                               const Conv2dShape& s) {
  for (std::size_t oc = 0; oc < s.oc; ++oc)
    for (std::size_t ic = 0; ic < s.ic; ++ic) {
      double* ker = dw + (oc * s.ic + ic) * s.kh * s.kw;
      for (std::size_t ky = 0; ky < s.kh; ++ky)
        for (std::size_t kx = 0; kx < s.kw; ++kx)
          ker[ky * s.kw + kx] = conv_dw_at(dout, x, s, oc, ic, ky, kx);
    }
}

void conv2d_grad_weight(const double* dout, const double* x, double* dw,
                        const Conv2dShape& s) {
  if (!parallel_enabled() || conv_flops(s) < kParallelCutoff) {
    conv2d_grad_weight_serial(dout, x, dw, s);
    return;
  }
  const std::int64_t filters = static_cast<std::int64_t>(s.oc * s.ic);
#pragma omp parallel for schedule(static)
  for (std::int64_t f = 0; f < filters; ++f) {
    const std::size_t oc = static_cast<std::size_t>(f) / s.ic;
    const std::size_t ic = static_cast<std::size_t>(f) % s.ic;
    double* ker = dw + static_cast<std::size_t>(f) * s.kh * s.kw;
    for (std::size_t ky = 0; ky < s.kh; ++ky)
      for (std::size_t kx = 0; kx < s.kw; ++kx)
        ker[ky * s.kw + kx] = conv_dw_at(dout, x, s, oc, ic, ky, kx);
  }
}

namespace {

inline double block_sum(const double* x, std::size_t lo, std::size_t hi) {
  double acc = 0.0;
  for (std::size_t i = lo; i < hi; ++i) acc += x[i];
  return acc;
}

}  // namespace

double sum_serial(const double* x, std::size_t n) {
  const std::size_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  double acc = 0.0;
  for (std::size_t b = 0; b < nblocks; ++b)
    acc += block_sum(x, b * kSumBlock, std::min(n, (b + 1) * kSumBlock));
  return acc;
}

double sum(const double* x, std::size_t n) {
  const std::size_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  if (!parallel_enabled() || nblocks < 4) return sum_serial(x, n);
  std::vector<double> partial(nblocks);
  const std::int64_t blocks = static_cast<std::int64_t>(nblocks);
#pragma omp parallel for schedule(static)
  for (std::int64_t b = 0; b < blocks; ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kSumBlock;
    partial[static_cast<std::size_t>(b)] = block_sum(x, lo, std::min(n, lo + kSumBlock));
  }
  double acc = 0.0;
  for (double p : partial) acc += p;
  return acc;
}

void add_serial(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  if (!parallel_enabled() || n < kParallelCutoff) {
    add_serial(a, b, out, n);
    return;
  }
  const std::int64_t len = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < len; ++i) out[i] = a[i] + b[i];
}

void mul_serial(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  if (!parallel_enabled() || n < kParallelCutoff) {
    mul_serial(a, b, out, n);
    return;
  }
  const std::int64_t len = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < len; ++i) out[i] = a[i] * b[i];
}

}  // namespace coda::kernels
