#pragma once

#include <cstddef>

// Dense numeric kernels behind the tensor op suite. Every kernel exists in a
// serial reference form and an OpenMP form. The parallel form distributes
// whole output elements (or whole partial blocks, for reductions) across
// threads while keeping the per-element accumulation order identical to the
// serial form, so both produce bit-identical results for any thread count.
namespace coda::kernels {

bool parallel_enabled();
void set_parallel(bool enabled);

// c[m x n] = a[m x k] * b[k x n], row-major.
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n);
void matmul_serial(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n);

// NCHW convolution, stride 1. Output is (n, oc, oh, ow) with
// oh = h + pad_top + pad_bottom - kh + 1 (callers precompute).
struct Conv2dShape {
  std::size_t n, ic, h, w;
  std::size_t oc, kh, kw;
  std::size_t pad_top, pad_left;
  std::size_t oh, ow;
};

void conv2d(const double* x, const double* wgt, double* out,
            const Conv2dShape& s);
void conv2d_serial(const double* x, const double* wgt, double* out,
                   const Conv2dShape& s);
void conv2d_grad_input(const double* dout, const double* wgt, double* dx,
                       const Conv2dShape& s);
void conv2d_grad_input_serial(const double* dout, const double* wgt,
                              double* dx, const Conv2dShape& s);
void conv2d_grad_weight(const double* dout, const double* x, double* dw,
                        const Conv2dShape& s);
void conv2d_grad_weight_serial(const double* dout, const double* x, double* dw,
                               const Conv2dShape& s);

// Blocked summation: fixed-size partial blocks combined in block order. The
// serial form walks the same blocks, so the result does not depend on the
// thread count.
double sum(const double* x, std::size_t n);
double sum_serial(const double* x, std::size_t n);

void add(const double* a, const double* b, double* out, std::size_t n);
void add_serial(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void mul_serial(const double* a, const double* b, double* out, std::size_t n);

}  // namespace coda::kernels
