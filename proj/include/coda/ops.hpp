#pragma once

#include "coda/tape.hpp"
#include "coda/tensor.hpp"

// Forward op suite. Each op validates shapes (errors name the op and the
// offending shapes), checks its output for NaN/Inf, and records a node when
// any input is attached to a tape. Ops over purely detached tensors run
// eagerly and return detached values.
namespace coda {

enum class Padding { kSame, kValid };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
// [r,c] matrix plus / times a length-c row vector broadcast over rows.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor mul_rowvec(const Tensor& m, const Tensor& v);
// NCHW tensor plus a length-C vector broadcast over each channel plane.
Tensor add_chanvec(const Tensor& x, const Tensor& v);

// Stride-1 NCHW convolution; weight is (oc, ic, kh, kw).
Tensor conv2d(const Tensor& x, const Tensor& w, Padding pad);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor exp(const Tensor& a);
// Natural log of max(x, kClampEps); the clamp zeroes the gradient below it.
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Row-wise over the class axis (last axis of a 2-D tensor), max-subtracted.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// (r, c) -> (c): column means over the batch axis.
Tensor mean_axis0(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat0(const Tensor& a, const Tensor& b);

// 2x2 window, stride 2; requires even spatial dims. Ties take the first
// element in scan order.
Tensor maxpool2(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);

// min(x, cap) elementwise; gradient passes only strictly below the cap.
Tensor clamp_max(const Tensor& a, double cap);

// Fused train-mode batch norm over the batch axis (2-D input) or over batch
// and spatial axes (4-D input). Uses biased variance; saves the statistics it
// needs for the backward rule on the tape.
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps);

// Compositions of the primitives above.
Tensor l1_norm(const Tensor& a);
Tensor squared_l2_norm(const Tensor& a);

}  // namespace coda
