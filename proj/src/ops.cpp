#include "coda/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

#include "coda/common.hpp"
#include "coda/kernels.hpp"

namespace coda {

namespace {

void ensure_finite(const char* op, const std::vector<double>& values) {
  for (double v : values)
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + ": produced a non-finite value");
}

struct Bound {
  Tape* tape = nullptr;
  std::vector<int> ids;
};

// Resolves the tape shared by the inputs; detached inputs become constant
// leaves on it. With no attached input at all the op runs eagerly.
Bound bind_inputs(const char* op, std::initializer_list<const Tensor*> inputs) {
  Bound b;
  for (const Tensor* t : inputs) {
    if (!t->defined())
      throw Error(std::string(op) + ": undefined input tensor");
    if (t->attached()) {
      if (b.tape && b.tape != t->tape)
        throw Error(std::string(op) + ": inputs live on different tapes");
      b.tape = t->tape;
    }
  }
  if (!b.tape) return b;
  for (const Tensor* t : inputs)
    b.ids.push_back(t->attached() ? t->node : b.tape->constant(*t).node);
  return b;
}

bool any_needs_grad(const Tape& tape, const std::vector<int>& ids) {
  for (int id : ids)
    if (tape.node(id).needs_grad) return true;
  return false;
}

Tensor finish(const char* op, Op kind, const Bound& b, Shape shape,
              std::vector<double> values, double alpha = 0.0,
              kernels::Conv2dShape conv = {},
              std::shared_ptr<const std::vector<int>> iaux = nullptr,
              std::shared_ptr<const std::vector<double>> daux = nullptr) {
  ensure_finite(op, values);
  if (!b.tape) return Tensor(std::move(shape), std::move(values));
  Node n;
  n.op = kind;
  n.inputs = b.ids;
  n.shape = std::move(shape);
  n.value = std::make_shared<const std::vector<double>>(std::move(values));
  n.needs_grad = any_needs_grad(*b.tape, b.ids);
  n.alpha = alpha;
  n.conv = conv;
  n.iaux = std::move(iaux);
  n.daux = std::move(daux);
  return b.tape->record(std::move(n));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape) + " vs " + shape_str(b.shape));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.shape.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + " tensor, got " +
                     shape_str(t.shape));
}

std::vector<double> transpose2d(const std::vector<double>& m, std::size_t r,
                                std::size_t c) {
  std::vector<double> t(m.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = m[i * c + j];
  return t;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Per-feature reduction geometry for batch norm: the normalized axis is the
// channel axis of 4-D input or the feature axis of 2-D input.
struct BnGeom {
  std::size_t features;  // C
  std::size_t reduce;    // elements averaged per feature
  std::size_t outer;     // N
  std::size_t inner;     // H*W (1 for 2-D)
};

BnGeom bn_geom(const char* op, const Tensor& x) {
  if (x.shape.size() == 2) return {x.shape[1], x.shape[0], x.shape[0], 1};
  if (x.shape.size() == 4)
    return {x.shape[1], x.shape[0] * x.shape[2] * x.shape[3], x.shape[0],
            x.shape[2] * x.shape[3]};
  throw ShapeError(std::string(op) + ": expected 2-D or 4-D input, got " +
                   shape_str(x.shape));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Bound bd = bind_inputs("add", {&a, &b});
  std::vector<double> out(a.size());
  kernels::add(a.values().data(), b.values().data(), out.data(), out.size());
  return finish("add", Op::kAdd, bd, a.shape, std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Bound bd = bind_inputs("sub", {&a, &b});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] - b.values()[i];
  return finish("sub", Op::kSub, bd, a.shape, std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Bound bd = bind_inputs("mul", {&a, &b});
  std::vector<double> out(a.size());
  kernels::mul(a.values().data(), b.values().data(), out.data(), out.size());
  return finish("mul", Op::kMul, bd, a.shape, std::move(out));
}

Tensor scale(const Tensor& a, double c) {
  Bound bd = bind_inputs("scale", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  return finish("scale", Op::kScale, bd, a.shape, std::move(out), c);
}

Tensor add_scalar(const Tensor& a, double c) {
  Bound bd = bind_inputs("add_scalar", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
  return finish("add_scalar", Op::kAddScalar, bd, a.shape, std::move(out), c);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape) +
                     " x " + shape_str(b.shape));
  Bound bd = bind_inputs("matmul", {&a, &b});
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<double> out(m * n);
  kernels::matmul(a.values().data(), b.values().data(), out.data(), m, k, n);
  return finish("matmul", Op::kMatmul, bd, {m, n}, std::move(out));
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require_rank("add_rowvec", m, 2);
  require_rank("add_rowvec", v, 1);
  if (m.shape[1] != v.shape[0])
    throw ShapeError("add_rowvec: " + shape_str(m.shape) + " + " +
                     shape_str(v.shape));
  Bound bd = bind_inputs("add_rowvec", {&m, &v});
  const std::size_t r = m.shape[0], c = m.shape[1];
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = m.values()[i * c + j] + v.values()[j];
  return finish("add_rowvec", Op::kAddRowvec, bd, m.shape, std::move(out));
}

Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
  require_rank("mul_rowvec", m, 2);
  require_rank("mul_rowvec", v, 1);
  if (m.shape[1] != v.shape[0])
    throw ShapeError("mul_rowvec: " + shape_str(m.shape) + " * " +
                     shape_str(v.shape));
  Bound bd = bind_inputs("mul_rowvec", {&m, &v});
  const std::size_t r = m.shape[0], c = m.shape[1];
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = m.values()[i * c + j] * v.values()[j];
  return finish("mul_rowvec", Op::kMulRowvec, bd, m.shape, std::move(out));
}

Tensor add_chanvec(const Tensor& x, const Tensor& v) {
  require_rank("add_chanvec", x, 4);
  require_rank("add_chanvec", v, 1);
  if (x.shape[1] != v.shape[0])
    throw ShapeError("add_chanvec: " + shape_str(x.shape) + " + " +
                     shape_str(v.shape));
  Bound bd = bind_inputs("add_chanvec", {&x, &v});
  const std::size_t n = x.shape[0], c = x.shape[1],
                    hw = x.shape[2] * x.shape[3];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double b = v.values()[ch];
      const std::size_t base = (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p)
        out[base + p] = x.values()[base + p] + b;
    }
  return finish("add_chanvec", Op::kAddChanvec, bd, x.shape, std::move(out));
}

Tensor conv2d(const Tensor& x, const Tensor& w, Padding pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  if (x.shape[1] != w.shape[1])
    throw ShapeError("conv2d: input channels " + shape_str(x.shape) +
                     " vs weight " + shape_str(w.shape));
  kernels::Conv2dShape s;
  s.n = x.shape[0];
  s.ic = x.shape[1];
  s.h = x.shape[2];
  s.w = x.shape[3];
  s.oc = w.shape[0];
  s.kh = w.shape[2];
  s.kw = w.shape[3];
  if (pad == Padding::kSame) {
    s.pad_top = (s.kh - 1) / 2;
    s.pad_left = (s.kw - 1) / 2;
    s.oh = s.h;
    s.ow = s.w;
  } else {
    s.pad_top = 0;
    s.pad_left = 0;
    if (s.h < s.kh || s.w < s.kw)
      throw ShapeError("conv2d: kernel " + shape_str(w.shape) +
                       " larger than input " + shape_str(x.shape) +
                       " with valid padding");
    s.oh = s.h - s.kh + 1;
    s.ow = s.w - s.kw + 1;
  }
  Bound bd = bind_inputs("conv2d", {&x, &w});
  std::vector<double> out(s.n * s.oc * s.oh * s.ow);
  kernels::conv2d(x.values().data(), w.values().data(), out.data(), s);
  return finish("conv2d", Op::kConv2d, bd, {s.n, s.oc, s.oh, s.ow},
                std::move(out), 0.0, s);
}

Tensor relu(const Tensor& a) {
  Bound bd = bind_inputs("relu", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] > 0 ? a.values()[i] : 0.0;
  return finish("relu", Op::kRelu, bd, a.shape, std::move(out));
}

Tensor leaky_relu(const Tensor& a, double slope) {
  Bound bd = bind_inputs("leaky_relu", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = a.values()[i];
    out[i] = v > 0 ? v : slope * v;
  }
  return finish("leaky_relu", Op::kLeakyRelu, bd, a.shape, std::move(out),
                slope);
}

Tensor exp(const Tensor& a) {
  Bound bd = bind_inputs("exp", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::exp(a.values()[i]);
  return finish("exp", Op::kExp, bd, a.shape, std::move(out));
}

Tensor log(const Tensor& a) {
  Bound bd = bind_inputs("log", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::log(std::max(a.values()[i], kClampEps));
  return finish("log", Op::kLog, bd, a.shape, std::move(out));
}

Tensor sigmoid(const Tensor& a) {
  Bound bd = bind_inputs("sigmoid", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = stable_sigmoid(a.values()[i]);
  return finish("sigmoid", Op::kSigmoid, bd, a.shape, std::move(out));
}

namespace {

std::vector<double> softmax_rows(const Tensor& a) {
  const std::size_t r = a.shape[0], c = a.shape[1];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = a.values().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& a) {
  require_rank("softmax", a, 2);
  Bound bd = bind_inputs("softmax", {&a});
  return finish("softmax", Op::kSoftmax, bd, a.shape, softmax_rows(a));
}

Tensor log_softmax(const Tensor& a) {
  require_rank("log_softmax", a, 2);
  Bound bd = bind_inputs("log_softmax", {&a});
  const std::size_t r = a.shape[0], c = a.shape[1];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = a.values().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return finish("log_softmax", Op::kLogSoftmax, bd, a.shape, std::move(out));
}

Tensor abs(const Tensor& a) {
  Bound bd = bind_inputs("abs", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::abs(a.values()[i]);
  return finish("abs", Op::kAbs, bd, a.shape, std::move(out));
}

Tensor sum(const Tensor& a) {
  Bound bd = bind_inputs("sum", {&a});
  return finish("sum", Op::kSum, bd, {1},
                {kernels::sum(a.values().data(), a.size())});
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  Bound bd = bind_inputs("mean", {&a});
  return finish("mean", Op::kMean, bd, {1},
                {kernels::sum(a.values().data(), a.size()) /
                 static_cast<double>(a.size())});
}

Tensor mean_axis0(const Tensor& a) {
  require_rank("mean_axis0", a, 2);
  if (a.shape[0] == 0) throw ShapeError("mean_axis0: empty batch");
  Bound bd = bind_inputs("mean_axis0", {&a});
  const std::size_t r = a.shape[0], c = a.shape[1];
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.values()[i * c + j];
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
  return finish("mean_axis0", Op::kMeanAxis0, bd, {c}, std::move(out));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " +
                     shape_str(shape));
  Bound bd = bind_inputs("reshape", {&a});
  return finish("reshape", Op::kReshape, bd, std::move(shape), a.values());
}

Tensor concat0(const Tensor& a, const Tensor& b) {
  if (a.shape.empty() || b.shape.empty() || a.shape.size() != b.shape.size())
    throw ShapeError("concat0: rank mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  for (std::size_t d = 1; d < a.shape.size(); ++d)
    if (a.shape[d] != b.shape[d])
      throw ShapeError("concat0: trailing dims differ, " + shape_str(a.shape) +
                       " vs " + shape_str(b.shape));
  Bound bd = bind_inputs("concat0", {&a, &b});
  Shape shape = a.shape;
  shape[0] += b.shape[0];
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return finish("concat0", Op::kConcat0, bd, std::move(shape), std::move(out));
}

Tensor maxpool2(const Tensor& x) {
  require_rank("maxpool2", x, 4);
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2],
                    w = x.shape[3];
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("maxpool2: spatial dims must be even, got " +
                     shape_str(x.shape));
  Bound bd = bind_inputs("maxpool2", {&x});
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(n * c * oh * ow);
  auto argmax = std::make_shared<std::vector<int>>(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* plane = x.values().data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * oy + dy) * w + (2 * ox + dx);
            if (plane[idx] > plane[best]) best = idx;
          }
        const std::size_t o = p * oh * ow + oy * ow + ox;
        out[o] = plane[best];
        (*argmax)[o] = static_cast<int>(p * h * w + best);
      }
  }
  return finish("maxpool2", Op::kMaxPool2, bd, {n, c, oh, ow}, std::move(out),
                0.0, {}, std::move(argmax));
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  Bound bd = bind_inputs("global_avg_pool", {&x});
  const std::size_t n = x.shape[0], c = x.shape[1],
                    hw = x.shape[2] * x.shape[3];
  std::vector<double> out(n * c, 0.0);
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* plane = x.values().data() + p * hw;
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
    out[p] = acc / static_cast<double>(hw);
  }
  return finish("global_avg_pool", Op::kGlobalAvgPool, bd, {n, c},
                std::move(out));
}

Tensor clamp_max(const Tensor& a, double cap) {
  Bound bd = bind_inputs("clamp_max", {&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(a.values()[i], cap);
  return finish("clamp_max", Op::kClampMax, bd, a.shape, std::move(out), cap);
}

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps) {
  const BnGeom g = bn_geom("batchnorm", x);
  require_rank("batchnorm", gamma, 1);
  require_rank("batchnorm", beta, 1);
  if (gamma.shape[0] != g.features || beta.shape[0] != g.features)
    throw ShapeError("batchnorm: scale/shift must have " +
                     std::to_string(g.features) + " features, got " +
                     shape_str(gamma.shape) + " / " + shape_str(beta.shape));
  if (g.outer < 2)
    throw ShapeError("batchnorm: train mode needs batch size >= 2");

  Bound bd = bind_inputs("batchnorm", {&x, &gamma, &beta});
  // daux layout: mu[features] then invstd[features].
  auto daux = std::make_shared<std::vector<double>>(2 * g.features, 0.0);
  std::vector<double> out(x.size());
  for (std::size_t f = 0; f < g.features; ++f) {
    double m = 0.0;
    for (std::size_t o = 0; o < g.outer; ++o) {
      const std::size_t base = (o * g.features + f) * g.inner;
      for (std::size_t i = 0; i < g.inner; ++i) m += x.values()[base + i];
    }
    m /= static_cast<double>(g.reduce);
    double var = 0.0;
    for (std::size_t o = 0; o < g.outer; ++o) {
      const std::size_t base = (o * g.features + f) * g.inner;
      for (std::size_t i = 0; i < g.inner; ++i) {
        const double d = x.values()[base + i] - m;
        var += d * d;
      }
    }
    var /= static_cast<double>(g.reduce);
    const double invstd = 1.0 / std::sqrt(var + eps);
    (*daux)[f] = m;
    (*daux)[g.features + f] = invstd;
    const double sc = gamma.values()[f], sh = beta.values()[f];
    for (std::size_t o = 0; o < g.outer; ++o) {
      const std::size_t base = (o * g.features + f) * g.inner;
      for (std::size_t i = 0; i < g.inner; ++i)
        out[base + i] = sc * (x.values()[base + i] - m) * invstd + sh;
    }
  }
  return finish("batchnorm", Op::kBatchNorm, bd, x.shape, std::move(out), eps,
                {}, nullptr, std::move(daux));
}

Tensor l1_norm(const Tensor& a) { return sum(abs(a)); }

Tensor squared_l2_norm(const Tensor& a) { return sum(mul(a, a)); }

// ---------------------------------------------------------------------------
// Backward rules.
// ---------------------------------------------------------------------------

namespace detail {

namespace {

std::vector<double>& grad_slot(const Tape& tape, int id,
                               std::vector<std::vector<double>>& grads) {
  auto& slot = grads[static_cast<std::size_t>(id)];
  if (slot.empty()) slot.assign(tape.node(id).value->size(), 0.0);
  return slot;
}

bool wants(const Tape& tape, int id) { return tape.node(id).needs_grad; }

}  // namespace

void op_backward(const Tape& tape, int id,
                 std::vector<std::vector<double>>& grads) {
  const Node& n = tape.node(id);
  const std::vector<double>& g = grads[static_cast<std::size_t>(id)];
  const auto in = [&](std::size_t k) -> const Node& {
    return tape.node(n.inputs[k]);
  };
  const auto inval = [&](std::size_t k) -> const std::vector<double>& {
    return *in(k).value;
  };

  switch (n.op) {
    case Op::kLeaf:
      break;

    case Op::kAdd: {
      for (std::size_t k = 0; k < 2; ++k)
        if (wants(tape, n.inputs[k])) {
          auto& d = grad_slot(tape, n.inputs[k], grads);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      break;
    }
    case Op::kSub: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (wants(tape, n.inputs[1])) {
        auto& d = grad_slot(tape, n.inputs[1], grads);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
      break;
    }
    case Op::kMul: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& b = inval(1);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
      }
      if (wants(tape, n.inputs[1])) {
        auto& d = grad_slot(tape, n.inputs[1], grads);
        const auto& a = inval(0);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
      }
      break;
    }
    case Op::kScale: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.alpha;
      }
      break;
    }
    case Op::kAddScalar: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      break;
    }
    case Op::kMatmul: {
      const Node& na = in(0);
      const Node& nb = in(1);
      const std::size_t m = na.shape[0], k = na.shape[1], nn = nb.shape[1];
      if (wants(tape, n.inputs[0])) {
        // dA = g . B^T
        std::vector<double> bt = transpose2d(*nb.value, k, nn);
        std::vector<double> da(m * k);
        kernels::matmul(g.data(), bt.data(), da.data(), m, nn, k);
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += da[i];
      }
      if (wants(tape, n.inputs[1])) {
        // dB = A^T . g
        std::vector<double> at = transpose2d(*na.value, m, k);
        std::vector<double> db(k * nn);
        kernels::matmul(at.data(), g.data(), db.data(), k, m, nn);
        auto& d = grad_slot(tape, n.inputs[1], grads);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += db[i];
      }
      break;
    }
    case Op::kAddRowvec: {
      const std::size_t r = n.shape[0], c = n.shape[1];
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (wants(tape, n.inputs[1])) {
        auto& d = grad_slot(tape, n.inputs[1], grads);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) d[j] += g[i * c + j];
      }
      break;
    }
    case Op::kMulRowvec: {
      const std::size_t r = n.shape[0], c = n.shape[1];
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& v = inval(1);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[i * c + j] * v[j];
      }
      if (wants(tape, n.inputs[1])) {
        auto& d = grad_slot(tape, n.inputs[1], grads);
        const auto& m = inval(0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) d[j] += g[i * c + j] * m[i * c + j];
      }
      break;
    }
    case Op::kAddChanvec: {
      const std::size_t nimg = n.shape[0], c = n.shape[1],
                        hw = n.shape[2] * n.shape[3];
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (wants(tape, n.inputs[1])) {
        auto& d = grad_slot(tape, n.inputs[1], grads);
        for (std::size_t i = 0; i < nimg; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) d[ch] += g[base + p];
          }
      }
      break;
    }
    case Op::kConv2d: {
      if (wants(tape, n.inputs[0])) {
        std::vector<double> dx(inval(0).size());
        kernels::conv2d_grad_input(g.data(), inval(1).data(), dx.data(),
                                   n.conv);
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dx[i];
      }
      if (wants(tape, n.inputs[1])) {
        std::vector<double> dw(inval(1).size());
        kernels::conv2d_grad_weight(g.data(), inval(0).data(), dw.data(),
                                    n.conv);
        auto& d = grad_slot(tape, n.inputs[1], grads);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dw[i];
      }
      break;
    }
    case Op::kRelu: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& x = inval(0);
        // Subgradient at exactly 0 is 0.
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0) d[i] += g[i];
      }
      break;
    }
    case Op::kLeakyRelu: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& x = inval(0);
        for (std::size_t i = 0; i < g.size(); ++i)
          d[i] += g[i] * (x[i] > 0 ? 1.0 : n.alpha);
      }
      break;
    }
    case Op::kExp: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& y = *n.value;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
      }
      break;
    }
    case Op::kLog: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& x = inval(0);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] >= kClampEps) d[i] += g[i] / x[i];
      }
      break;
    }
    case Op::kSigmoid: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& y = *n.value;
        for (std::size_t i = 0; i < g.size(); ++i)
          d[i] += g[i] * y[i] * (1.0 - y[i]);
      }
      break;
    }
    case Op::kSoftmax: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& y = *n.value;
        const std::size_t r = n.shape[0], c = n.shape[1];
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            dot += g[i * c + j] * y[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            d[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
        }
      }
      break;
    }
    case Op::kLogSoftmax: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& y = *n.value;  // log-probs
        const std::size_t r = n.shape[0], c = n.shape[1];
        for (std::size_t i = 0; i < r; ++i) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            d[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
        }
      }
      break;
    }
    case Op::kAbs: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& x = inval(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0)
            d[i] += g[i];
          else if (x[i] < 0)
            d[i] -= g[i];
        }
      }
      break;
    }
    case Op::kSum: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0];
      }
      break;
    }
    case Op::kMean: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const double s = g[0] / static_cast<double>(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s;
      }
      break;
    }
    case Op::kMeanAxis0: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const std::size_t r = in(0).shape[0], c = in(0).shape[1];
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            d[i * c + j] += g[j] / static_cast<double>(r);
      }
      break;
    }
    case Op::kReshape: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      break;
    }
    case Op::kConcat0: {
      const std::size_t asize = inval(0).size();
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        for (std::size_t i = 0; i < asize; ++i) d[i] += g[i];
      }
      if (wants(tape, n.inputs[1])) {
        auto& d = grad_slot(tape, n.inputs[1], grads);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[asize + i];
      }
      break;
    }
    case Op::kMaxPool2: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& arg = *n.iaux;
        for (std::size_t i = 0; i < g.size(); ++i)
          d[static_cast<std::size_t>(arg[i])] += g[i];
      }
      break;
    }
    case Op::kGlobalAvgPool: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const std::size_t hw = in(0).shape[2] * in(0).shape[3];
        for (std::size_t p = 0; p < g.size(); ++p) {
          const double s = g[p] / static_cast<double>(hw);
          for (std::size_t i = 0; i < hw; ++i) d[p * hw + i] += s;
        }
      }
      break;
    }
    case Op::kClampMax: {
      if (wants(tape, n.inputs[0])) {
        auto& d = grad_slot(tape, n.inputs[0], grads);
        const auto& x = inval(0);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] < n.alpha) d[i] += g[i];
      }
      break;
    }
    case Op::kBatchNorm: {
      const Node& nx = in(0);
      const BnGeom geo = nx.shape.size() == 2
                             ? BnGeom{nx.shape[1], nx.shape[0], nx.shape[0], 1}
                             : BnGeom{nx.shape[1],
                                      nx.shape[0] * nx.shape[2] * nx.shape[3],
                                      nx.shape[0], nx.shape[2] * nx.shape[3]};
      const auto& x = inval(0);
      const auto& gamma = inval(1);
      const double* mu = n.daux->data();
      const double* invstd = n.daux->data() + geo.features;

      const bool wx = wants(tape, n.inputs[0]);
      const bool wg = wants(tape, n.inputs[1]);
      const bool wb = wants(tape, n.inputs[2]);
      for (std::size_t f = 0; f < geo.features; ++f) {
        double gsum = 0.0, gxhat = 0.0;
        for (std::size_t o = 0; o < geo.outer; ++o) {
          const std::size_t base = (o * geo.features + f) * geo.inner;
          for (std::size_t i = 0; i < geo.inner; ++i) {
            const double xhat = (x[base + i] - mu[f]) * invstd[f];
            gsum += g[base + i];
            gxhat += g[base + i] * xhat;
          }
        }
        if (wb) grad_slot(tape, n.inputs[2], grads)[f] += gsum;
        if (wg) grad_slot(tape, n.inputs[1], grads)[f] += gxhat;
        if (wx) {
          auto& d = grad_slot(tape, n.inputs[0], grads);
          const double m = static_cast<double>(geo.reduce);
          const double k = gamma[f] * invstd[f] / m;
          for (std::size_t o = 0; o < geo.outer; ++o) {
            const std::size_t base = (o * geo.features + f) * geo.inner;
            for (std::size_t i = 0; i < geo.inner; ++i) {
              const double xhat = (x[base + i] - mu[f]) * invstd[f];
              d[base + i] += k * (m * g[base + i] - gsum - xhat * gxhat);
            }
          }
        }
      }
      break;
    }
  }
}

}  // namespace detail

}  // namespace coda
