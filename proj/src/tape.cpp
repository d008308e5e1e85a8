#include "coda/tape.hpp"

#include <cmath>

#include "coda/common.hpp"

namespace coda {

namespace detail {
// Implemented in ops.cpp next to the forward rules.
void op_backward(const Tape& tape, int id, std::vector<std::vector<double>>& grads);
}  // namespace detail

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kAddRowvec: return "add_rowvec";
    case Op::kMulRowvec: return "mul_rowvec";
    case Op::kAddChanvec: return "add_chanvec";
    case Op::kConv2d: return "conv2d";
    case Op::kRelu: return "relu";
    case Op::kLeakyRelu: return "leaky_relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kAbs: return "abs";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kMeanAxis0: return "mean_axis0";
    case Op::kReshape: return "reshape";
    case Op::kConcat0: return "concat0";
    case Op::kMaxPool2: return "maxpool2";
    case Op::kGlobalAvgPool: return "global_avg_pool";
    case Op::kClampMax: return "clamp_max";
    case Op::kBatchNorm: return "batchnorm";
  }
  return "?";
}

bool Gradients::has(const Tensor& t) const {
  return t.attached() && t.node >= 0 &&
         static_cast<std::size_t>(t.node) < grads_.size() &&
         !grads_[static_cast<std::size_t>(t.node)].empty();
}

const std::vector<double>& Gradients::at(const Tensor& t) const {
  if (!t.attached())
    throw Error("gradients: tensor is not attached to a tape");
  if (!has(t))
    throw Error("gradients: no gradient recorded for node " +
                std::to_string(t.node));
  return grads_[static_cast<std::size_t>(t.node)];
}

Tensor Tape::leaf(const Tensor& value, bool requires_grad) {
  if (!value.defined()) throw Error("tape: leaf from undefined tensor");
  for (double v : value.values())
    if (!std::isfinite(v))
      throw NumericError("tape: leaf holds a non-finite value");
  Node n;
  n.op = Op::kLeaf;
  n.shape = value.shape;
  n.value = value.data;
  n.needs_grad = requires_grad;
  return record(std::move(n));
}

Tensor Tape::record(Node node) {
  if (consumed_)
    throw Error("tape: already consumed by backward; reset() before reuse");
  const int id = static_cast<int>(nodes_.size());
  Tensor out;
  out.shape = node.shape;
  out.data = node.value;
  out.tape = this;
  out.node = id;
  out.requires_grad = node.needs_grad;
  nodes_.push_back(std::move(node));
  return out;
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

Gradients Tape::backward(const Tensor& loss) {
  if (!loss.attached())
    throw Error("backward: loss tensor is detached from any tape");
  if (loss.tape != this)
    throw Error("backward: loss belongs to a different tape");
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape));
  if (consumed_) throw Error("backward: tape already consumed");
  consumed_ = true;

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.node)] = {1.0};

  for (int id = loss.node; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || grads[static_cast<std::size_t>(id)].empty()) continue;
    if (n.op == Op::kLeaf) continue;
    detail::op_backward(*this, id, grads);
  }

  // Contract: every requires_grad leaf gets a gradient, zero when unreached.
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::kLeaf && n.needs_grad && grads[id].empty())
      grads[id].assign(n.value->size(), 0.0);
  }
  return Gradients(std::move(grads));
}

}  // namespace coda
