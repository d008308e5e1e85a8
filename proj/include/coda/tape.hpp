#pragma once

#include <memory>
#include <vector>

#include "coda/kernels.hpp"
#include "coda/tensor.hpp"

namespace coda {

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatmul,
  kAddRowvec,
  kMulRowvec,
  kAddChanvec,
  kConv2d,
  kRelu,
  kLeakyRelu,
  kExp,
  kLog,
  kSigmoid,
  kSoftmax,
  kLogSoftmax,
  kAbs,
  kSum,
  kMean,
  kMeanAxis0,
  kReshape,
  kConcat0,
  kMaxPool2,
  kGlobalAvgPool,
  kClampMax,
  kBatchNorm,
};

const char* op_name(Op op);

// One forward record. `value` is shared with the tensor the op returned;
// `alpha`, `conv`, `iaux` and `daux` carry whatever the backward rule needs.
struct Node {
  Op op = Op::kLeaf;
  std::vector<int> inputs;
  Shape shape;
  std::shared_ptr<const std::vector<double>> value;
  bool needs_grad = false;
  double alpha = 0.0;
  kernels::Conv2dShape conv{};
  std::shared_ptr<const std::vector<int>> iaux;
  std::shared_ptr<const std::vector<double>> daux;
};

// Gradient per tape node, produced by Tape::backward. Leaves registered with
// requires_grad always have an entry (zero-filled when unreached).
class Gradients {
 public:
  explicit Gradients(std::vector<std::vector<double>> grads)
      : grads_(std::move(grads)) {}

  bool has(const Tensor& t) const;
  const std::vector<double>& at(const Tensor& t) const;

 private:
  std::vector<std::vector<double>> grads_;
};

// Record of one forward computation in execution order, which is a valid
// topological order by construction. Confined to a single thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(const Tensor& value, bool requires_grad);
  Tensor constant(const Tensor& value) { return leaf(value, false); }

  // Reverse sweep from `loss` (a scalar on this tape); each node is visited
  // exactly once. Consumes the tape: further records need reset().
  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  void reset();

  // Used by the op suite.
  Tensor record(Node node);
  bool consumed() const { return consumed_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace coda
