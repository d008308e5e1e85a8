#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "coda/common.hpp"

namespace coda {

class Tape;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major value with shared immutable storage. A tensor produced by
// an op on an active tape carries the tape pointer and its node id; detached
// tensors (tape == nullptr) are plain values and safe to move across threads.
struct Tensor {
  Shape shape;
  std::shared_ptr<const std::vector<double>> data;
  Tape* tape = nullptr;
  int node = -1;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data ? data->size() : 0; }
  bool defined() const { return static_cast<bool>(data); }
  bool attached() const { return tape != nullptr; }
  const std::vector<double>& values() const { return *data; }

  double scalar() const;

  // Value copy with no tape attachment.
  Tensor detached() const;
};

Tensor tensor_full(const Shape& shape, double value);
Tensor tensor_zeros(const Shape& shape);
Tensor tensor_scalar(double value);

bool same_shape(const Tensor& a, const Tensor& b);

}  // namespace coda
