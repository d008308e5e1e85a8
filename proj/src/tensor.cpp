#include "coda/tensor.hpp"

#include <sstream>

namespace coda {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)) {
  if (shape_size(shape) != values.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  data = std::make_shared<const std::vector<double>>(std::move(values));
}

double Tensor::scalar() const {
  if (size() != 1)
    throw ShapeError("tensor: scalar() on shape " + shape_str(shape));
  return (*data)[0];
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  return t;
}

Tensor tensor_full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(shape_size(shape), value));
}

Tensor tensor_zeros(const Shape& shape) { return tensor_full(shape, 0.0); }

Tensor tensor_scalar(double value) { return Tensor({1}, {value}); }

bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape;
}

}  // namespace coda
