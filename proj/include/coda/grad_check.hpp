#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "coda/common.hpp"
#include "coda/tape.hpp"
#include "coda/tensor.hpp"

namespace coda {

// Builds a scalar loss from a point bound on the given tape.
using ScalarGraphFn = std::function<Tensor(Tape&, const Tensor& point)>;

// Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), where g_ad
// is the reverse-mode gradient at `point` and g_fd the central finite
// difference with the given step. The graph function is re-run on fresh tapes
// for every probe, so anything it treats as constant stays constant.
inline double grad_check(const ScalarGraphFn& fn, const Tensor& point,
                         double step) {
  if (step <= 0) throw Error("grad_check: step must be positive");

  const auto eval_at = [&](const std::vector<double>& values) {
    Tape tape;
    Tensor x = tape.leaf(Tensor(point.shape, values), false);
    Tensor y = fn(tape, x);
    if (y.size() != 1)
      throw ShapeError("grad_check: graph output must be scalar, got " +
                       shape_str(y.shape));
    return y.scalar();
  };

  Tape tape;
  Tensor x = tape.leaf(point, true);
  Tensor y = fn(tape, x);
  if (y.size() != 1)
    throw ShapeError("grad_check: graph output must be scalar, got " +
                     shape_str(y.shape));
  const std::vector<double> g_ad = tape.backward(y).at(x);

  std::vector<double> probe = point.values();
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double up = eval_at(probe);
    probe[i] = saved - step;
    const double down = eval_at(probe);
    probe[i] = saved;
    const double fd = (up - down) / (2.0 * step);
    const double rel = std::abs(g_ad[i] - fd) /
                       std::max({1.0, std::abs(g_ad[i]), std::abs(fd)});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace coda
