#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "coda/layers.hpp"

namespace coda {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected Adam over a fixed parameter list. Moments align
// with the list order; t advances once per step.
class Adam {
 public:
  Adam(AdamConfig cfg, std::vector<ParamPtr> params);

  // grad_of must return the gradient for every registered parameter.
  void step(const std::function<const std::vector<double>&(const Parameter&)>& grad_of);

  std::uint64_t t() const { return t_; }
  const std::vector<ParamPtr>& params() const { return params_; }

  // Checkpoint access.
  std::vector<double>& moment1(std::size_t i) { return m_[i]; }
  std::vector<double>& moment2(std::size_t i) { return v_[i]; }
  void set_t(std::uint64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::vector<ParamPtr> params_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// Polyak averaging: shadow <- momentum * shadow + (1 - momentum) * param.
// Covers trainable parameters only; batch-norm running statistics are already
// moving averages and are read live.
class Ema {
 public:
  Ema(double momentum, const std::vector<ParamPtr>& params);

  void update();
  const std::vector<double>& shadow(const Parameter& p) const;
  std::vector<double>& shadow_mutable(const Parameter& p);
  void reset_to_params();

  const std::vector<ParamPtr>& params() const { return params_; }

  // Swaps shadow values into the live parameters for the scope lifetime;
  // evaluation runs against the averaged weights.
  class Swap {
   public:
    explicit Swap(Ema& ema);
    ~Swap();
    Swap(const Swap&) = delete;
    Swap& operator=(const Swap&) = delete;

   private:
    Ema& ema_;
  };

 private:
  double momentum_;
  std::vector<ParamPtr> params_;
  std::vector<std::vector<double>> shadow_;
  std::unordered_map<const Parameter*, std::size_t> index_;
};

}  // namespace coda
