#include "coda/optim.hpp"

#include <cmath>

#include "coda/common.hpp"

namespace coda {

Adam::Adam(AdamConfig cfg, std::vector<ParamPtr> params)
    : cfg_(cfg), params_(std::move(params)) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::step(
    const std::function<const std::vector<double>&(const Parameter&)>& grad_of) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    const std::vector<double>& g = grad_of(p);
    if (g.size() != p.value.size())
      throw ShapeError("adam: gradient for " + p.name + " has " +
                       std::to_string(g.size()) + " values, parameter has " +
                       std::to_string(p.value.size()));
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw NumericError("adam: non-finite gradient for " + p.name);
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

Ema::Ema(double momentum, const std::vector<ParamPtr>& params)
    : momentum_(momentum) {
  for (const auto& p : params)
    if (p->trainable) {
      index_[p.get()] = params_.size();
      params_.push_back(p);
      shadow_.push_back(p->value);
    }
}

void Ema::update() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& value = params_[i]->value;
    auto& sh = shadow_[i];
    for (std::size_t j = 0; j < sh.size(); ++j)
      sh[j] = momentum_ * sh[j] + (1.0 - momentum_) * value[j];
  }
}

const std::vector<double>& Ema::shadow(const Parameter& p) const {
  auto it = index_.find(&p);
  if (it == index_.end())
    throw Error("ema: parameter " + p.name + " is not tracked");
  return shadow_[it->second];
}

std::vector<double>& Ema::shadow_mutable(const Parameter& p) {
  auto it = index_.find(&p);
  if (it == index_.end())
    throw Error("ema: parameter " + p.name + " is not tracked");
  return shadow_[it->second];
}

void Ema::reset_to_params() {
  for (std::size_t i = 0; i < params_.size(); ++i) shadow_[i] = params_[i]->value;
}

Ema::Swap::Swap(Ema& ema) : ema_(ema) {
  for (std::size_t i = 0; i < ema_.params_.size(); ++i)
    ema_.params_[i]->value.swap(ema_.shadow_[i]);
}

Ema::Swap::~Swap() {
  for (std::size_t i = 0; i < ema_.params_.size(); ++i)
    ema_.params_[i]->value.swap(ema_.shadow_[i]);
}

}  // namespace coda
