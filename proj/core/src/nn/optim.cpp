#include "tokenrank/nn/optim.hpp"

#include <cmath>

#include "tokenrank/nn/errors.hpp"

namespace tokenrank::nn {

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

Optimizer::Optimizer(ParameterRefs params, OptimizerConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0.0F)) throw ConfigError("learning rate must be positive");
  for (auto* p : params_) {
    first_moment_.emplace_back(p->value.shape());
    second_moment_.emplace_back(p->value.shape());
    if (p->grad.shape() != p->value.shape()) p->zero_grad();
  }
}

void Optimizer::step() {
  for (auto* p : params_) {
    if (!p->trainable) continue;
    if (!p->grad.all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + p->name + "' " + shape_str(p->value.shape()));
    }
  }
  ++steps_;
  const float lr = config_.lr;
  if (config_.kind == OptimizerKind::kSgd) {
    for (auto* p : params_) {
      if (!p->trainable) continue;
      for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] -= lr * p->grad[i];
    }
    return;
  }
  const auto t = static_cast<float>(steps_);
  const float c1 = 1.0F - std::pow(config_.beta1, t);
  const float c2 = 1.0F - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    if (!p.trainable) continue;
    Tensor& m = first_moment_[k];
    Tensor& v = second_moment_[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const float g = p.grad[i];
      m[i] = config_.beta1 * m[i] + (1.0F - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0F - config_.beta2) * g * g;
      p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

void Optimizer::zero_grad() { zero_grads(params_); }

}  // namespace tokenrank::nn
