#pragma once

#include <string>
#include <vector>

#include "tokenrank/nn/autograd.hpp"

namespace tokenrank::nn {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

/// Adam defaults follow the common (0.9, 0.999, 1e-8) convention.
struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  float lr = 1e-3F;
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float eps = 1e-8F;
};

/// Applies updates to trainable parameters from their accumulated grads.
/// Frozen parameters (trainable == false) are skipped. Adam moments persist
/// per parameter for the optimizer's lifetime.
class Optimizer {
 public:
  Optimizer(ParameterRefs params, OptimizerConfig config);

  /// Throws NumericError naming the first parameter whose grad is non-finite;
  /// no parameter is modified in that case.
  void step();
  void zero_grad();

  const OptimizerConfig& config() const noexcept { return config_; }
  std::size_t steps_taken() const noexcept { return steps_; }

 private:
  ParameterRefs params_;
  OptimizerConfig config_;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
  std::size_t steps_ = 0;
};

}  // namespace tokenrank::nn
