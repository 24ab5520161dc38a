#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tokenrank/nn/tensor.hpp"

namespace tokenrank::nn {

/// A named trainable (or frozen) tensor. Gradients accumulate into `grad`
/// across backward() calls until zero_grad().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name, Tensor init, bool trainable = true);

  void zero_grad();
};

using ParameterRefs = std::vector<Parameter*>;

void zero_grads(const ParameterRefs& params);
void set_trainable(const ParameterRefs& params, bool trainable);

namespace detail {

struct Node {
  Tensor value;
  const Tensor* external = nullptr;  // parameter leaves alias the parameter value
  Tensor grad;
  Parameter* param = nullptr;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  const Tensor& val() const noexcept { return external != nullptr ? *external : value; }
  Tensor& grad_buffer();
};

}  // namespace detail

/// Handle to a value on the gradient tape. Copies share the node.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  /// Leaf bound to `p`. The Parameter must outlive every Var derived from it.
  static Var param(Parameter& p);

  const Tensor& value() const { return node_->val(); }
  const Shape& shape() const { return node_->val().shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode pass from a single-element `loss`. Every trainable Parameter
/// reachable from it receives d(loss)/d(param), added to its current grad.
/// Parameters not connected to the loss are left untouched.
void backward(const Var& loss);

}  // namespace tokenrank::nn
