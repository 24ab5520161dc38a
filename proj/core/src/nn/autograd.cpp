#include "tokenrank/nn/autograd.hpp"

#include <unordered_set>

#include "tokenrank/nn/errors.hpp"

namespace tokenrank::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

Parameter::Parameter(std::string n, Tensor init, bool train)
    : name(std::move(n)), value(std::move(init)), grad(value.shape()), trainable(train) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0F);
  }
}

void zero_grads(const ParameterRefs& params) {
  for (auto* p : params) p->zero_grad();
}

void set_trainable(const ParameterRefs& params, bool trainable) {
  for (auto* p : params) p->trainable = trainable;
}

Tensor& detail::Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(val().shape());
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::param(Parameter& p) {
  auto node = std::make_shared<detail::Node>();
  node->external = &p.value;
  node->param = &p;
  node->requires_grad = p.trainable && g_grad_enabled;
  return Var(std::move(node));
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined value");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward expects a single-element loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0F;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->grad.empty()) continue;
    if (node->backward) node->backward(*node);
    if (node->param != nullptr && node->param->trainable) {
      Tensor& dst = node->param->grad;
      if (dst.shape() != node->grad.shape()) dst = Tensor(node->grad.shape());
      for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += node->grad[i];
    }
  }
}

}  // namespace tokenrank::nn
