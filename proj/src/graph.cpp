#include "mtunet/graph.hpp"

#include <algorithm>
#include <cassert>

#include "mtunet/error.hpp"

namespace mtunet {

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  value.check_finite("graph constant");
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Graph::variable(Tensor value) {
  value.check_finite("graph variable");
  Node n;
  n.owned = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

Var Graph::reference(const Tensor& value) {
  value.check_finite("graph reference");
  Node n;
  n.external = &value;
  return push(std::move(n));
}

Var Graph::parameter(Tensor& param) {
  param.check_finite("parameter");
  Node n;
  n.external = &param;
  n.param = &param;
  n.needs_grad = true;
  return push(std::move(n));
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  value.check_finite("recorded op output");
  Node n;
  n.owned = std::move(value);
  n.inputs.reserve(inputs.size());
  for (Var in : inputs) {
    // Inputs always precede the node, so the tape cannot contain a cycle.
    assert(in.id < nodes_.size());
    if (in.id >= nodes_.size()) throw DataError("graph input does not precede node");
    n.inputs.push_back(in.id);
    n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.owned;
}

std::span<double> Graph::grad_mut(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad.assign(value(v).numel(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (!value(loss).is_scalar()) {
    throw DataError("backward requires a scalar loss, got " + shape_to_string(value(loss).shape()));
  }
  const double one = 1.0;
  backward(loss, std::span<const double>(&one, 1));
}

void Graph::backward(Var output, std::span<const double> seed) {
  if (seed.size() != value(output).numel()) throw DataError("backward seed size mismatch");
  for (Node& n : nodes_) n.grad.clear();
  auto g = grad_mut(output);
  std::copy(seed.begin(), seed.end(), g.begin());
  run_backward(output.id);
}

void Graph::run_backward(std::size_t start) {
  for (std::size_t i = start + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // The callback may grow other nodes' grad buffers but never this one's.
    std::vector<double> out_grad = std::move(n.grad);
    n.backward(*this, out_grad);
    n.grad = std::move(out_grad);
  }
}

void Graph::accumulate_parameter_grads() {
  for (Node& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    auto dst = n.param->grad_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
  }
}

}  // namespace mtunet
