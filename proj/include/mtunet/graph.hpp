#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "mtunet/tensor.hpp"

namespace mtunet {

/// Handle to a node recorded in a Graph.
struct Var {
  std::size_t id = 0;
};

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// Recorded values are never mutated; `backward` walks the tape once in
/// reverse and accumulates gradients additively across fan-out. A graph is
/// single-threaded; independent graphs may run concurrently.
class Graph {
 public:
  /// Receives the gradient of the node's output and scatters it into the
  /// gradients of its inputs via `Graph::grad_mut`.
  using BackwardFn = std::function<void(Graph&, std::span<const double> out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Leaf with no gradient.
  Var constant(Tensor value);
  /// Leaf that collects a gradient (an input being differentiated).
  Var variable(Tensor value);
  /// Leaf viewing an external tensor without copying it and without a
  /// gradient. The tensor must outlive the graph.
  Var reference(const Tensor& value);
  /// Leaf referencing an external parameter. The tensor must outlive the
  /// graph and must not change while the graph is alive.
  Var parameter(Tensor& param);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  /// Gradient accumulated for `v` by the last backward pass (empty if none).
  std::span<const double> grad(Var v) const { return nodes_.at(v.id).grad; }
  /// Zero-initialised on first access; used by backward functions.
  std::span<double> grad_mut(Var v);

  /// Seeds d(loss)/d(loss) = 1; `loss` must be a scalar node.
  void backward(Var loss);
  /// Seeds the gradient of `output` with an externally computed buffer.
  void backward(Var output, std::span<const double> seed);

  /// Adds gradients of all parameter leaves into their tensors' grad buffers.
  void accumulate_parameter_grads();

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<double> grad;
    bool needs_grad = false;
  };

  Var push(Node node);
  void run_backward(std::size_t start);

  std::deque<Node> nodes_;  // stable addresses across push_back
};

}  // namespace mtunet
