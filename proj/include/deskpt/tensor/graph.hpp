// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "deskpt/tensor/tensor.hpp"

namespace deskpt {

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  div,
  scale,
  exp,
  log,
  sqrt,
  square,
  mean,
  sum,
  sigmoid,
  silu,
  rms_normalize,
  causal_softmax,
  embed_lookup,
  transpose,
  reshape,
  slice,
  concat,
  rotate_half,
};

std::string_view op_name(OpKind kind);

// Append-only tape of recorded operations. Every node's operands were
// produced before it, so a reverse sweep is a valid topological order.
template <Real T>
class Graph {
 public:
  // Reads output.grad() and accumulates into operand gradients.
  using BackwardFn = std::function<void(const Tensor<T>& output)>;

  struct Node {
    OpKind kind;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(OpKind kind, std::vector<Tensor<T>> inputs, const Tensor<T>& output,
              BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse. Leaf
  // gradients accumulate, so repeated uses of a tensor add up. The tape is
  // released afterwards; a second call throws GraphError.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::span<const Node> nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

template <Real T>
Graph<T>* active_graph();

// Routes ops recorded on this thread into `graph` for the scope's lifetime.
// Without an active graph ops run untracked.
template <Real T>
class GraphScope {
 public:
  explicit GraphScope(Graph<T>& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<T>* previous_;
};

// Suspends recording (evaluation, finite differences).
template <Real T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph<T>* previous_;
};

extern template class GraphScope<float>;
extern template class GraphScope<double>;
extern template class NoGradScope<float>;
extern template class NoGradScope<double>;

}  // namespace deskpt
