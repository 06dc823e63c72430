// SPDX-License-Identifier: Apache-2.0

#include "deskpt/tensor/graph.hpp"

#include "deskpt/error.hpp"

namespace deskpt {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scale: return "scale";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sqrt: return "sqrt";
    case OpKind::square: return "square";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::silu: return "silu";
    case OpKind::rms_normalize: return "rms_normalize";
    case OpKind::causal_softmax: return "causal_softmax";
    case OpKind::embed_lookup: return "embed_lookup";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::rotate_half: return "rotate_half";
  }
  return "unknown";
}

namespace {
template <Real T>
Graph<T>*& active_slot() {
  thread_local Graph<T>* graph = nullptr;
  return graph;
}
}  // namespace

template <Real T>
Graph<T>* active_graph() {
  return active_slot<T>();
}
template Graph<float>* active_graph<float>();
template Graph<double>* active_graph<double>();

template <Real T>
void Graph<T>::record(OpKind kind, std::vector<Tensor<T>> inputs, const Tensor<T>& output,
                      BackwardFn backward) {
  if (consumed_) throw GraphError("cannot record into a consumed graph");
  nodes_.push_back(Node{kind, std::move(inputs), output, std::move(backward)});
}

template <Real T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw GraphError("graph already consumed by a previous backward pass");
  if (!loss.defined() || loss.numel() != 1) {
    throw GraphError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw GraphError("loss was not produced through the recorded graph");
  }
  loss.mutable_grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward(it->output);
    // Intermediate gradients are dead once propagated.
    if (!it->output.same_storage(loss)) it->output.clear_grad();
  }
  consumed_ = true;
  nodes_.clear();
  nodes_.shrink_to_fit();
}

template <Real T>
GraphScope<T>::GraphScope(Graph<T>& graph) : previous_(active_slot<T>()) {
  active_slot<T>() = &graph;
}

template <Real T>
GraphScope<T>::~GraphScope() {
  active_slot<T>() = previous_;
}

template <Real T>
NoGradScope<T>::NoGradScope() : previous_(active_slot<T>()) {
  active_slot<T>() = nullptr;
}

template <Real T>
NoGradScope<T>::~NoGradScope() {
  active_slot<T>() = previous_;
}

template class Graph<float>;
template class Graph<double>;
template class GraphScope<float>;
template class GraphScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

}  // namespace deskpt
