#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pgl/ops.hpp"
#include "pgl/tape.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

/// Reverse-mode gradient of a scalar `output` with respect to each of
/// `inputs`, taken on the calling thread's active tape.
///
/// Inputs may be leaves or intermediate results. An input that is on the tape
/// but does not influence `output` receives a zero gradient. With
/// `create_graph` the backward pass is itself recorded, so the returned
/// gradients can be differentiated again.
inline std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs, bool create_graph = false) {
  if (!output.defined() || output.numel() != 1) {
    throw GradError("grad: output must be a scalar, got shape " +
                    (output.defined() ? to_string(output.shape()) : std::string("<undefined>")));
  }
  Tape& tape = Tape::active();
  auto out_node = output.node_on(tape.id());
  if (!out_node) throw GradError("grad: output is not recorded on the active tape");

  const std::size_t n_nodes = tape.size();
  std::vector<char> is_input(n_nodes, 0);
  std::vector<std::size_t> input_nodes;
  input_nodes.reserve(inputs.size());
  std::size_t lowest = n_nodes;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto node = inputs[i].defined() ? inputs[i].node_on(tape.id()) : std::nullopt;
    if (!node) throw GradError("grad: input " + std::to_string(i) + " is not recorded on the active tape");
    is_input[*node] = 1;
    input_nodes.push_back(*node);
    lowest = std::min(lowest, *node);
  }

  // Forward pass over the tape: which nodes depend on some input.
  std::vector<char> depends(n_nodes, 0);
  for (std::size_t k = lowest; k <= *out_node; ++k) {
    if (is_input[k]) {
      depends[k] = 1;
      continue;
    }
    const auto& e = tape.entry(k);
    for (const auto& in : e.inputs) {
      auto node = in.node_on(tape.id());
      if (node && depends[*node]) {
        depends[k] = 1;
        break;
      }
    }
  }

  EnableGradGuard mode(create_graph);
  std::vector<Tensor> grads(n_nodes);
  grads[*out_node] = Tensor(output.shape(), {1.0});

  for (std::size_t k = *out_node + 1; k-- > lowest;) {
    if (!depends[k] || !grads[k].defined()) continue;
    // Copies: recording new ops may grow the tape while we hold these.
    const TapeEntry entry = tape.entry(k);
    if (entry.is_leaf()) continue;
    if (create_graph && !entry.backward_recordable) {
      throw GradError("grad: op '" + entry.op + "' has no recorded backward rule; create_graph is unsupported through it");
    }
    std::vector<bool> needs(entry.inputs.size(), false);
    std::vector<std::size_t> nodes(entry.inputs.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < entry.inputs.size(); ++i) {
      auto node = entry.inputs[i].node_on(tape.id());
      if (node && *node < n_nodes && depends[*node]) {
        needs[i] = true;
        nodes[i] = *node;
        any = true;
      }
    }
    if (!any) continue;
    auto parts = entry.backward(entry.inputs, entry.output, grads[k], needs);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!needs[i] || !parts[i].defined()) continue;
      auto& slot = grads[nodes[i]];
      slot = slot.defined() ? add(slot, parts[i]) : parts[i];
    }
    if (!is_input[k]) grads[k] = Tensor();
  }

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& g = grads[input_nodes[i]];
    result.push_back(g.defined() ? g : Tensor::zeros(inputs[i].shape()));
  }
  return result;
}

inline std::vector<Tensor> grad(const Tensor& output, std::initializer_list<Tensor> inputs, bool create_graph = false) {
  std::vector<Tensor> v(inputs);
  return grad(output, std::span<const Tensor>(v), create_graph);
}

/// Central-difference estimate of d f / d x, one element at a time. `f` may
/// itself call grad(), which is how nested differences check second-order terms.
inline Tensor finite_difference_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw Error("finite_difference_oracle: eps must be positive");
  std::vector<double> base = x.values();
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += eps;
    minus[i] -= eps;
    double fp = f(Tensor(x.shape(), std::move(plus)));
    double fm = f(Tensor(x.shape(), std::move(minus)));
    out[i] = (fp - fm) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace pgl
