#include "psinet/optim.hpp"

#include "psinet/error.hpp"

namespace psinet {

void Sgd::update(const std::string& name, std::span<float> weights,
                 std::span<const float> grads) {
  if (weights.size() != grads.size()) {
    throw AlignmentError("sgd: gradient for '" + name + "' has " +
                         std::to_string(grads.size()) + " elements, parameter has " +
                         std::to_string(weights.size()));
  }
  const float lr = options_.lr, mom = options_.momentum, wd = options_.weight_decay;
  if (mom == 0.0f) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      weights[i] -= lr * (grads[i] + wd * weights[i]);
    }
    return;
  }
  auto it = velocity_.find(name);
  const bool first = it == velocity_.end();
  if (first) it = velocity_.emplace(name, Tensor(Shape{weights.size()})).first;
  float* v = it->second.raw();
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const float d = grads[i] + wd * weights[i];
    v[i] = first ? d : mom * v[i] + d;
    weights[i] -= lr * v[i];
  }
}

void Sgd::step(ModelParams& params, const ModelParams& grads) {
  for (auto& [name, w] : params.tensors()) {
    if (is_buffer_param(name)) continue;
    if (!grads.contains(name)) {
      throw AlignmentError("sgd: missing gradient for parameter '" + name + "'");
    }
    const Tensor& g = grads.at(name);
    if (g.shape() != w.shape()) {
      throw AlignmentError("sgd: gradient for '" + name + "' has shape " +
                           shape_string(g.shape()) + ", parameter " +
                           shape_string(w.shape()));
    }
    update(name, w.data(), g.data());
  }
}

}  // namespace psinet
