#pragma once

#include <map>
#include <span>
#include <string>

#include "psinet/model_params.hpp"
#include "psinet/tensor.hpp"

namespace psinet {

struct SgdOptions {
  float lr = 0.01f;
  float momentum = 0.0f;
  float weight_decay = 0.0f;
};

/// SGD with heavy-ball momentum, one velocity buffer per parameter name:
///
///   d = g + weight_decay * w
///   v = momentum * v + d      (v = d on the first step)
///   w = w - lr * v
class Sgd {
 public:
  explicit Sgd(SgdOptions options) : options_(options) {}

  const SgdOptions& options() const noexcept { return options_; }

  /// Updates one named parameter in place.
  void update(const std::string& name, std::span<float> weights,
              std::span<const float> grads);

  /// Updates every trainable entry of `params`; `grads` must hold a
  /// same-shaped gradient for each of them (AlignmentError otherwise).
  void step(ModelParams& params, const ModelParams& grads);

  void reset() { velocity_.clear(); }
  const std::map<std::string, Tensor>& velocity() const noexcept { return velocity_; }

 private:
  SgdOptions options_;
  std::map<std::string, Tensor> velocity_;
};

}  // namespace psinet
