#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "psinet/architecture.hpp"
#include "psinet/autodiff.hpp"
#include "psinet/layers.hpp"
#include "psinet/model_params.hpp"

namespace psinet {

/// Fresh parameters for `spec`. Weights are drawn for the untrimmed structure
/// in param_layout order (He normal, LeCun normal for the head) and trimmed
/// groups are dropped afterwards, so every node derives identical values for
/// the groups it keeps. A G=1 Psi-Net draws exactly the values of its base
/// spec.
ModelParams init_params(const ArchitectureSpec& spec, std::uint64_t seed);

/// A parameter set materialized as tape leaves for one or more forward passes.
class BoundModel {
 public:
  BoundModel(ArchitectureSpec spec, const ModelParams& params, bool requires_grad = true);

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  bool has_param(std::string_view name) const;
  const ad::Variable& param(std::string_view name) const;
  Tensor& buffer(std::string_view name);

  /// Current values, buffers included.
  ModelParams params() const;
  /// Gradients of every trainable entry (zeros where nothing flowed).
  ModelParams grads() const;
  void zero_grad();
  /// Names of trainable entries in order.
  std::vector<std::string> trainable_names() const;
  /// Trainable leaves by name; values may be updated in place.
  std::map<std::string, ad::Variable, std::less<>>& variables() noexcept { return vars_; }

 private:
  ArchitectureSpec spec_;
  std::uint64_t fingerprint_;
  std::map<std::string, ad::Variable, std::less<>> vars_;
  std::map<std::string, Tensor, std::less<>> buffers_;
};

struct ForwardResult {
  ad::Variable logits;
  /// Output of the tapped layer when one was requested.
  ad::Variable tap;
};

/// Runs `spec` on an [N, C, H, W] batch. Train mode updates batch-norm
/// running statistics in `model`; eval mode throws StateError for batch-norm
/// layers that never saw a training batch.
ForwardResult forward(ad::Tape& tape, BoundModel& model, const ad::Variable& input,
                      Mode mode, std::optional<std::size_t> tap_layer = std::nullopt);

/// Eval-mode logits for `images`, computed in batches of `batch_size`.
Tensor predict(const ArchitectureSpec& spec, const ModelParams& params,
               const Tensor& images, std::size_t batch_size = 256);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

/// Mean cross-entropy and accuracy in eval mode.
EvalResult evaluate(const ArchitectureSpec& spec, const ModelParams& params,
                    const Tensor& images, std::span<const int> labels,
                    std::size_t batch_size = 256);

/// Layer whose output represents the channels of conv layer `conv_index`:
/// the activation closing its block before any pooling (the conv itself when
/// the block has no activation).
std::size_t activation_layer(const ArchitectureSpec& spec, std::size_t conv_index);

}  // namespace psinet
