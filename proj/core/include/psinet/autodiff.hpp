#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "psinet/tensor.hpp"

namespace psinet::ad {

/// Storage behind a Variable: a value plus a lazily allocated gradient.
struct Node {
  Tensor value;
  Tensor grad;  // empty until the first accumulation
  bool requires_grad = false;

  bool has_grad() const noexcept { return !grad.empty(); }
  /// Returns the gradient buffer, allocating zeros on first use.
  Tensor& grad_buffer();
};

/// Shared handle to a Node. Copies alias the same value and gradient.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  /// Accumulated gradient, or zeros of the value's shape when nothing reached it.
  Tensor grad() const;
  bool has_grad() const noexcept { return node_ && node_->has_grad(); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations.
///
/// Ops whose operands all have requires_grad == false are not recorded.
/// backward() replays recorded entries in exact reverse order.
class Tape {
 public:
  void record(std::string op, std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure.
  void backward(const Variable& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<std::string>& op_names() const noexcept { return names_; }
  /// Entry indices in the order the last backward() visited them.
  const std::vector<std::size_t>& last_backward_order() const noexcept {
    return visited_;
  }
  void clear();

 private:
  std::vector<std::string> names_;
  std::vector<std::function<void()>> entries_;
  std::vector<std::size_t> visited_;
};

// -- element-wise and reductions ---------------------------------------------

Variable add(Tape& tape, const Variable& a, const Variable& b);
Variable sub(Tape& tape, const Variable& a, const Variable& b);
Variable mul(Tape& tape, const Variable& a, const Variable& b);
Variable scale(Tape& tape, const Variable& a, float factor);
Variable relu(Tape& tape, const Variable& x);
/// Sum of all elements, shape [1].
Variable sum(Tape& tape, const Variable& x);
/// Mean of all elements, shape [1].
Variable mean(Tape& tape, const Variable& x);

// -- shape plumbing -----------------------------------------------------------

Variable reshape(Tape& tape, const Variable& x, Shape shape);
/// Concatenates along axis 0; trailing dimensions must agree.
Variable concat(Tape& tape, std::span<const Variable> parts);
/// Keeps channel blocks `blocks` (each `block_size` channels) of an NCHW or NC
/// tensor, in the given order.
Variable select_channel_blocks(Tape& tape, const Variable& x,
                               std::size_t block_size,
                               std::span<const std::size_t> blocks);

// -- dense algebra ------------------------------------------------------------

/// [M,K] x [K,N] -> [M,N].
Variable matmul(Tape& tape, const Variable& a, const Variable& b);
/// x[N,in] * W[out,in]^T + b[out]. `bias` may be undefined.
Variable linear(Tape& tape, const Variable& x, const Variable& weight,
                const Variable& bias);

/// Linear map whose output rows each read one contiguous input block.
///
/// Input x is [N, F] with F = num_blocks * block. Row r of W ([R, block])
/// reads block row_block[r] and writes output column out_col[r] of a
/// [N, out_width] result. Columns no row writes are set to `fill` and carry no
/// gradient. Connections outside a row's block do not exist.
Variable block_linear(Tape& tape, const Variable& x, const Variable& weight,
                      const Variable& bias, std::size_t num_blocks,
                      std::span<const std::size_t> row_block,
                      std::span<const std::size_t> out_col,
                      std::size_t out_width, float fill);

// -- convolution and pooling --------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

/// NCHW convolution. weight: [Cout, Cin/groups, K, K], bias: [Cout] or undefined.
/// Output block k depends on input block k only; each group runs the same
/// kernel as an ungrouped convolution over its channel slice.
Variable conv2d(Tape& tape, const Variable& x, const Variable& weight,
                const Variable& bias, Conv2dOptions options = {});

Variable maxpool2d(Tape& tape, const Variable& x, std::size_t kernel,
                   std::size_t stride);

// -- normalization ------------------------------------------------------------

inline constexpr float kNormEpsilon = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

/// Batch normalization over N(,H,W) per channel.
///
/// In training mode normalizes with batch statistics and updates
/// running_mean / running_var (unbiased variance) with `momentum`.
/// In eval mode uses the running statistics as constants.
Variable batch_norm(Tape& tape, const Variable& x, const Variable& gamma,
                    const Variable& beta, Tensor& running_mean,
                    Tensor& running_var, bool training,
                    float momentum = kBatchNormMomentum,
                    float eps = kNormEpsilon);

/// Group normalization: statistics per (sample, group) over the group's
/// channels and all spatial positions. gamma/beta are per channel.
Variable group_norm(Tape& tape, const Variable& x, const Variable& gamma,
                    const Variable& beta, std::size_t groups,
                    float eps = kNormEpsilon);

// -- loss ---------------------------------------------------------------------

/// Mean softmax cross-entropy of logits [N,C] against integer labels.
Variable softmax_cross_entropy(Tape& tape, const Variable& logits,
                               std::span<const int> labels);

// -- helpers ------------------------------------------------------------------

/// Throws NumericError naming `op` if any element is NaN/Inf.
void require_finite(const Tensor& t, const char* op);

}  // namespace psinet::ad
