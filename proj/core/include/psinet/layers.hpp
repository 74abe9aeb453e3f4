#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "psinet/architecture.hpp"
#include "psinet/tensor.hpp"

namespace psinet {

enum class Mode { train, eval };

/// Tensors of one layer keyed by role: "weight", "bias", and for batch norm
/// "running_mean", "running_var", "num_batches".
using LayerParams = std::map<std::string, Tensor, std::less<>>;

/// Logit value emitted for classes whose structure group was trimmed.
inline constexpr float kTrimmedLogit = -1e9f;

/// Grouped convolution: weight [Cout, Cin/g, K, K], bias [Cout].
/// Output block k is the convolution of input block k with weight rows of
/// block k. Throws ConfigError when Cin or Cout is not divisible by g.
Tensor grouped_conv_forward(const Tensor& input, const LayerParams& params,
                            std::size_t groups, std::size_t stride = 1,
                            std::size_t pad = 0);

/// Class-wired classifier head. `group_params[k]` holds weight
/// [|M(k)|, F/G] and bias [|M(k)|]; row r of group k produces the logit of
/// the r-th class of M(k) from feature block k only.
Tensor grouped_linear_forward(const Tensor& input,
                              std::span<const LayerParams> group_params,
                              const GroupMapping& mapping);

/// Train mode normalizes with batch statistics and updates the running
/// statistics; eval mode reads them and throws StateError if the layer has
/// never seen a training batch.
Tensor batch_norm_forward(const Tensor& input, LayerParams& params, Mode mode);

/// Statistics per (sample, group); identical in train and eval mode.
Tensor group_norm_forward(const Tensor& input, const LayerParams& params,
                          std::size_t groups);

/// Fresh batch-norm parameters: scale 1, shift 0, running mean 0, running
/// variance 1, zero batches seen.
LayerParams make_batch_norm_params(std::size_t channels);

}  // namespace psinet
