#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "psinet/architecture.hpp"
#include "psinet/model_params.hpp"

namespace psinet {

/// Reorders the output neurons of layer `layer` (a conv or linear layer that
/// is not the classifier head): new channel j takes old channel perm[j].
///
/// Norm parameters between the layer and its consumer are permuted the same
/// way and the consumer's input dimension follows (through a flatten, each
/// channel moves its whole H*W feature block), so the network function is
/// unchanged. Throws InvarianceError when perm crosses a structure-group
/// boundary of the producer, of a grouped consumer, or of a group norm; throws
/// ConfigError when perm is not a bijection of the channel count.
ModelParams permute_neurons(const ArchitectureSpec& spec, const ModelParams& params,
                            std::string_view layer, std::span<const std::size_t> perm);

/// Uniform random permutation of `n` that keeps every index inside its block
/// of `block` consecutive indices (block == n gives an unrestricted shuffle).
template <class Rng>
std::vector<std::size_t> block_permutation(std::size_t n, std::size_t block, Rng& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t start = 0; start < n; start += block) {
    for (std::size_t i = std::min(n, start + block) - 1; i > start; --i) {
      const std::size_t j = start + static_cast<std::size_t>(rng() % (i - start + 1));
      std::swap(perm[i], perm[j]);
    }
  }
  return perm;
}

}  // namespace psinet
