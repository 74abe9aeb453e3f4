#pragma once

#include <cstddef>
#include <set>
#include <span>
#include <vector>

#include "psinet/architecture.hpp"
#include "psinet/model_params.hpp"

namespace psinet {

/// Contiguous balanced class blocks: the first C mod G groups get ceil(C/G)
/// classes, the rest floor(C/G). With `class_order` the blocks are cut from
/// that permutation of 0..C-1 instead of the identity. shared_depth is left at
/// -1 for the caller to set.
GroupMapping default_mapping(std::size_t num_classes, std::size_t group_count,
                             std::span<const std::size_t> class_order = {});

enum class SharedNorm { batch_norm, group_norm };

struct BuildOptions {
  /// Normalization kept in the shared layers. group_norm replaces every shared
  /// batch norm with a single-group group norm.
  SharedNorm shared_norm = SharedNorm::batch_norm;
};

/// Regulates an unregulated spec with `mapping`:
///   layers <= shared_depth stay as they are (shared);
///   conv above becomes grouped_conv(G) followed by group_norm(G) (an existing
///   batch norm is replaced; with G = 1 the batch norm is kept);
///   linear above becomes grouped_linear(G); the head is wired per mapping.
/// Throws ConfigError listing every layer whose channels do not divide by G,
/// or when shared_depth is out of range or not at a block boundary.
ArchitectureSpec build_psinet(const ArchitectureSpec& spec, const GroupMapping& mapping,
                              const BuildOptions& options = {});

/// trimmed[k] is true when structure group k maps no class of the node.
struct TrimMask {
  std::vector<bool> trimmed;

  std::size_t size() const noexcept { return trimmed.size(); }
  bool any() const noexcept;
  std::vector<std::size_t> kept() const;
  friend bool operator==(const TrimMask&, const TrimMask&) = default;
};

TrimMask compute_trim_mask(const GroupMapping& mapping, const std::set<std::size_t>& local_classes);

struct TrimResult {
  ArchitectureSpec spec;
  ModelParams params;
  TrimMask mask;
};

/// Removes every group whose classes are absent from `local_classes`. Kept
/// groups keep their global ids (parameter names "group<k>/..."). Throws
/// ConfigError when no group survives.
TrimResult trim_model(const ArchitectureSpec& spec, const ModelParams& params,
                      const std::set<std::size_t>& local_classes);

/// `spec` restricted to the kept groups of `mask` (no parameters involved).
ArchitectureSpec trim_spec(const ArchitectureSpec& spec, const TrimMask& mask);

}  // namespace psinet
