#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string_view>
#include <vector>

#include "psinet/dataset.hpp"

namespace psinet {

enum class PartitionScheme { iid, classes_per_node, dirichlet };

std::string_view to_string(PartitionScheme scheme);
PartitionScheme partition_scheme_from_string(std::string_view text);

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::iid;
  std::size_t nodes = 1;
  /// classes_per_node: classes held by every node.
  std::size_t classes_per_node = 0;
  /// dirichlet: concentration.
  double alpha = 0.5;
  /// dirichlet: proportions are redrawn until every node holds this many samples.
  std::size_t min_samples = 1;
  std::uint64_t seed = 0;
};

/// Local dataset LD(i) of one node as indices into the parent dataset.
struct NodePartition {
  std::size_t node = 0;
  std::vector<std::size_t> indices;
  /// Exactly the labels occurring in `indices`.
  std::set<std::size_t> classes;
};

/// Splits `ds` over spec.nodes nodes without duplication.
///   iid: every class is dealt over the nodes so per-class and total counts
///        differ by at most one between nodes;
///   classes_per_node: node i holds the C_node consecutive classes of a seeded
///        class permutation starting at floor(i*C/N) (cyclic), and receives an
///        equal shard (+-1) of each of them;
///   dirichlet: each class is split with proportions drawn from Dir(alpha).
/// Throws ConfigError on infeasible settings, reporting per-class demand.
std::vector<NodePartition> partition(const Dataset& ds, const PartitionSpec& spec);

/// Explicit per-node class lists; each class is split in equal shards among
/// the nodes that list it.
std::vector<NodePartition> partition_by_class_lists(
    const Dataset& ds, const std::vector<std::vector<std::size_t>>& node_classes,
    std::uint64_t seed);

/// Class sets chosen by the classes_per_node scheme, one per node.
std::vector<std::vector<std::size_t>> classes_per_node_assignment(std::size_t num_classes,
                                                                  std::size_t nodes,
                                                                  std::size_t per_node,
                                                                  std::uint64_t seed);

}  // namespace psinet
