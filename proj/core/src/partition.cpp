#include "psinet/partition.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "psinet/error.hpp"

namespace psinet {

namespace {

void finish(std::vector<NodePartition>& parts, const Dataset& ds) {
  for (auto& p : parts) {
    std::sort(p.indices.begin(), p.indices.end());
    p.classes.clear();
    for (std::size_t i : p.indices) p.classes.insert(static_cast<std::size_t>(ds.labels[i]));
  }
}

std::vector<NodePartition> empty_parts(std::size_t nodes) {
  std::vector<NodePartition> parts(nodes);
  for (std::size_t i = 0; i < nodes; ++i) parts[i].node = i;
  return parts;
}

}  // namespace

std::string_view to_string(PartitionScheme scheme) {
  switch (scheme) {
    case PartitionScheme::iid:
      return "iid";
    case PartitionScheme::classes_per_node:
      return "classes_per_node";
    case PartitionScheme::dirichlet:
      return "dirichlet";
  }
  return "unknown";
}

PartitionScheme partition_scheme_from_string(std::string_view text) {
  for (auto s : {PartitionScheme::iid, PartitionScheme::classes_per_node,
                 PartitionScheme::dirichlet}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown partition scheme '" + std::string(text) +
                    "' (iid, classes_per_node, dirichlet)");
}

std::vector<std::vector<std::size_t>> classes_per_node_assignment(std::size_t num_classes,
                                                                  std::size_t nodes,
                                                                  std::size_t per_node,
                                                                  std::uint64_t seed) {
  if (per_node == 0 || per_node > num_classes) {
    throw ConfigError("classes_per_node " + std::to_string(per_node) + " outside [1, " +
                      std::to_string(num_classes) + "]");
  }
  if (nodes * per_node < num_classes) {
    throw ConfigError(std::to_string(nodes) + " nodes x " + std::to_string(per_node) +
                      " classes cannot cover " + std::to_string(num_classes) + " classes");
  }
  std::vector<std::size_t> order(num_classes);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0xc1a55));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out(nodes);
  for (std::size_t i = 0; i < nodes; ++i) {
    const std::size_t start = i * num_classes / nodes;
    for (std::size_t j = 0; j < per_node; ++j) {
      out[i].push_back(order[(start + j) % num_classes]);
    }
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

std::vector<NodePartition> partition_by_class_lists(
    const Dataset& ds, const std::vector<std::vector<std::size_t>>& node_classes,
    std::uint64_t seed) {
  if (node_classes.empty()) throw ConfigError("partition needs at least one node");
  const std::size_t C = ds.num_classes;
  std::vector<std::vector<std::size_t>> holders(C);
  for (std::size_t i = 0; i < node_classes.size(); ++i) {
    for (std::size_t c : node_classes[i]) {
      if (c >= C) throw ConfigError("node " + std::to_string(i) + " lists class " + std::to_string(c));
      if (std::find(holders[c].begin(), holders[c].end(), i) != holders[c].end()) {
        throw ConfigError("node " + std::to_string(i) + " lists class " + std::to_string(c) + " twice");
      }
      holders[c].push_back(i);
    }
  }
  auto by_class = ds.indices_by_class();
  std::string shortfall;
  for (std::size_t c = 0; c < C; ++c) {
    if (by_class[c].size() < holders[c].size()) {
      shortfall += " class " + std::to_string(c) + ": " + std::to_string(by_class[c].size()) +
                   " samples for " + std::to_string(holders[c].size()) + " nodes;";
    }
  }
  if (!shortfall.empty()) throw ConfigError("infeasible shard demand:" + shortfall);

  auto parts = empty_parts(node_classes.size());
  for (std::size_t c = 0; c < C; ++c) {
    if (holders[c].empty()) continue;
    std::mt19937_64 rng(derive_seed(seed, 0x5a4d, c));
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    const std::size_t h = holders[c].size(), n = by_class[c].size();
    std::size_t next = 0;
    for (std::size_t j = 0; j < h; ++j) {
      const std::size_t take = n / h + (j < n % h ? 1 : 0);
      auto& dst = parts[holders[c][j]].indices;
      dst.insert(dst.end(), by_class[c].begin() + next, by_class[c].begin() + next + take);
      next += take;
    }
  }
  finish(parts, ds);
  return parts;
}

std::vector<NodePartition> partition(const Dataset& ds, const PartitionSpec& spec) {
  if (spec.nodes == 0) throw ConfigError("partition needs at least one node");
  const std::size_t C = ds.num_classes;
  switch (spec.scheme) {
    case PartitionScheme::classes_per_node:
      return partition_by_class_lists(
          ds, classes_per_node_assignment(C, spec.nodes, spec.classes_per_node, spec.seed),
          spec.seed);
    case PartitionScheme::iid: {
      auto by_class = ds.indices_by_class();
      auto parts = empty_parts(spec.nodes);
      std::size_t dealer = 0;
      for (std::size_t c = 0; c < C; ++c) {
        std::mt19937_64 rng(derive_seed(spec.seed, 0x11d, c));
        std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
        for (std::size_t idx : by_class[c]) {
          parts[dealer].indices.push_back(idx);
          dealer = (dealer + 1) % spec.nodes;
        }
      }
      finish(parts, ds);
      return parts;
    }
    case PartitionScheme::dirichlet: {
      if (!(spec.alpha > 0.0)) throw ConfigError("dirichlet alpha must be > 0");
      if (spec.nodes * spec.min_samples > ds.size()) {
        throw ConfigError("dataset of " + std::to_string(ds.size()) + " samples cannot give " +
                          std::to_string(spec.nodes) + " nodes " +
                          std::to_string(spec.min_samples) + " samples each");
      }
      const auto by_class_sorted = ds.indices_by_class();
      std::mt19937_64 rng(derive_seed(spec.seed, 0xd1c));
      std::gamma_distribution<double> gamma(spec.alpha, 1.0);
      for (int attempt = 0; attempt < 1000; ++attempt) {
        auto parts = empty_parts(spec.nodes);
        for (std::size_t c = 0; c < C; ++c) {
          auto idx = by_class_sorted[c];
          std::shuffle(idx.begin(), idx.end(), rng);
          std::vector<double> q(spec.nodes);
          double total = 0.0;
          for (double& v : q) total += (v = gamma(rng));
          if (total <= 0.0) {
            q.assign(spec.nodes, 1.0);
            total = double(spec.nodes);
          }
          // Floor shares, remainder to the largest fractional parts.
          const std::size_t n = idx.size();
          std::vector<std::size_t> counts(spec.nodes);
          std::vector<std::pair<double, std::size_t>> frac;
          std::size_t assigned = 0;
          for (std::size_t i = 0; i < spec.nodes; ++i) {
            const double exact = q[i] / total * double(n);
            counts[i] = static_cast<std::size_t>(exact);
            assigned += counts[i];
            frac.emplace_back(-(exact - double(counts[i])), i);
          }
          std::sort(frac.begin(), frac.end());
          for (std::size_t j = 0; assigned < n; ++j, ++assigned) ++counts[frac[j].second];
          std::size_t next = 0;
          for (std::size_t i = 0; i < spec.nodes; ++i) {
            parts[i].indices.insert(parts[i].indices.end(), idx.begin() + next,
                                    idx.begin() + next + counts[i]);
            next += counts[i];
          }
        }
        const bool ok = std::all_of(parts.begin(), parts.end(), [&](const NodePartition& p) {
          return p.indices.size() >= std::max<std::size_t>(spec.min_samples, 1);
        });
        if (ok) {
          finish(parts, ds);
          return parts;
        }
      }
      throw ConfigError("dirichlet partition with alpha " + std::to_string(spec.alpha) +
                        " left a node below " + std::to_string(spec.min_samples) +
                        " samples after 1000 draws");
    }
  }
  throw ConfigError("unknown partition scheme");
}

}  // namespace psinet
