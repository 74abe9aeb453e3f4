#include "psinet/permutation.hpp"

#include <algorithm>

#include "psinet/error.hpp"

namespace psinet {

namespace {

/// Owners of a layer's tensors: one shared set, or one set per kept group.
std::vector<Partition> owners(const ArchitectureSpec& spec, std::size_t i) {
  if (!spec.in_grouped_region(i)) return {Partition{}};
  std::vector<Partition> out;
  for (std::size_t k : spec.regulation->kept_groups) out.push_back(Partition{k});
  return out;
}

void require_blocks(std::span<const std::size_t> perm, std::size_t block,
                    const std::string& what) {
  for (std::size_t j = 0; j < perm.size(); ++j) {
    if (perm[j] / block != j / block) {
      throw InvarianceError("permutation moves channel " + std::to_string(perm[j]) +
                            " to position " + std::to_string(j) + ", crossing a " +
                            std::to_string(block) + "-channel group boundary of " + what);
    }
  }
}

/// Rows of `t` (dimension 0 slices) reordered: row j <- row local[j].
Tensor permute_rows(const Tensor& t, std::span<const std::size_t> local) {
  const std::size_t stride = t.numel() / t.dim(0);
  Tensor out(t.shape());
  for (std::size_t j = 0; j < local.size(); ++j) {
    std::copy_n(t.raw() + local[j] * stride, stride, out.raw() + j * stride);
  }
  return out;
}

/// Dimension-1 slices reordered in units of `unit` consecutive columns.
Tensor permute_cols(const Tensor& t, std::span<const std::size_t> local, std::size_t unit) {
  const std::size_t rows = t.dim(0);
  const std::size_t cols = t.numel() / rows;
  Tensor out(t.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < local.size(); ++j) {
      std::copy_n(t.raw() + r * cols + local[j] * unit, unit,
                  out.raw() + r * cols + j * unit);
    }
  }
  return out;
}

}  // namespace

ModelParams permute_neurons(const ArchitectureSpec& spec, const ModelParams& params,
                            std::string_view layer, std::span<const std::size_t> perm) {
  if (spec.regulation && spec.regulation->trimmed()) {
    throw ConfigError("permute_neurons expects an untrimmed model");
  }
  check_params(spec, params);
  const auto shapes = infer_shapes(spec);
  const std::size_t li = spec.layer_index(layer);
  const LayerDescriptor& producer = spec.layers[li];
  if (!(producer.is_conv() || producer.is_linear()) || li == spec.head_index()) {
    throw ConfigError("layer '" + producer.name +
                      "' has no permutable hidden neurons (need conv or non-head linear)");
  }
  const std::size_t n = producer.out;
  if (perm.size() != n) {
    throw ConfigError("permutation has " + std::to_string(perm.size()) + " entries, layer '" +
                      producer.name + "' has " + std::to_string(n) + " neurons");
  }
  std::vector<bool> seen(n, false);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) throw ConfigError("permutation is not a bijection");
    seen[p] = true;
  }
  const std::size_t G = spec.regulation ? spec.regulation->mapping.group_count() : 1;
  // Channels are moved within blocks of this size; every grouped tensor sees
  // only block-local indices.
  const bool grouped = spec.in_grouped_region(li);
  if (grouped) require_blocks(perm, n / G, "layer '" + producer.name + "'");

  ModelParams out = params;
  auto local_perm = [&](std::size_t block, std::size_t k) {
    std::vector<std::size_t> local(block);
    for (std::size_t j = 0; j < block; ++j) local[j] = perm[k * block + j] - k * block;
    return local;
  };
  auto apply = [&](std::size_t i, auto&& fn) {
    const std::vector<Partition> parts = owners(spec, i);
    for (std::size_t idx = 0; idx < parts.size(); ++idx) fn(parts[idx], idx, parts.size());
  };

  // Producer outputs.
  apply(li, [&](Partition p, std::size_t idx, std::size_t count) {
    const std::size_t block = n / count;
    const auto local = count == 1 ? std::vector<std::size_t>(perm.begin(), perm.end())
                                  : local_perm(block, idx);
    for (std::string_view role : {"weight", "bias"}) {
      const std::string name = make_param_name(p, producer.name, role);
      out.at(name) = permute_rows(params.at(name), local);
    }
  });

  std::size_t unit = 1;  // features per channel after a flatten
  for (std::size_t i = li + 1; i < spec.layers.size(); ++i) {
    const LayerDescriptor& l = spec.layers[i];
    if (l.kind == LayerKind::relu || l.kind == LayerKind::maxpool) continue;
    if (l.kind == LayerKind::flatten) {
      const Shape& before = shapes[i - 1];
      unit = before.size() == 3 ? before[1] * before[2] : 1;
      continue;
    }
    if (l.is_norm()) {
      const bool ln_grouped = spec.in_grouped_region(i);
      if (l.kind == LayerKind::group_norm && !ln_grouped && l.groups > 1) {
        require_blocks(perm, n / l.groups, "group norm '" + l.name + "'");
      }
      apply(i, [&](Partition p, std::size_t idx, std::size_t count) {
        const std::size_t block = n / count;
        const auto local = count == 1 ? std::vector<std::size_t>(perm.begin(), perm.end())
                                      : local_perm(block, idx);
        for (std::string_view role : {"weight", "bias", "running_mean", "running_var"}) {
          const std::string name = make_param_name(p, l.name, role);
          if (out.contains(name)) out.at(name) = permute_rows(params.at(name), local);
        }
      });
      continue;
    }
    // Consumer: conv or linear reading the permuted channels.
    const bool consumer_grouped = l.is_grouped();
    if (consumer_grouped && !grouped) {
      require_blocks(perm, n / G, "consumer '" + l.name + "'");
    }
    apply(i, [&](Partition p, std::size_t idx, std::size_t count) {
      const std::size_t block = n / count;
      const auto local = count == 1 ? std::vector<std::size_t>(perm.begin(), perm.end())
                                    : local_perm(block, idx);
      const std::string name = make_param_name(p, l.name, "weight");
      const Tensor& w = params.at(name);
      out.at(name) = l.is_conv() ? permute_cols(w, local, w.numel() / w.dim(0) / local.size())
                                 : permute_cols(w, local, unit);
    });
    return out;
  }
  throw ConfigError("layer '" + producer.name + "' has no consumer to absorb the permutation");
}

}  // namespace psinet
