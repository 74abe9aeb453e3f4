#include "psinet/builder.hpp"

#include <algorithm>

#include "psinet/error.hpp"

namespace psinet {

GroupMapping default_mapping(std::size_t num_classes, std::size_t group_count,
                             std::span<const std::size_t> class_order) {
  if (group_count == 0 || group_count > num_classes) {
    throw ConfigError("group count " + std::to_string(group_count) +
                      " must lie in [1, " + std::to_string(num_classes) +
                      "]; a group without classes would receive no gradient");
  }
  std::vector<std::size_t> order(num_classes);
  if (class_order.empty()) {
    for (std::size_t c = 0; c < num_classes; ++c) order[c] = c;
  } else {
    if (class_order.size() != num_classes) {
      throw ConfigError("class order must list all " + std::to_string(num_classes) +
                        " classes");
    }
    order.assign(class_order.begin(), class_order.end());
  }
  GroupMapping m;
  m.num_classes = num_classes;
  const std::size_t base = num_classes / group_count;
  const std::size_t extra = num_classes % group_count;
  std::size_t next = 0;
  for (std::size_t k = 0; k < group_count; ++k) {
    const std::size_t size = base + (k < extra ? 1 : 0);
    std::vector<std::size_t> cls(order.begin() + next, order.begin() + next + size);
    std::sort(cls.begin(), cls.end());
    m.groups.push_back(std::move(cls));
    next += size;
  }
  m.validate();
  return m;
}

ArchitectureSpec build_psinet(const ArchitectureSpec& spec, const GroupMapping& mapping,
                              const BuildOptions& options) {
  if (spec.regulated()) throw ConfigError("spec '" + spec.name + "' is already regulated");
  infer_shapes(spec);
  mapping.validate();
  if (mapping.num_classes != spec.num_classes) {
    throw ConfigError("mapping covers " + std::to_string(mapping.num_classes) +
                      " classes, spec '" + spec.name + "' has " +
                      std::to_string(spec.num_classes));
  }
  const std::ptrdiff_t depth = mapping.shared_depth;
  const auto n = static_cast<std::ptrdiff_t>(spec.layers.size());
  if (depth < -1 || depth >= n) {
    throw ConfigError("shared depth " + std::to_string(depth) + " out of range [-1, " +
                      std::to_string(n - 1) + "]");
  }
  if (!is_block_boundary(spec, depth)) {
    throw ConfigError("shared depth " + std::to_string(depth) + " (after layer '" +
                      spec.layers[static_cast<std::size_t>(depth)].name +
                      "') is not at a conv-block boundary");
  }
  const std::size_t G = mapping.group_count();
  const std::size_t head = spec.head_index();

  std::vector<std::string> offending;
  ArchitectureSpec out;
  out.name = spec.name + "_psinet_g" + std::to_string(G);
  out.input_shape = spec.input_shape;
  out.num_classes = spec.num_classes;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerDescriptor l = spec.layers[i];
    const bool grouped = static_cast<std::ptrdiff_t>(i) > depth;
    if (!grouped) {
      if (options.shared_norm == SharedNorm::group_norm && l.kind == LayerKind::batch_norm) {
        l = LayerDescriptor::group_norm(l.name, l.out, 1);
      }
      out.layers.push_back(std::move(l));
      continue;
    }
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.in % G || l.out % G) {
          offending.push_back(l.name + " (" + std::to_string(l.in) + "->" +
                              std::to_string(l.out) + ")");
        }
        l.kind = LayerKind::grouped_conv;
        l.groups = G;
        const std::string conv_name = l.name;
        const std::size_t channels = l.out;
        out.layers.push_back(std::move(l));
        // Every grouped conv is followed by a norm; insert one when the base
        // block has none.
        const bool has_norm = i + 1 < spec.layers.size() && spec.layers[i + 1].is_norm();
        if (!has_norm && G > 1) {
          out.layers.push_back(LayerDescriptor::group_norm("gn_" + conv_name, channels, G));
        }
        break;
      }
      case LayerKind::batch_norm:
      case LayerKind::group_norm:
        if (G > 1) {
          out.layers.push_back(LayerDescriptor::group_norm(l.name, l.out, G));
        } else {
          out.layers.push_back(std::move(l));
        }
        break;
      case LayerKind::linear:
        if (l.in % G || (i != head && l.out % G)) {
          offending.push_back(l.name + " (" + std::to_string(l.in) + "->" +
                              std::to_string(l.out) + ")");
        }
        l.kind = LayerKind::grouped_linear;
        l.groups = G;
        out.layers.push_back(std::move(l));
        break;
      default:
        out.layers.push_back(std::move(l));
        break;
    }
  }
  if (!offending.empty()) {
    std::string list;
    for (const auto& s : offending) list += (list.empty() ? "" : ", ") + s;
    throw ConfigError("channels not divisible by " + std::to_string(G) + " groups: " + list);
  }
  // Layer indices shift when norms are inserted; re-anchor the depth by name.
  GroupMapping m = mapping;
  m.shared_depth = depth < 0 ? -1
                             : static_cast<std::ptrdiff_t>(out.layer_index(
                                   spec.layers[static_cast<std::size_t>(depth)].name));
  Regulation reg;
  reg.mapping = std::move(m);
  for (std::size_t k = 0; k < G; ++k) reg.kept_groups.push_back(k);
  out.regulation = std::move(reg);
  infer_shapes(out);
  return out;
}

bool TrimMask::any() const noexcept {
  return std::find(trimmed.begin(), trimmed.end(), true) != trimmed.end();
}

std::vector<std::size_t> TrimMask::kept() const {
  std::vector<std::size_t> k;
  for (std::size_t i = 0; i < trimmed.size(); ++i) {
    if (!trimmed[i]) k.push_back(i);
  }
  return k;
}

TrimMask compute_trim_mask(const GroupMapping& mapping,
                           const std::set<std::size_t>& local_classes) {
  TrimMask mask;
  for (const auto& cls : mapping.groups) {
    const bool hit = std::any_of(cls.begin(), cls.end(),
                                 [&](std::size_t c) { return local_classes.contains(c); });
    mask.trimmed.push_back(!hit);
  }
  return mask;
}

ArchitectureSpec trim_spec(const ArchitectureSpec& spec, const TrimMask& mask) {
  if (!spec.regulation) throw ConfigError("trimming needs a built Psi-Net spec");
  if (mask.size() != spec.regulation->mapping.group_count()) {
    throw ConfigError("trim mask covers " + std::to_string(mask.size()) + " groups, spec has " +
                      std::to_string(spec.regulation->mapping.group_count()));
  }
  const auto kept = mask.kept();
  if (kept.empty()) {
    throw ConfigError("every structure group is trimmed: the node has no learnable task");
  }
  ArchitectureSpec out = spec;
  out.regulation->kept_groups = kept;
  infer_shapes(out);
  return out;
}

TrimResult trim_model(const ArchitectureSpec& spec, const ModelParams& params,
                      const std::set<std::size_t>& local_classes) {
  if (!spec.regulation) throw ConfigError("trimming needs a built Psi-Net spec");
  check_params(spec, params);
  TrimResult r;
  r.mask = compute_trim_mask(spec.regulation->mapping, local_classes);
  // Groups already absent from a previously trimmed spec stay absent.
  for (std::size_t k = 0; k < r.mask.size(); ++k) {
    const auto& kg = spec.regulation->kept_groups;
    if (std::find(kg.begin(), kg.end(), k) == kg.end()) r.mask.trimmed[k] = true;
  }
  r.spec = trim_spec(spec, r.mask);
  r.params = ModelParams(params.fingerprint());
  for (const auto& [name, t] : params.tensors()) {
    const auto [part, rest] = split_param_name(name);
    if (part.shared() || !r.mask.trimmed[part.group]) r.params.set(name, t);
  }
  return r;
}

}  // namespace psinet
