#include "psinet/architecture.hpp"

#include <algorithm>
#include <array>
#include <set>

#include "psinet/error.hpp"

namespace psinet {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 9> kKindNames{{
    {LayerKind::conv, "conv"},
    {LayerKind::grouped_conv, "grouped_conv"},
    {LayerKind::linear, "linear"},
    {LayerKind::grouped_linear, "grouped_linear"},
    {LayerKind::batch_norm, "batch_norm"},
    {LayerKind::group_norm, "group_norm"},
    {LayerKind::relu, "relu"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::flatten, "flatten"},
}};

[[noreturn]] void layer_error(const LayerDescriptor& layer, const std::string& msg) {
  throw ConfigError("layer '" + layer.name + "' (" + std::string(to_string(layer.kind)) +
                    "): " + msg);
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view text) {
  for (const auto& [k, name] : kKindNames) {
    if (name == text) return k;
  }
  throw ConfigError("unknown layer kind '" + std::string(text) + "'");
}

LayerDescriptor LayerDescriptor::conv(std::string name, std::size_t in, std::size_t out,
                                      std::size_t kernel, std::size_t stride,
                                      std::size_t pad) {
  return {LayerKind::conv, std::move(name), in, out, kernel, stride, pad, 1};
}

LayerDescriptor LayerDescriptor::linear(std::string name, std::size_t in,
                                        std::size_t out) {
  return {LayerKind::linear, std::move(name), in, out, 0, 1, 0, 1};
}

LayerDescriptor LayerDescriptor::batch_norm(std::string name, std::size_t channels) {
  return {LayerKind::batch_norm, std::move(name), channels, channels, 0, 1, 0, 1};
}

LayerDescriptor LayerDescriptor::group_norm(std::string name, std::size_t channels,
                                            std::size_t groups) {
  return {LayerKind::group_norm, std::move(name), channels, channels, 0, 1, 0, groups};
}

LayerDescriptor LayerDescriptor::relu(std::string name) {
  return {LayerKind::relu, std::move(name), 0, 0, 0, 1, 0, 1};
}

LayerDescriptor LayerDescriptor::maxpool(std::string name, std::size_t kernel,
                                         std::size_t stride) {
  return {LayerKind::maxpool, std::move(name), 0, 0, kernel, stride, 0, 1};
}

LayerDescriptor LayerDescriptor::flatten(std::string name) {
  return {LayerKind::flatten, std::move(name), 0, 0, 0, 1, 0, 1};
}

bool LayerDescriptor::has_params() const noexcept {
  return is_conv() || is_linear() || is_norm();
}

std::size_t GroupMapping::group_of(std::size_t cls) const {
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (std::binary_search(groups[k].begin(), groups[k].end(), cls)) return k;
  }
  throw ConfigError("class " + std::to_string(cls) + " is not mapped to any group");
}

bool GroupMapping::one_to_one() const noexcept {
  return groups.size() == num_classes &&
         std::all_of(groups.begin(), groups.end(),
                     [](const auto& g) { return g.size() == 1; });
}

void GroupMapping::validate() const {
  if (groups.empty()) throw ConfigError("group mapping has no groups");
  std::vector<int> owner(num_classes, -1);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].empty()) {
      throw ConfigError("group " + std::to_string(k) + " has no mapped classes");
    }
    if (!std::is_sorted(groups[k].begin(), groups[k].end())) {
      throw ConfigError("group " + std::to_string(k) + " class list is not sorted");
    }
    for (std::size_t c : groups[k]) {
      if (c >= num_classes) {
        throw ConfigError("group " + std::to_string(k) + " maps class " +
                          std::to_string(c) + " outside [0, " +
                          std::to_string(num_classes) + ")");
      }
      if (owner[c] >= 0) {
        throw ConfigError("class " + std::to_string(c) + " mapped to both group " +
                          std::to_string(owner[c]) + " and group " + std::to_string(k));
      }
      owner[c] = static_cast<int>(k);
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (owner[c] < 0) {
      throw ConfigError("class " + std::to_string(c) + " is not mapped to any group");
    }
  }
}

bool ArchitectureSpec::in_grouped_region(std::size_t layer_index) const noexcept {
  return regulation &&
         static_cast<std::ptrdiff_t>(layer_index) > regulation->mapping.shared_depth;
}

std::size_t ArchitectureSpec::layer_index(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  std::string known;
  for (const auto& l : layers) known += (known.empty() ? "" : ", ") + l.name;
  throw ConfigError("layer '" + std::string(name) + "' not found; layers: " + known);
}

std::size_t ArchitectureSpec::head_index() const {
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (layers[i].is_linear()) return i;
  }
  throw ConfigError("architecture '" + name + "' has no linear classifier head");
}

std::vector<Shape> infer_shapes(const ArchitectureSpec& spec) {
  if (spec.input_shape.size() != 3) {
    throw ConfigError("input shape must be {C, H, W}, got " +
                      shape_string(spec.input_shape));
  }
  if (spec.layers.empty()) throw ConfigError("architecture has no layers");
  const std::size_t head = spec.head_index();
  if (spec.layers[head].out != spec.num_classes) {
    throw ConfigError("classifier head '" + spec.layers[head].name + "' produces " +
                      std::to_string(spec.layers[head].out) + " logits, expected " +
                      std::to_string(spec.num_classes));
  }
  std::set<std::string> names;
  for (const auto& l : spec.layers) {
    if (l.name.empty()) throw ConfigError("layer without a name");
    if (!names.insert(l.name).second) {
      throw ConfigError("duplicate layer name '" + l.name + "'");
    }
  }

  std::size_t G = 1, kept = 1;
  if (spec.regulation) {
    spec.regulation->mapping.validate();
    G = spec.regulation->mapping.group_count();
    const auto& kg = spec.regulation->kept_groups;
    if (kg.empty() || !std::is_sorted(kg.begin(), kg.end()) ||
        std::adjacent_find(kg.begin(), kg.end()) != kg.end() || kg.back() >= G) {
      throw ConfigError("kept group list must be a sorted non-empty subset of 0.." +
                        std::to_string(G - 1));
    }
    kept = kg.size();
    if (spec.regulation->mapping.num_classes != spec.num_classes) {
      throw ConfigError("group mapping covers " +
                        std::to_string(spec.regulation->mapping.num_classes) +
                        " classes, architecture has " + std::to_string(spec.num_classes));
    }
    const auto depth = spec.regulation->mapping.shared_depth;
    if (depth < -1 || depth >= static_cast<std::ptrdiff_t>(spec.layers.size())) {
      throw ConfigError("shared depth " + std::to_string(depth) + " out of range [-1, " +
                        std::to_string(spec.layers.size() - 1) + "]");
    }
  }

  std::vector<Shape> shapes;
  Shape cur = spec.input_shape;
  // Scale of the current tensor relative to its untrimmed size.
  bool trimmed_layout = false;
  auto full = [&](std::size_t n) { return trimmed_layout ? n / kept * G : n; };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDescriptor& l = spec.layers[i];
    const bool grouped_region = spec.in_grouped_region(i);
    if (l.is_grouped() && !grouped_region) {
      layer_error(l, "grouped layers are only valid above the shared depth of a regulated spec");
    }
    if (grouped_region && (l.kind == LayerKind::conv || l.kind == LayerKind::linear)) {
      layer_error(l, "dense layer inside the grouped region");
    }
    if (l.is_grouped() && l.groups != G) {
      layer_error(l, "group count " + std::to_string(l.groups) +
                         " differs from mapping group count " + std::to_string(G));
    }
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::grouped_conv: {
        if (cur.size() != 3) layer_error(l, "expects a {C,H,W} input");
        if (full(cur[0]) != l.in) {
          layer_error(l, "expects " + std::to_string(l.in) + " input channels, got " +
                             std::to_string(full(cur[0])));
        }
        if (l.kernel == 0 || l.stride == 0 || l.out == 0) {
          layer_error(l, "kernel, stride and out channels must be positive");
        }
        if (l.groups == 0 || l.in % l.groups || l.out % l.groups) {
          layer_error(l, "in/out channels " + std::to_string(l.in) + "/" +
                             std::to_string(l.out) + " not divisible by " +
                             std::to_string(l.groups) + " groups");
        }
        if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel) {
          layer_error(l, "kernel larger than padded input");
        }
        const std::size_t h = (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1;
        const std::size_t w = (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1;
        if (l.kind == LayerKind::grouped_conv) trimmed_layout = kept < G;
        cur = {trimmed_layout ? l.out / G * kept : l.out, h, w};
        break;
      }
      case LayerKind::linear:
      case LayerKind::grouped_linear: {
        if (cur.size() != 1) layer_error(l, "expects a flat input; insert a flatten layer");
        if (full(cur[0]) != l.in) {
          layer_error(l, "expects " + std::to_string(l.in) + " input features, got " +
                             std::to_string(full(cur[0])));
        }
        if (l.out == 0) layer_error(l, "zero outputs");
        if (l.kind == LayerKind::grouped_linear) {
          if (l.in % G) {
            layer_error(l, std::to_string(l.in) + " input features not divisible by " +
                               std::to_string(G) + " groups");
          }
          if (i == head) {
            cur = {spec.num_classes};
            trimmed_layout = false;
            break;
          }
          if (l.out % G) {
            layer_error(l, std::to_string(l.out) + " outputs not divisible by " +
                               std::to_string(G) + " groups");
          }
          trimmed_layout = kept < G;
          cur = {trimmed_layout ? l.out / G * kept : l.out};
        } else {
          cur = {l.out};
        }
        break;
      }
      case LayerKind::batch_norm:
      case LayerKind::group_norm: {
        if (cur.empty() || full(cur[0]) != l.out) {
          layer_error(l, "normalizes " + std::to_string(l.out) + " channels, input has " +
                             std::to_string(cur.empty() ? 0 : full(cur[0])));
        }
        if (l.kind == LayerKind::group_norm && (l.groups == 0 || l.out % l.groups)) {
          layer_error(l, std::to_string(l.out) + " channels not divisible by " +
                             std::to_string(l.groups) + " groups");
        }
        if (grouped_region && l.kind == LayerKind::group_norm && l.groups != G) {
          layer_error(l, "group norm inside the grouped region must use " +
                             std::to_string(G) + " groups");
        }
        if (grouped_region && l.kind == LayerKind::batch_norm && G != 1) {
          layer_error(l, "batch norm mixes structure groups; use group_norm");
        }
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool: {
        if (cur.size() != 3) layer_error(l, "expects a {C,H,W} input");
        if (l.kernel == 0 || l.stride == 0 || cur[1] < l.kernel || cur[2] < l.kernel) {
          layer_error(l, "pool window does not fit input " + shape_string(cur));
        }
        cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::flatten:
        cur = {shape_numel(cur)};
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

std::uint64_t fingerprint(const ArchitectureSpec& spec) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  auto mix_str = [&](std::string_view s) {
    mix(s.size());
    for (char c : s) mix(static_cast<unsigned char>(c));
  };
  for (std::size_t d : spec.input_shape) mix(d);
  mix(spec.num_classes);
  for (const auto& l : spec.layers) {
    mix(static_cast<std::uint64_t>(l.kind));
    mix_str(l.name);
    for (std::size_t v : {l.in, l.out, l.kernel, l.stride, l.pad, l.groups}) mix(v);
  }
  if (spec.regulation) {
    const auto& m = spec.regulation->mapping;
    mix(static_cast<std::uint64_t>(m.shared_depth + 1));
    mix(m.groups.size());
    for (const auto& g : m.groups) {
      mix(g.size());
      for (std::size_t c : g) mix(c);
    }
  }
  return h;
}

bool is_block_boundary(const ArchitectureSpec& spec, std::ptrdiff_t index) {
  if (index < -1 || index >= static_cast<std::ptrdiff_t>(spec.layers.size())) {
    return false;
  }
  if (index == static_cast<std::ptrdiff_t>(spec.layers.size()) - 1) return true;
  const LayerKind next = spec.layers[static_cast<std::size_t>(index + 1)].kind;
  return next == LayerKind::conv || next == LayerKind::grouped_conv ||
         next == LayerKind::linear || next == LayerKind::grouped_linear ||
         next == LayerKind::flatten;
}

std::size_t block_end(const ArchitectureSpec& spec, std::size_t conv_index) {
  std::size_t i = conv_index;
  while (!is_block_boundary(spec, static_cast<std::ptrdiff_t>(i))) ++i;
  return i;
}

std::vector<std::size_t> conv_layer_indices(const ArchitectureSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].is_conv()) out.push_back(i);
  }
  return out;
}

std::vector<ParamInfo> param_layout(const ArchitectureSpec& spec) {
  const auto shapes = infer_shapes(spec);
  std::vector<ParamInfo> out;
  const std::size_t head = spec.head_index();
  const std::size_t G = spec.regulation ? spec.regulation->mapping.group_count() : 1;
  const std::vector<std::size_t> kept =
      spec.regulation ? spec.regulation->kept_groups : std::vector<std::size_t>{};

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDescriptor& l = spec.layers[i];
    if (!l.has_params()) continue;
    const bool grouped = spec.in_grouped_region(i);
    // Grouped-region layers carry one tensor set per kept group.
    const std::vector<std::size_t> owners =
        grouped ? kept : std::vector<std::size_t>{Partition::kShared};
    for (std::size_t g : owners) {
      const Partition p{g};
      auto add = [&](std::string_view role, Shape shape, InitKind init, std::size_t fan) {
        out.push_back({make_param_name(p, l.name, role), std::move(shape), init, fan, i, p});
      };
      switch (l.kind) {
        case LayerKind::conv:
        case LayerKind::grouped_conv: {
          const std::size_t gi = l.kind == LayerKind::grouped_conv ? G : 1;
          const std::size_t cin = l.in / gi, cout = l.out / gi;
          add("weight", {cout, cin, l.kernel, l.kernel}, InitKind::he_normal,
              cin * l.kernel * l.kernel);
          add("bias", {cout}, InitKind::zeros, 0);
          break;
        }
        case LayerKind::linear:
          add("weight", {l.out, l.in}, i == head ? InitKind::lecun_normal : InitKind::he_normal,
              l.in);
          add("bias", {l.out}, InitKind::zeros, 0);
          break;
        case LayerKind::grouped_linear: {
          const std::size_t rows =
              i == head ? spec.regulation->mapping.groups[g].size() : l.out / G;
          add("weight", {rows, l.in / G},
              i == head ? InitKind::lecun_normal : InitKind::he_normal, l.in / G);
          add("bias", {rows}, InitKind::zeros, 0);
          break;
        }
        case LayerKind::batch_norm: {
          const std::size_t c = grouped ? l.out / G : l.out;
          add("weight", {c}, InitKind::ones, 0);
          add("bias", {c}, InitKind::zeros, 0);
          add("running_mean", {c}, InitKind::zeros, 0);
          add("running_var", {c}, InitKind::ones, 0);
          add("num_batches", {1}, InitKind::zeros, 0);
          break;
        }
        case LayerKind::group_norm: {
          const std::size_t c = grouped ? l.out / G : l.out;
          add("weight", {c}, InitKind::ones, 0);
          add("bias", {c}, InitKind::zeros, 0);
          break;
        }
        default:
          break;
      }
    }
  }
  (void)shapes;
  return out;
}

void check_params(const ArchitectureSpec& spec, const ModelParams& params) {
  const auto layout = param_layout(spec);
  if (params.fingerprint() != fingerprint(spec)) {
    throw AlignmentError("parameter fingerprint does not match architecture '" +
                         spec.name + "'");
  }
  if (params.size() != layout.size()) {
    throw AlignmentError("architecture '" + spec.name + "' expects " +
                         std::to_string(layout.size()) + " tensors, parameters hold " +
                         std::to_string(params.size()));
  }
  for (const auto& info : layout) {
    if (!params.contains(info.name)) {
      throw AlignmentError("missing parameter '" + info.name + "'");
    }
    const Tensor& t = params.at(info.name);
    if (t.shape() != info.shape) {
      throw AlignmentError("parameter '" + info.name + "' has shape " +
                           shape_string(t.shape()) + ", expected " +
                           shape_string(info.shape));
    }
  }
}

ArchitectureSpec vgg_style(std::string name, Shape input_shape, std::size_t num_classes,
                           const std::vector<VggStage>& stages,
                           const std::vector<std::size_t>& fc_hidden, bool batch_norm) {
  if (input_shape.size() != 3) {
    throw ConfigError("input shape must be {C, H, W}, got " + shape_string(input_shape));
  }
  ArchitectureSpec spec;
  spec.name = std::move(name);
  spec.input_shape = input_shape;
  spec.num_classes = num_classes;
  std::size_t channels = input_shape[0], h = input_shape[1], w = input_shape[2];
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t i = 0; i < stages[s].widths.size(); ++i) {
      const std::string tag = std::to_string(s + 1) + "_" + std::to_string(i + 1);
      const std::size_t width = stages[s].widths[i];
      spec.layers.push_back(LayerDescriptor::conv("c" + tag, channels, width));
      if (batch_norm) spec.layers.push_back(LayerDescriptor::batch_norm("bn" + tag, width));
      spec.layers.push_back(LayerDescriptor::relu("r" + tag));
      channels = width;
    }
    if (stages[s].pool) {
      spec.layers.push_back(LayerDescriptor::maxpool("p" + std::to_string(s + 1)));
      h /= 2;
      w /= 2;
    }
  }
  spec.layers.push_back(LayerDescriptor::flatten("flatten"));
  std::size_t features = channels * h * w;
  for (std::size_t j = 0; j < fc_hidden.size(); ++j) {
    const std::string tag = std::to_string(j + 1);
    spec.layers.push_back(LayerDescriptor::linear("fc" + tag, features, fc_hidden[j]));
    spec.layers.push_back(LayerDescriptor::relu("rfc" + tag));
    features = fc_hidden[j];
  }
  spec.layers.push_back(LayerDescriptor::linear("logits", features, num_classes));
  infer_shapes(spec);
  return spec;
}

ArchitectureSpec desk_cnn(Shape input_shape, std::size_t num_classes, std::size_t width,
                          bool batch_norm) {
  return vgg_style("desk_cnn", std::move(input_shape), num_classes,
                   {{{width}, true}, {{2 * width}, true}, {{4 * width}, false}}, {},
                   batch_norm);
}

ArchitectureSpec vgg9(Shape input_shape, std::size_t num_classes, std::size_t width,
                      bool batch_norm) {
  return vgg_style("vgg9", std::move(input_shape), num_classes,
                   {{{width, 2 * width}, true},
                    {{4 * width, 4 * width}, true},
                    {{8 * width, 8 * width}, true}},
                   {16 * width, 16 * width}, batch_norm);
}

ArchitectureSpec vgg16(Shape input_shape, std::size_t num_classes, std::size_t width,
                       bool batch_norm) {
  return vgg_style("vgg16", std::move(input_shape), num_classes,
                   {{{width, width}, true},
                    {{2 * width, 2 * width}, true},
                    {{4 * width, 4 * width, 4 * width}, true},
                    {{8 * width, 8 * width, 8 * width}, true},
                    {{8 * width, 8 * width, 8 * width}, true}},
                   {8 * width}, batch_norm);
}

}  // namespace psinet
