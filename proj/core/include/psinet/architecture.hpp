#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psinet/model_params.hpp"
#include "psinet/tensor.hpp"

namespace psinet {

enum class LayerKind {
  conv,
  grouped_conv,
  linear,
  grouped_linear,
  batch_norm,
  group_norm,
  relu,
  maxpool,
  flatten,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view text);

/// One layer of an architecture.
///
/// `in`/`out` are channel counts for conv and norm layers and feature counts
/// for linear layers. For grouped kinds they are the full (untrimmed) counts
/// and `groups` is the structure group count G. Norm layers use `out` only.
struct LayerDescriptor {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;

  static LayerDescriptor conv(std::string name, std::size_t in, std::size_t out,
                              std::size_t kernel = 3, std::size_t stride = 1,
                              std::size_t pad = 1);
  static LayerDescriptor linear(std::string name, std::size_t in, std::size_t out);
  static LayerDescriptor batch_norm(std::string name, std::size_t channels);
  static LayerDescriptor group_norm(std::string name, std::size_t channels,
                                    std::size_t groups);
  static LayerDescriptor relu(std::string name);
  static LayerDescriptor maxpool(std::string name, std::size_t kernel = 2,
                                 std::size_t stride = 2);
  static LayerDescriptor flatten(std::string name);

  bool has_params() const noexcept;
  bool is_conv() const noexcept {
    return kind == LayerKind::conv || kind == LayerKind::grouped_conv;
  }
  bool is_linear() const noexcept {
    return kind == LayerKind::linear || kind == LayerKind::grouped_linear;
  }
  bool is_norm() const noexcept {
    return kind == LayerKind::batch_norm || kind == LayerKind::group_norm;
  }
  bool is_grouped() const noexcept {
    return kind == LayerKind::grouped_conv || kind == LayerKind::grouped_linear;
  }

  friend bool operator==(const LayerDescriptor&, const LayerDescriptor&) = default;
};

/// Structure-feature map: disjoint class sets per structure group.
struct GroupMapping {
  std::size_t num_classes = 0;
  /// groups[k] = sorted classes mapped to structure group k.
  std::vector<std::vector<std::size_t>> groups;
  /// Index of the last shared layer; -1 means no shared layers.
  std::ptrdiff_t shared_depth = -1;

  std::size_t group_count() const noexcept { return groups.size(); }
  /// Group owning class `cls`; throws ConfigError for unmapped classes.
  std::size_t group_of(std::size_t cls) const;
  bool one_to_one() const noexcept;
  /// Checks the pairwise-disjoint, jointly-covering invariant.
  void validate() const;

  friend bool operator==(const GroupMapping&, const GroupMapping&) = default;
};

/// Present on a regulated (grouped) architecture.
struct Regulation {
  GroupMapping mapping;
  /// Global ids of the structure groups this copy of the model carries,
  /// ascending. Equals 0..G-1 unless the model was trimmed.
  std::vector<std::size_t> kept_groups;

  bool trimmed() const noexcept { return kept_groups.size() < mapping.group_count(); }
  friend bool operator==(const Regulation&, const Regulation&) = default;
};

struct ArchitectureSpec {
  std::string name;
  /// Per-sample input shape {C, H, W}.
  Shape input_shape;
  std::size_t num_classes = 0;
  std::vector<LayerDescriptor> layers;
  std::optional<Regulation> regulation;

  bool regulated() const noexcept { return regulation.has_value(); }
  /// True for layers above the shared depth of a regulated spec.
  bool in_grouped_region(std::size_t layer_index) const noexcept;
  /// Index of the layer called `name`; ConfigError listing layers otherwise.
  std::size_t layer_index(std::string_view name) const;
  /// Index of the last parametric layer (the classifier head).
  std::size_t head_index() const;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

/// Per-sample output shape of every layer. Validates the whole sequence
/// (channel agreement, grouping divisibility, single C-logit head) and throws
/// ConfigError / ShapeError naming the offending layer.
std::vector<Shape> infer_shapes(const ArchitectureSpec& spec);

/// Hash of the untrimmed structure: layers, input shape, class count, mapping.
/// Trimmed and untrimmed copies of one regulated spec share a fingerprint.
std::uint64_t fingerprint(const ArchitectureSpec& spec);

/// A spec is at a block boundary after `index` when the next layer starts a new
/// conv/linear block (or when `index` is the last layer).
bool is_block_boundary(const ArchitectureSpec& spec, std::ptrdiff_t index);

/// Last layer index of the block that starts at conv layer `conv_index`
/// (its norm, activation and pooling, up to the next conv/flatten/linear).
std::size_t block_end(const ArchitectureSpec& spec, std::size_t conv_index);

/// Indices of conv / grouped_conv layers in order.
std::vector<std::size_t> conv_layer_indices(const ArchitectureSpec& spec);

enum class InitKind { he_normal, lecun_normal, zeros, ones };

struct ParamInfo {
  std::string name;
  Shape shape;
  InitKind init = InitKind::zeros;
  std::size_t fan_in = 0;
  std::size_t layer = 0;
  Partition partition;
};

/// Every tensor a model of `spec` carries, in initialization order. For a
/// trimmed spec only kept groups are listed.
std::vector<ParamInfo> param_layout(const ArchitectureSpec& spec);

/// Throws AlignmentError unless `params` holds exactly the tensors of
/// param_layout(spec) with matching shapes and fingerprint.
void check_params(const ArchitectureSpec& spec, const ModelParams& params);

// -- presets ------------------------------------------------------------------

struct VggStage {
  std::vector<std::size_t> widths;
  bool pool = true;
};

/// conv(3x3, pad 1) -> [batch_norm] -> relu per width, optional 2x2 pool per
/// stage, then flatten -> (linear -> relu)* -> linear(num_classes).
/// Conv layers are named c<stage>_<i> (1-based), e.g. c3_2.
ArchitectureSpec vgg_style(std::string name, Shape input_shape,
                           std::size_t num_classes, const std::vector<VggStage>& stages,
                           const std::vector<std::size_t>& fc_hidden,
                           bool batch_norm = true);

/// Small three-stage net for synthetic desk-scale runs.
ArchitectureSpec desk_cnn(Shape input_shape, std::size_t num_classes,
                          std::size_t width = 10, bool batch_norm = true);
/// VGG9 layout (conv w,2w | 4w,4w | 8w,8w, fc 16w,16w). width 32 is the
/// classic 32-64-128-128-256-256-512-512 network.
ArchitectureSpec vgg9(Shape input_shape, std::size_t num_classes,
                      std::size_t width = 32, bool batch_norm = true);
/// VGG16 layout (13 conv layers in five stages, one hidden fc of 8w).
ArchitectureSpec vgg16(Shape input_shape, std::size_t num_classes,
                       std::size_t width = 64, bool batch_norm = true);

}  // namespace psinet
