#include "psinet/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "psinet/error.hpp"

namespace psinet {

namespace {

ArchitectureSpec untrimmed(const ArchitectureSpec& spec) {
  ArchitectureSpec full = spec;
  if (full.regulation) {
    full.regulation->kept_groups.clear();
    for (std::size_t k = 0; k < full.regulation->mapping.group_count(); ++k) {
      full.regulation->kept_groups.push_back(k);
    }
  }
  return full;
}

/// Concatenates per-group tensors along axis 0, skipping the copy for one part.
ad::Variable join(ad::Tape& tape, std::vector<ad::Variable> parts) {
  if (parts.size() == 1) return parts.front();
  return ad::concat(tape, parts);
}

}  // namespace

ModelParams init_params(const ArchitectureSpec& spec, std::uint64_t seed) {
  const ArchitectureSpec full = untrimmed(spec);
  const auto layout = param_layout(full);
  const std::vector<std::size_t> kept =
      spec.regulation ? spec.regulation->kept_groups : std::vector<std::size_t>{};
  std::mt19937_64 rng(seed);
  ModelParams params(fingerprint(spec));
  for (const ParamInfo& info : layout) {
    Tensor t(info.shape);
    switch (info.init) {
      case InitKind::he_normal:
      case InitKind::lecun_normal: {
        const double gain = info.init == InitKind::he_normal ? 2.0 : 1.0;
        std::normal_distribution<float> dist(
            0.0f, static_cast<float>(std::sqrt(gain / double(info.fan_in))));
        for (float& v : t.data()) v = dist(rng);
        break;
      }
      case InitKind::ones:
        t.fill(1.0f);
        break;
      case InitKind::zeros:
        break;
    }
    const bool keep = info.partition.shared() ||
                      std::find(kept.begin(), kept.end(), info.partition.group) != kept.end();
    if (keep) params.set(info.name, std::move(t));
  }
  return params;
}

BoundModel::BoundModel(ArchitectureSpec spec, const ModelParams& params, bool requires_grad)
    : spec_(std::move(spec)), fingerprint_(params.fingerprint()) {
  check_params(spec_, params);
  for (const auto& [name, t] : params.tensors()) {
    if (is_buffer_param(name)) {
      buffers_.emplace(name, t);
    } else {
      vars_.emplace(name, ad::Variable(t, requires_grad));
    }
  }
}

bool BoundModel::has_param(std::string_view name) const { return vars_.contains(name); }

const ad::Variable& BoundModel::param(std::string_view name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw AlignmentError("no parameter '" + std::string(name) + "'");
  return it->second;
}

Tensor& BoundModel::buffer(std::string_view name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw AlignmentError("no buffer '" + std::string(name) + "'");
  return it->second;
}

ModelParams BoundModel::params() const {
  ModelParams out(fingerprint_);
  for (const auto& [name, v] : vars_) out.set(name, v.value());
  for (const auto& [name, t] : buffers_) out.set(name, t);
  return out;
}

ModelParams BoundModel::grads() const {
  ModelParams out(fingerprint_);
  for (const auto& [name, v] : vars_) out.set(name, v.grad());
  return out;
}

void BoundModel::zero_grad() {
  for (auto& [name, v] : vars_) v.zero_grad();
}

std::vector<std::string> BoundModel::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& [name, v] : vars_) names.push_back(name);
  return names;
}

ForwardResult forward(ad::Tape& tape, BoundModel& model, const ad::Variable& input,
                      Mode mode, std::optional<std::size_t> tap_layer) {
  const ArchitectureSpec& spec = model.spec();
  const Shape& in = input.shape();
  if (in.size() != 4 || Shape(in.begin() + 1, in.end()) != spec.input_shape) {
    throw ShapeError("forward: input " + shape_string(in) + " does not match [N, " +
                     shape_string(spec.input_shape) + "]");
  }
  const Regulation* reg = spec.regulation ? &*spec.regulation : nullptr;
  const std::size_t G = reg ? reg->mapping.group_count() : 1;
  const std::vector<std::size_t> kept = reg ? reg->kept_groups : std::vector<std::size_t>{};
  const std::size_t head = spec.head_index();
  const bool training = mode == Mode::train;

  // True once activations hold only the kept groups' blocks.
  bool grouped_layout = false;
  ForwardResult result;
  ad::Variable x = input;

  auto shared = [&](const LayerDescriptor& l, std::string_view role) -> const ad::Variable& {
    return model.param(make_param_name(Partition{}, l.name, role));
  };
  auto per_group = [&](const LayerDescriptor& l, std::string_view role) {
    std::vector<ad::Variable> parts;
    for (std::size_t k : kept) parts.push_back(model.param(make_param_name(Partition{k}, l.name, role)));
    return join(tape, std::move(parts));
  };
  auto select_kept = [&](std::size_t block) {
    if (!grouped_layout && kept.size() < G) {
      x = ad::select_channel_blocks(tape, x, block, kept);
    }
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDescriptor& l = spec.layers[i];
    const bool grouped = spec.in_grouped_region(i);
    switch (l.kind) {
      case LayerKind::conv:
        x = ad::conv2d(tape, x, shared(l, "weight"), shared(l, "bias"),
                       {l.stride, l.pad, 1});
        break;
      case LayerKind::grouped_conv:
        select_kept(l.in / G);
        x = ad::conv2d(tape, x, per_group(l, "weight"), per_group(l, "bias"),
                       {l.stride, l.pad, kept.size()});
        grouped_layout = true;
        break;
      case LayerKind::linear:
        x = ad::linear(tape, x, shared(l, "weight"), shared(l, "bias"));
        break;
      case LayerKind::grouped_linear: {
        const std::size_t blocks = grouped_layout ? kept.size() : G;
        std::vector<std::size_t> row_block, out_col;
        for (std::size_t p = 0; p < kept.size(); ++p) {
          const std::size_t k = kept[p];
          const std::size_t src = grouped_layout ? p : k;
          if (i == head) {
            for (std::size_t c : reg->mapping.groups[k]) {
              row_block.push_back(src);
              out_col.push_back(c);
            }
          } else {
            for (std::size_t r = 0; r < l.out / G; ++r) {
              row_block.push_back(src);
              out_col.push_back(p * (l.out / G) + r);
            }
          }
        }
        const std::size_t width = i == head ? spec.num_classes : kept.size() * (l.out / G);
        const ad::Variable w = per_group(l, "weight");
        const ad::Variable b = per_group(l, "bias");
        if (G == 1) {
          // Single block with identity wiring: the dense kernel, bit for bit.
          x = ad::linear(tape, x, w, b);
        } else {
          x = ad::block_linear(tape, x, w, b, blocks, row_block, out_col, width,
                               i == head ? kTrimmedLogit : 0.0f);
        }
        grouped_layout = true;
        break;
      }
      case LayerKind::batch_norm: {
        const Partition p = grouped ? Partition{kept.front()} : Partition{};
        Tensor& nb = model.buffer(make_param_name(p, l.name, "num_batches"));
        if (!training && nb[0] == 0.0f) {
          throw StateError("batch norm '" + l.name +
                           "' evaluated before any training batch");
        }
        x = ad::batch_norm(tape, x, model.param(make_param_name(p, l.name, "weight")),
                           model.param(make_param_name(p, l.name, "bias")),
                           model.buffer(make_param_name(p, l.name, "running_mean")),
                           model.buffer(make_param_name(p, l.name, "running_var")),
                           training);
        if (training) nb[0] += 1.0f;
        break;
      }
      case LayerKind::group_norm:
        if (grouped) {
          x = ad::group_norm(tape, x, per_group(l, "weight"), per_group(l, "bias"),
                             kept.size());
        } else {
          x = ad::group_norm(tape, x, shared(l, "weight"), shared(l, "bias"), l.groups);
        }
        break;
      case LayerKind::relu:
        x = ad::relu(tape, x);
        break;
      case LayerKind::maxpool:
        x = ad::maxpool2d(tape, x, l.kernel, l.stride);
        break;
      case LayerKind::flatten: {
        const Shape& s = x.shape();
        x = ad::reshape(tape, x, {s[0], shape_numel(s) / s[0]});
        break;
      }
    }
    if (tap_layer && *tap_layer == i) result.tap = x;
  }
  result.logits = x;
  return result;
}

Tensor predict(const ArchitectureSpec& spec, const ModelParams& params, const Tensor& images,
               std::size_t batch_size) {
  if (images.rank() != 4) throw ShapeError("predict: expected NCHW images");
  BoundModel model(spec, params, false);
  const std::size_t n = images.dim(0);
  const std::size_t per = images.numel() / std::max<std::size_t>(n, 1);
  Tensor out({n, spec.num_classes});
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t m = std::min(batch_size, n - start);
    Shape s = images.shape();
    s[0] = m;
    std::vector<float> chunk(images.raw() + start * per, images.raw() + (start + m) * per);
    ad::Tape tape;
    const auto r = forward(tape, model, ad::Variable(Tensor(s, std::move(chunk))), Mode::eval);
    std::copy(r.logits.value().raw(), r.logits.value().raw() + m * spec.num_classes,
              out.raw() + start * spec.num_classes);
  }
  return out;
}

EvalResult evaluate(const ArchitectureSpec& spec, const ModelParams& params,
                    const Tensor& images, std::span<const int> labels,
                    std::size_t batch_size) {
  const Tensor logits = predict(spec, params, images, batch_size);
  const std::size_t n = logits.dim(0), C = logits.dim(1);
  if (labels.size() != n) throw ShapeError("evaluate: label count mismatch");
  EvalResult r;
  r.samples = n;
  if (n == 0) return r;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.raw() + i * C;
    std::size_t best = 0;
    double mx = row[0];
    for (std::size_t j = 1; j < C; ++j) {
      if (row[j] > row[best]) best = j;
      mx = std::max(mx, double(row[j]));
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < C; ++j) denom += std::exp(double(row[j]) - mx);
    loss += std::log(denom) + mx - double(row[labels[i]]);
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  r.loss = loss / double(n);
  r.accuracy = double(correct) / double(n);
  return r;
}

std::size_t activation_layer(const ArchitectureSpec& spec, std::size_t conv_index) {
  if (conv_index >= spec.layers.size() || !spec.layers[conv_index].is_conv()) {
    throw ConfigError("layer index " + std::to_string(conv_index) + " is not a conv layer");
  }
  const std::size_t end = block_end(spec, conv_index);
  std::size_t tap = conv_index;
  for (std::size_t i = conv_index + 1; i <= end; ++i) {
    if (spec.layers[i].kind == LayerKind::maxpool) break;
    if (spec.layers[i].kind == LayerKind::relu) tap = i;
  }
  return tap;
}

}  // namespace psinet
