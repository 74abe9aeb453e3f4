#include "psinet/layers.hpp"

#include <vector>

#include "psinet/autodiff.hpp"
#include "psinet/error.hpp"

namespace psinet {

namespace {

const Tensor& role(const LayerParams& params, std::string_view name) {
  auto it = params.find(name);
  if (it == params.end()) {
    throw AlignmentError("layer parameters lack '" + std::string(name) + "'");
  }
  return it->second;
}

ad::Variable constant(const Tensor& t) { return ad::Variable(t, false); }

}  // namespace

Tensor grouped_conv_forward(const Tensor& input, const LayerParams& params,
                            std::size_t groups, std::size_t stride, std::size_t pad) {
  const Tensor& w = role(params, "weight");
  if (input.rank() != 4 || w.rank() != 4) {
    throw ShapeError("grouped_conv: expected NCHW input and 4-d weight");
  }
  const std::size_t cin = input.dim(1), cout = w.dim(0);
  if (groups == 0 || cin % groups || cout % groups) {
    throw ConfigError("grouped_conv: channels " + std::to_string(cin) + " -> " +
                      std::to_string(cout) + " not divisible by " +
                      std::to_string(groups) + " groups");
  }
  ad::Tape tape;
  ad::Variable bias;
  if (auto it = params.find("bias"); it != params.end()) bias = constant(it->second);
  return ad::conv2d(tape, constant(input), constant(w), bias, {stride, pad, groups})
      .value();
}

Tensor grouped_linear_forward(const Tensor& input, std::span<const LayerParams> group_params,
                              const GroupMapping& mapping) {
  mapping.validate();
  const std::size_t G = mapping.group_count();
  if (group_params.size() != G) {
    throw ConfigError("grouped_linear: " + std::to_string(group_params.size()) +
                      " parameter sets for " + std::to_string(G) + " groups");
  }
  std::vector<ad::Variable> weights, biases;
  std::vector<std::size_t> row_block, out_col;
  for (std::size_t k = 0; k < G; ++k) {
    const Tensor& w = role(group_params[k], "weight");
    if (w.rank() != 2 || w.dim(0) != mapping.groups[k].size()) {
      throw ShapeError("grouped_linear: group " + std::to_string(k) + " weight " +
                       shape_string(w.shape()) + " does not have " +
                       std::to_string(mapping.groups[k].size()) + " rows");
    }
    weights.push_back(constant(w));
    biases.push_back(constant(role(group_params[k], "bias")));
    for (std::size_t c : mapping.groups[k]) {
      row_block.push_back(k);
      out_col.push_back(c);
    }
  }
  ad::Tape tape;
  const ad::Variable w = ad::concat(tape, weights);
  const ad::Variable b = ad::concat(tape, biases);
  return ad::block_linear(tape, constant(input), w, b, G, row_block, out_col,
                          mapping.num_classes, kTrimmedLogit)
      .value();
}

Tensor batch_norm_forward(const Tensor& input, LayerParams& params, Mode mode) {
  auto rm = params.find("running_mean");
  auto rv = params.find("running_var");
  auto nb = params.find("num_batches");
  if (rm == params.end() || rv == params.end() || nb == params.end()) {
    throw AlignmentError("batch_norm: missing running statistics");
  }
  if (mode == Mode::eval && nb->second[0] == 0.0f) {
    throw StateError("batch_norm: eval requested before any training batch");
  }
  ad::Tape tape;
  Tensor out = ad::batch_norm(tape, constant(input), constant(role(params, "weight")),
                              constant(role(params, "bias")), rm->second, rv->second,
                              mode == Mode::train)
                   .value();
  if (mode == Mode::train) nb->second[0] += 1.0f;
  return out;
}

Tensor group_norm_forward(const Tensor& input, const LayerParams& params,
                          std::size_t groups) {
  ad::Tape tape;
  return ad::group_norm(tape, constant(input), constant(role(params, "weight")),
                        constant(role(params, "bias")), groups)
      .value();
}

LayerParams make_batch_norm_params(std::size_t channels) {
  LayerParams p;
  p["weight"] = Tensor({channels}, 1.0f);
  p["bias"] = Tensor({channels}, 0.0f);
  p["running_mean"] = Tensor({channels}, 0.0f);
  p["running_var"] = Tensor({channels}, 1.0f);
  p["num_batches"] = Tensor({1}, 0.0f);
  return p;
}

}  // namespace psinet
