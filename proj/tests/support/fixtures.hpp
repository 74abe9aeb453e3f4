#pragma once

// Model fixtures and slow reference computations shared by the unit tests and
// the acceptance runner.

#include <random>
#include <vector>

#include "psinet/architecture.hpp"
#include "psinet/autodiff.hpp"
#include "psinet/builder.hpp"
#include "psinet/interpretation.hpp"
#include "psinet/network.hpp"

namespace fixtures {

using namespace psinet;

inline GroupMapping mapping_at(const ArchitectureSpec& base, std::size_t classes, std::size_t groups,
                               const char* last_shared_conv) {
  GroupMapping m = default_mapping(classes, groups);
  m.shared_depth = last_shared_conv ? std::ptrdiff_t(block_end(base, base.layer_index(last_shared_conv))) : -1;
  return m;
}

// Makes eval mode usable on an untrained model.
inline void randomize_norm_state(ModelParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  for (auto& [name, t] : p.tensors()) {
    if (name.ends_with(".num_batches")) t[0] = 1.0f;
    if (name.ends_with(".running_var")) for (auto& v : t.data()) v = u(rng);
    if (name.ends_with(".running_mean")) for (auto& v : t.data()) v = 0.3f * (u(rng) - 1.0f);
  }
}

// Per-sample loop: one forward/backward per (sample, class), summed in 64-bit.
inline std::vector<std::vector<double>> per_sample_preference(const ArchitectureSpec& spec,
                                                              const ModelParams& params,
                                                              const ProbeSet& probe, std::size_t layer) {
  const std::size_t tap = activation_layer(spec, layer);
  std::vector<std::vector<double>> p;
  for (std::size_t c = 0; c < probe.num_classes; ++c) {
    std::vector<double> acc;
    for (const Tensor& batch : probe.batches[c]) {
      const std::size_t n = batch.dim(0), sample = batch.numel() / n;
      std::vector<double> bsum;
      for (std::size_t s = 0; s < n; ++s) {
        Tensor one({1, batch.dim(1), batch.dim(2), batch.dim(3)},
                   std::vector<float>(batch.data().begin() + s * sample,
                                      batch.data().begin() + (s + 1) * sample));
        BoundModel model(spec, params, false);
        ad::Tape tape;
        const ad::Variable x(one, true);
        const ForwardResult r = forward(tape, model, x, Mode::eval, tap);
        Tensor mask(r.logits.shape());
        mask[c] = 1.0f;
        tape.backward(ad::sum(tape, ad::mul(tape, r.logits, ad::Variable(mask))));
        const Tensor& a = r.tap.value();
        const Tensor g = r.tap.grad();
        const std::size_t ch = a.dim(1), hw = a.numel() / ch;
        bsum.resize(ch, 0.0);
        for (std::size_t j = 0; j < ch; ++j) {
          double am = 0, gs = 0;
          for (std::size_t k = 0; k < hw; ++k) {
            am += a[j * hw + k];
            gs += g[j * hw + k];
          }
          bsum[j] += am / double(hw) * gs;
        }
      }
      acc.resize(bsum.size(), 0.0);
      for (std::size_t j = 0; j < bsum.size(); ++j) acc[j] += bsum[j] / double(n);
    }
    for (double& v : acc) v /= double(probe.batches[c].size());
    p.push_back(acc);
  }
  return p;
}

}  // namespace fixtures
