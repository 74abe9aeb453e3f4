#include "psinet/interpretation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "psinet/csv.hpp"
#include "psinet/error.hpp"
#include "psinet/network.hpp"

namespace psinet {

ProbeSet make_probe_set(const Dataset& ds, std::size_t batches_per_class,
                        std::size_t batch_size, std::uint64_t seed) {
  if (batches_per_class == 0 || batch_size == 0) {
    throw ConfigError("probe set needs at least one batch of one sample per class");
  }
  ProbeSet probe;
  probe.num_classes = ds.num_classes;
  probe.batches.resize(ds.num_classes);
  auto by_class = ds.indices_by_class();
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) throw ConfigError("class " + std::to_string(c) + " has no probe samples");
    std::mt19937_64 rng(derive_seed(seed, 0x9b0be, c));
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t per = std::max<std::size_t>(
        1, std::min(batch_size, idx.size() / batches_per_class));
    for (std::size_t b = 0; b < batches_per_class; ++b) {
      const std::size_t start = (b * per) % idx.size();
      std::vector<std::size_t> pick;
      for (std::size_t j = 0; j < per; ++j) pick.push_back(idx[(start + j) % idx.size()]);
      probe.batches[c].push_back(ds.gather(pick));
    }
  }
  return probe;
}

std::vector<double> PreferenceVector::normalized() const {
  std::vector<double> out(p.size(), 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    out[c] = p[c] > 0.0 ? p[c] : 0.0;
    total += out[c];
  }
  if (total > 0.0) {
    for (double& v : out) v /= total;
  }
  return out;
}

bool PreferenceVector::has_preference() const noexcept {
  return std::any_of(p.begin(), p.end(), [](double v) { return v > 0.0; });
}

std::vector<PreferenceVector> class_preference(const ArchitectureSpec& spec,
                                               const ModelParams& params,
                                               const ProbeSet& probe, std::size_t layer) {
  if (spec.regulation && spec.regulation->trimmed()) {
    throw ConfigError("class preference needs an untrimmed model");
  }
  if (probe.num_classes != spec.num_classes || probe.batches.size() != spec.num_classes) {
    throw ConfigError("probe set covers " + std::to_string(probe.batches.size()) +
                      " classes, model has " + std::to_string(spec.num_classes));
  }
  for (std::size_t c = 0; c < probe.batches.size(); ++c) {
    if (probe.batches[c].empty()) {
      throw ConfigError("class " + std::to_string(c) + " has no probe batches");
    }
  }
  const std::size_t tap = activation_layer(spec, layer);
  const std::size_t channels = spec.layers[layer].out;
  const std::size_t C = spec.num_classes;
  std::vector<PreferenceVector> prefs(channels);
  for (std::size_t j = 0; j < channels; ++j) {
    prefs[j].layer = layer;
    prefs[j].channel = j;
    prefs[j].p.assign(C, 0.0);
  }
  BoundModel model(spec, params, false);
  for (std::size_t c = 0; c < C; ++c) {
    double weight_sum = 0.0;
    std::vector<double> acc(channels, 0.0);
    for (const Tensor& batch : probe.batches[c]) {
      const std::size_t n = batch.dim(0);
      ad::Tape tape;
      const ad::Variable input(batch, true);
      const ForwardResult r = forward(tape, model, input, Mode::eval, tap);
      Tensor mask({n, C});
      for (std::size_t i = 0; i < n; ++i) mask[i * C + c] = 1.0f;
      const ad::Variable z =
          ad::sum(tape, ad::mul(tape, r.logits, ad::Variable(std::move(mask))));
      tape.backward(z);
      const Tensor& a = r.tap.value();
      const Tensor g = r.tap.grad();
      const std::size_t hw = a.numel() / (n * channels);
      std::vector<double> batch_acc(channels, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < channels; ++j) {
          const std::size_t base = (i * channels + j) * hw;
          double mean_a = 0.0, sum_g = 0.0;
          for (std::size_t k = 0; k < hw; ++k) {
            mean_a += a[base + k];
            sum_g += g[base + k];
          }
          batch_acc[j] += mean_a / double(hw) * sum_g;
        }
      }
      for (std::size_t j = 0; j < channels; ++j) acc[j] += batch_acc[j] / double(n);
      weight_sum += 1.0;
    }
    for (std::size_t j = 0; j < channels; ++j) prefs[j].p[c] = acc[j] / weight_sum;
  }
  return prefs;
}

std::size_t top_response_class(std::span<const double> p) {
  std::size_t best = kNoPreference;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] > 0.0 && (best == kNoPreference || p[c] > p[best])) best = c;
  }
  return best;
}

std::size_t top_response_class(const PreferenceVector& pref) {
  return top_response_class(std::span<const double>(pref.p));
}

double total_variance(std::span<const PreferenceVector> layer_prefs) {
  std::vector<std::vector<double>> rows;
  for (const auto& pv : layer_prefs) {
    if (pv.has_preference()) rows.push_back(pv.normalized());
  }
  if (rows.empty()) return 0.0;
  std::sort(rows.begin(), rows.end());
  const std::size_t C = rows.front().size();
  std::vector<double> mean(C, 0.0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < C; ++c) mean[c] += r[c];
  }
  for (double& m : mean) m /= double(rows.size());
  double total = 0.0;
  for (const auto& r : rows) {
    double sq = 0.0;
    for (std::size_t c = 0; c < C; ++c) sq += (r[c] - mean[c]) * (r[c] - mean[c]);
    total += std::sqrt(sq);
  }
  return total / double(rows.size());
}

DivergenceProfile total_variance_profile(const ArchitectureSpec& spec, const ModelParams& params,
                                         const ProbeSet& probe) {
  DivergenceProfile profile;
  for (std::size_t li : conv_layer_indices(spec)) {
    const auto prefs = class_preference(spec, params, probe, li);
    profile.layers.push_back(li);
    profile.tv.push_back(total_variance(prefs));
    profile.neurons.push_back(prefs.size());
  }
  return profile;
}

std::size_t select_shared_depth(const DivergenceProfile& profile, double alpha) {
  if (profile.tv.empty()) throw ConfigError("empty divergence profile");
  const double mx = *std::max_element(profile.tv.begin(), profile.tv.end());
  if (!(mx > 0.0)) {
    throw ConfigError("divergence profile is flat zero; set shared_depth manually");
  }
  const double threshold = alpha * mx;
  for (std::size_t i = 0; i < profile.tv.size(); ++i) {
    if (profile.tv[i] >= threshold) return i == 0 ? 0 : i - 1;
  }
  return profile.tv.size() - 1;
}

std::ptrdiff_t select_shared_layer(const ArchitectureSpec& spec, const DivergenceProfile& profile,
                                   double alpha) {
  const std::size_t pos = select_shared_depth(profile, alpha);
  return static_cast<std::ptrdiff_t>(block_end(spec, profile.layers.at(pos)));
}

double group_alignment_score(const GroupMapping& mapping,
                             std::span<const std::vector<PreferenceVector>> layers) {
  const std::size_t G = mapping.group_count();
  std::size_t aligned = 0, counted = 0;
  for (const auto& prefs : layers) {
    const std::size_t n = prefs.size();
    if (n == 0) continue;
    if (n % G) throw ConfigError("layer with " + std::to_string(n) + " channels is not grouped by " + std::to_string(G));
    for (const auto& pv : prefs) {
      const std::size_t top = top_response_class(pv);
      if (top == kNoPreference) continue;
      const std::size_t g = pv.channel / (n / G);
      const auto& cls = mapping.groups[g];
      ++counted;
      if (std::binary_search(cls.begin(), cls.end(), top)) ++aligned;
    }
  }
  return counted == 0 ? 1.0 : double(aligned) / double(counted);
}

double group_alignment_score(const ArchitectureSpec& spec, const ModelParams& params,
                             const ProbeSet& probe) {
  if (!spec.regulation) throw ConfigError("group alignment needs a built Psi-Net");
  std::vector<std::vector<PreferenceVector>> layers;
  for (std::size_t li : conv_layer_indices(spec)) {
    if (spec.layers[li].kind == LayerKind::grouped_conv) {
      layers.push_back(class_preference(spec, params, probe, li));
    }
  }
  return group_alignment_score(spec.regulation->mapping, layers);
}

double top_class_agreement(std::span<const std::vector<PreferenceVector>> per_node) {
  if (per_node.size() < 2) throw ConfigError("agreement needs at least two nodes");
  const std::size_t channels = per_node.front().size();
  for (const auto& v : per_node) {
    if (v.size() != channels) throw ConfigError("nodes disagree on channel count");
  }
  if (channels == 0) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < channels; ++j) {
    std::size_t agree = 0, pairs = 0;
    for (std::size_t a = 0; a < per_node.size(); ++a) {
      const std::size_t ta = top_response_class(per_node[a][j]);
      for (std::size_t b = a + 1; b < per_node.size(); ++b) {
        const std::size_t tb = top_response_class(per_node[b][j]);
        ++pairs;
        if (ta != kNoPreference && ta == tb) ++agree;
      }
    }
    total += double(agree) / double(pairs);
  }
  return total / double(channels);
}

std::vector<std::size_t> top_class_histogram(std::span<const PreferenceVector> prefs,
                                             std::size_t num_classes) {
  std::vector<std::size_t> hist(num_classes, 0);
  for (const auto& pv : prefs) {
    const std::size_t t = top_response_class(pv);
    if (t != kNoPreference && t < num_classes) ++hist[t];
  }
  return hist;
}

void write_featuremap_csv(std::ostream& out, const ArchitectureSpec& spec,
                          std::span<const PreferenceVector> prefs, bool header) {
  const std::size_t C = spec.num_classes;
  if (header) {
    out << "layer,channel,group,top_class";
    for (std::size_t c = 0; c < C; ++c) out << ",p_" << c;
    out << '\n';
  }
  for (const auto& pv : prefs) {
    const LayerDescriptor& l = spec.layers.at(pv.layer);
    out << l.name << ',' << pv.channel << ',';
    if (spec.in_grouped_region(pv.layer)) {
      const std::size_t G = spec.regulation->mapping.group_count();
      out << pv.channel / (l.out / G);
    } else {
      out << "shared";
    }
    const std::size_t top = top_response_class(pv);
    out << ',' << (top == kNoPreference ? std::string("-1") : std::to_string(top));
    for (double v : pv.p) out << ',' << format_double(v);
    out << '\n';
  }
}

}  // namespace psinet
