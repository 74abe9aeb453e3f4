#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include "psinet/architecture.hpp"
#include "psinet/dataset.hpp"
#include "psinet/model_params.hpp"

namespace psinet {

/// Probe images grouped by class: batches[c][b] is an [n, C, H, W] tensor of
/// class-c samples.
struct ProbeSet {
  std::size_t num_classes = 0;
  std::vector<std::vector<Tensor>> batches;
};

/// Draws `batches_per_class` batches of up to `batch_size` samples of every
/// class from `ds` (without replacement inside a class, seeded). Throws
/// ConfigError naming a class that has no samples.
ProbeSet make_probe_set(const Dataset& ds, std::size_t batches_per_class,
                        std::size_t batch_size, std::uint64_t seed);

/// Class preference of one channel.
struct PreferenceVector {
  std::size_t layer = 0;
  std::size_t channel = 0;
  /// p_c for every class.
  std::vector<double> p;

  /// Negative entries clamped to zero, then scaled to sum to one. All zeros
  /// when no entry is positive.
  std::vector<double> normalized() const;
  bool has_preference() const noexcept;
};

/// For each channel of conv layer `layer` (spec index):
///   p_c = mean over the class-c batches of
///         mean over samples of  mean_hw(a) * sum_hw dZ_c/da
/// where a is the channel's activation at the end of the conv block (after
/// its ReLU), Z_c the pre-softmax logit of class c, evaluated in eval mode.
/// The model must be untrimmed. Throws ConfigError for a class without probe
/// batches.
std::vector<PreferenceVector> class_preference(const ArchitectureSpec& spec,
                                               const ModelParams& params,
                                               const ProbeSet& probe, std::size_t layer);

inline constexpr std::size_t kNoPreference = std::numeric_limits<std::size_t>::max();

/// argmax_c p_c, ties to the lowest class; kNoPreference when no entry is
/// positive.
std::size_t top_response_class(const PreferenceVector& pref);
std::size_t top_response_class(std::span<const double> p);

/// TV = (1/L) sum_i || P^_i - mean_j P^_j ||_2 over the L channels that have a
/// preference. Accumulated in 64-bit over the channels sorted by their
/// normalized vectors, so any reordering of the input gives identical bits.
double total_variance(std::span<const PreferenceVector> layer_prefs);

struct DivergenceProfile {
  /// Spec indices of the probed conv layers, in order.
  std::vector<std::size_t> layers;
  std::vector<double> tv;
  std::vector<std::size_t> neurons;
};

/// TV of every conv layer of the model.
DivergenceProfile total_variance_profile(const ArchitectureSpec& spec, const ModelParams& params,
                                         const ProbeSet& probe);

/// Position (into profile.layers) of the last shared conv layer: the one
/// before the first layer whose TV reaches alpha * max(TV), and at least 0.
/// Throws ConfigError on an empty or all-zero profile.
std::size_t select_shared_depth(const DivergenceProfile& profile, double alpha = 0.5);

/// select_shared_depth mapped to a spec layer index: the end of the selected
/// conv layer's block, usable as GroupMapping::shared_depth.
std::ptrdiff_t select_shared_layer(const ArchitectureSpec& spec,
                                   const DivergenceProfile& profile, double alpha = 0.5);

/// Fraction of channels whose top response class lies in the class set of the
/// structure group owning the channel (channel j of an n-channel layer belongs
/// to group j / (n / G)). Channels without a preference are skipped; 1.0 when
/// none remain.
double group_alignment_score(const GroupMapping& mapping,
                             std::span<const std::vector<PreferenceVector>> layers);

/// Alignment over every grouped conv layer of a built Psi-Net.
double group_alignment_score(const ArchitectureSpec& spec, const ModelParams& params,
                             const ProbeSet& probe);

/// Mean over channels of the fraction of node pairs agreeing on the top
/// response class. per_node[i] holds node i's preferences for one layer.
/// Pairs where either node has no preference count as disagreeing.
double top_class_agreement(std::span<const std::vector<PreferenceVector>> per_node);

/// Histogram of top response classes (sentinels excluded).
std::vector<std::size_t> top_class_histogram(std::span<const PreferenceVector> prefs,
                                             std::size_t num_classes);

/// CSV rows "layer,channel,group,top_class,p_0..p_{C-1}". group is the owning
/// structure group, or "shared"; top_class is -1 for no preference.
void write_featuremap_csv(std::ostream& out, const ArchitectureSpec& spec,
                          std::span<const PreferenceVector> prefs, bool header = true);

}  // namespace psinet
