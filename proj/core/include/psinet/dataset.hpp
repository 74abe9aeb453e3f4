#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "psinet/tensor.hpp"

namespace psinet {

/// Images [N, C, H, W] in [0, 1] (or standardized, see channel_mean) with one
/// integer label per sample.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  /// Per-channel standardization applied to `images`; empty when none.
  std::vector<float> channel_mean;
  std::vector<float> channel_std;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;
  std::vector<std::size_t> class_counts() const;
  /// Copies the samples at `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Images at `indices` as one [n, C, H, W] tensor.
  Tensor gather(std::span<const std::size_t> indices) const;
  /// Indices of each class, ascending.
  std::vector<std::vector<std::size_t>> indices_by_class() const;
  /// Throws FormatError/ShapeError on inconsistent fields or labels out of range.
  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

inline constexpr std::size_t kCifarImageBytes = 3072;
inline constexpr std::size_t kCifar10RecordBytes = 3073;
inline constexpr std::size_t kCifar100RecordBytes = 3074;

/// Parses CIFAR-10 binary records (1 label byte + 3072 pixel bytes, CHW with
/// R, G, B planes). Throws FormatError with the byte offset of the first
/// incomplete record or of an out-of-range label.
Dataset parse_cifar10(std::span<const std::uint8_t> bytes);
/// Same layout with coarse and fine label bytes; the fine label is used.
Dataset parse_cifar100(std::span<const std::uint8_t> bytes);

/// One record re-encoded as CIFAR-10 bytes (pixels rounded from [0,1]).
std::vector<std::uint8_t> encode_cifar10_record(const Dataset& ds, std::size_t index);

/// Loads data_batch_1..5.bin and test_batch.bin from `dir`. With
/// `standardize`, train-set per-channel mean/std are applied to both splits and
/// recorded in the metadata fields.
DatasetSplit load_cifar10(const std::filesystem::path& dir, bool standardize = false);
/// Loads train.bin and test.bin (fine labels).
DatasetSplit load_cifar100(const std::filesystem::path& dir, bool standardize = false);

struct SynthOptions {
  std::size_t classes = 10;
  std::size_t per_class = 250;
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t channels = 1;
  /// Standard deviation of the additive pixel noise.
  float noise = 0.35f;
  std::uint64_t seed = 1;
};

/// Oriented sinusoidal gratings: class k has its own orientation/frequency
/// pair; every sample draws a random phase, contrast and sub-pixel frequency
/// jitter, then Gaussian pixel noise, clamped to [0, 1]. Samples cycle through
/// the classes (sample i has label i mod classes). Deterministic per seed.
Dataset synthesize_dataset(const SynthOptions& options);
Dataset synthesize_dataset(std::size_t classes, std::size_t per_class, std::size_t height,
                           std::size_t width, std::uint64_t seed);

/// Train and test sets drawn from independent streams of the same generator.
DatasetSplit synthesize_split(const SynthOptions& options, std::size_t test_per_class);

/// 64-bit mixing used to derive independent seeds from (seed, a, b).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept;

}  // namespace psinet
