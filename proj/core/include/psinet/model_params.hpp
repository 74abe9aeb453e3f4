#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psinet/tensor.hpp"

namespace psinet {

/// Which aggregation block a parameter belongs to.
///
/// Parameter names carry the label as a prefix: "shared/conv1.weight" or
/// "group3/conv4.weight".
struct Partition {
  static constexpr std::size_t kShared = static_cast<std::size_t>(-1);
  std::size_t group = kShared;

  bool shared() const noexcept { return group == kShared; }
  std::string prefix() const;
  friend bool operator==(const Partition&, const Partition&) = default;
};

/// Splits "group3/conv4.weight" into its partition and the remainder.
/// Throws ConfigError for names without a recognised prefix.
std::pair<Partition, std::string> split_param_name(std::string_view name);
std::string make_param_name(Partition partition, std::string_view layer,
                            std::string_view role);

/// Running statistics and counters: averaged but never trained.
bool is_buffer_param(std::string_view name);

/// Named-tensor parameter set of one model.
///
/// Ordered by name so every traversal (aggregation, serialization) runs in a
/// fixed order. The fingerprint identifies the untrimmed architecture; cross
/// model arithmetic requires equal fingerprints.
class ModelParams {
 public:
  using Map = std::map<std::string, Tensor, std::less<>>;

  ModelParams() = default;
  explicit ModelParams(std::uint64_t fingerprint) : fingerprint_(fingerprint) {}

  std::uint64_t fingerprint() const noexcept { return fingerprint_; }
  void set_fingerprint(std::uint64_t f) noexcept { fingerprint_ = f; }

  const Map& tensors() const noexcept { return tensors_; }
  Map& tensors() noexcept { return tensors_; }

  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  void set(std::string name, Tensor value);
  std::size_t size() const noexcept { return tensors_.size(); }

  /// Total element count.
  std::size_t parameter_count() const noexcept;
  /// Element count excluding buffers.
  std::size_t trainable_count() const noexcept;

  /// Entries of one partition, same fingerprint.
  ModelParams subset(Partition partition) const;
  /// Group ids that own at least one tensor, ascending.
  std::vector<std::size_t> groups() const;

  /// Adds every entry of `other`; throws AlignmentError on duplicates.
  void merge(const ModelParams& other);

  bool all_finite() const noexcept;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  std::uint64_t fingerprint_ = 0;
  Map tensors_;
};

/// True when both sets hold the same names with bitwise identical payloads.
bool bitwise_equal(const ModelParams& a, const ModelParams& b) noexcept;

/// Largest element-wise difference over identically named entries.
/// Throws AlignmentError if the name sets differ.
double max_abs_diff(const ModelParams& a, const ModelParams& b);

}  // namespace psinet
