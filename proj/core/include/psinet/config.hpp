#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psinet/architecture.hpp"
#include "psinet/builder.hpp"
#include "psinet/dataset.hpp"
#include "psinet/federation.hpp"
#include "psinet/partition.hpp"

namespace psinet {

/// Environment variable naming the directory that holds dataset files.
inline constexpr const char* kDataDirEnv = "PSINET_DATA_DIR";

struct DatasetConfig {
  /// "synthetic", "cifar10", "cifar100" or "file" (a saved container).
  std::string kind = "synthetic";
  SynthOptions synth;
  std::size_t test_per_class = 100;
  /// cifar*/file: location; empty means $PSINET_DATA_DIR.
  std::string path;
  bool standardize = false;
  /// Keep only this many training samples per class (0 = all).
  std::size_t train_per_class = 0;
};

struct ArchitectureConfig {
  /// "desk_cnn", "vgg9", "vgg16" or "custom".
  std::string preset = "desk_cnn";
  std::size_t width = 10;
  /// Block normalization of the base network: "batch_norm", "group_norm"
  /// (with norm_groups groups) or "none".
  std::string norm = "batch_norm";
  std::size_t norm_groups = 2;
  /// preset "custom": explicit layer list.
  std::vector<LayerDescriptor> layers;
};

struct PsinetConfig {
  std::size_t groups = 10;
  /// Name of the last shared conv layer (its whole block is shared), a layer
  /// index, "none" for no shared layers, or "auto".
  std::string shared_depth = "auto";
  double auto_alpha = 0.5;
  /// Central pre-training epochs before the auto depth probe.
  std::size_t pretrain_epochs = 5;
  SharedNorm shared_norm = SharedNorm::batch_norm;
  std::vector<std::size_t> class_order;
};

struct ProbeConfig {
  std::size_t batches_per_class = 2;
  std::size_t batch_size = 16;
  /// Conv layers exported to featuremap.csv; empty = every conv layer.
  std::vector<std::string> layers;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs/experiment";
  DatasetConfig dataset;
  ArchitectureConfig architecture;
  PsinetConfig psinet;
  PartitionSpec partition;
  FederationConfig federation;
  std::vector<Strategy> strategies{Strategy::fedavg, Strategy::psinet};
  ProbeConfig probe;
};

/// Parses and validates; throws ConfigError naming the offending field
/// (e.g. "federation.rounds: must be >= 1"). Unknown keys are rejected.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every effective setting, defaults included. parse_config(to_json(c))
/// reproduces c.
nlohmann::json to_json(const ExperimentConfig& c);

/// Cross-field checks that do not need data (architecture divisibility,
/// partition feasibility bounds, strategy settings).
void validate(const ExperimentConfig& c);

/// Base (unregulated) architecture for the configured dataset shape.
ArchitectureSpec make_architecture(const ExperimentConfig& c, const Shape& input_shape,
                                   std::size_t num_classes);

}  // namespace psinet
