#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psinet/config.hpp"
#include "psinet/federation.hpp"
#include "psinet/interpretation.hpp"

namespace psinet {

struct PreparedData {
  DatasetSplit data;
  std::vector<NodePartition> partitions;
};

/// Loads or synthesizes the dataset and partitions it. File-backed kinds read
/// dataset.path, falling back to $PSINET_DATA_DIR.
PreparedData prepare_data(const ExperimentConfig& cfg);

struct PsinetResolution {
  ArchitectureSpec spec;
  /// Shared depth as a base-spec layer index.
  std::ptrdiff_t shared_depth = -1;
  /// Filled when the depth was selected automatically.
  std::optional<DivergenceProfile> profile;
};

/// Builds the Psi-Net for `base`. With shared_depth "auto" a central model is
/// trained for psinet.pretrain_epochs on `train`, its TV profile computed on
/// `probe_source`, and the depth selected with psinet.auto_alpha.
PsinetResolution resolve_psinet(const ExperimentConfig& cfg, const ArchitectureSpec& base,
                                const Dataset& train, const Dataset& probe_source);

struct StrategyOutcome {
  Strategy strategy = Strategy::fedavg;
  ArchitectureSpec spec;
  FederationResult result;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  /// Psi-Net: group_alignment_score of the final global model.
  std::optional<double> alignment;
  /// Mean cross-node top-class agreement of the final local models over the
  /// probe layers (FedAvg / FedProx).
  std::optional<double> agreement;
};

struct ExperimentResult {
  /// Input config with every automatic choice made explicit.
  ExperimentConfig resolved;
  std::vector<StrategyOutcome> outcomes;
};

/// Runs every configured strategy on identical partitions and seeds. With
/// `write_artifacts` it writes, under cfg.output_dir:
///   resolved_config.json, summary.csv, [depth_profile.csv],
///   <strategy>/metrics.csv, <strategy>/featuremap.csv, <strategy>/checkpoint.psnf
/// The checkpoint is rewritten after every round, so a run that fails mid-way
/// leaves the last good round on disk.
ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write_artifacts = true);

inline constexpr const char* kMetricsHeader =
    "round,strategy,node_or_global,loss,accuracy,bytes_up,bytes_down,wall_ms";

/// One row per node plus one "global" row; bytes on the global row are the
/// round totals.
void write_metrics_rows(std::ostream& out, Strategy strategy, const RoundReport& report);

/// Conv layers probed for feature maps and agreement: cfg.probe.layers or every
/// conv layer of `spec`.
std::vector<std::size_t> probe_layers(const ExperimentConfig& cfg, const ArchitectureSpec& spec);

/// Sets a dotted key ("federation.rounds") in a JSON config, creating objects.
void set_dotted(nlohmann::json& j, const std::string& dotted, const nlohmann::json& value);

/// Parses "a,b,c" into JSON values (numbers, booleans, otherwise strings).
std::vector<nlohmann::json> parse_value_list(const std::string& text);

/// Runs one experiment per value of `param`, each in
/// <output_dir>/<param>=<value>, and writes <output_dir>/sweep_summary.csv.
std::vector<ExperimentResult> run_sweep(const nlohmann::json& base, const std::string& param,
                                        std::span<const nlohmann::json> values);

}  // namespace psinet
