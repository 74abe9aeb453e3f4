#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "psinet/architecture.hpp"
#include "psinet/builder.hpp"
#include "psinet/dataset.hpp"
#include "psinet/model_params.hpp"
#include "psinet/network.hpp"
#include "psinet/partition.hpp"

namespace psinet {

enum class Strategy { fedavg, fedprox, psinet };
enum class EmptyGroupPolicy { carry_forward, error };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view text);
std::string_view to_string(EmptyGroupPolicy p);
EmptyGroupPolicy empty_group_policy_from_string(std::string_view text);

struct FederationConfig {
  std::size_t rounds = 1;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  float lr = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  Strategy strategy = Strategy::fedavg;
  /// FedProx proximal coefficient.
  float mu = 0.0f;
  /// Psi-Net: drop structure groups without local classes.
  bool trimming = true;
  /// FedAvg/FedProx: weight nodes by sample count instead of uniformly.
  bool weighted = false;
  EmptyGroupPolicy empty_group = EmptyGroupPolicy::carry_forward;
  /// Shuffling streams derive from (seed, node, round).
  std::uint64_t seed = 0;
  /// Seed of the initial global model.
  std::uint64_t init_seed = 0;
  /// Worker threads for node training; 1 runs nodes in order on the caller.
  std::size_t threads = 1;

  /// Throws ConfigError for R < 1, e < 1, batch 0, non-positive lr, mu < 0,
  /// momentum outside [0, 1).
  void validate() const;
};

struct LocalResult {
  ModelParams params;
  /// Mean batch loss / accuracy over all local steps of the call.
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
  std::size_t steps = 0;
};

struct BatchResult {
  double loss = 0.0;
  std::size_t correct = 0;
};

/// One forward/backward pass in train mode on `images`. Adds
/// (mu/2) * sum ||w - anchor||^2 over every trainable entry when `anchor` is
/// given. Gradients accumulate in the model's variables.
BatchResult forward_backward(BoundModel& model, const Tensor& images, std::span<const int> labels,
                             const ModelParams* anchor = nullptr, float mu = 0.0f);

/// e epochs of minibatch SGD over the node's samples, reshuffled every epoch
/// from a stream derived from (cfg.seed, node, round). The last batch of an
/// epoch may be short. FedProx anchors the proximal term at the received
/// parameters. Throws ConfigError for an empty partition.
LocalResult local_train(const ArchitectureSpec& spec, const ModelParams& params,
                        const Dataset& data, const NodePartition& part,
                        const FederationConfig& cfg, std::size_t round);

/// Coordinate-wise average of every tensor, buffers included. Uniform when
/// `weights` is empty. Each coordinate is summed in 64-bit over the node
/// values sorted by (value, weight), so any node order gives identical bits.
ModelParams aggregate_fedavg(std::span<const ModelParams> models,
                             std::span<const double> weights = {});

struct BlockProvenance {
  /// Round of the last update; -1 for the initial model.
  std::ptrdiff_t round = -1;
  /// Nodes averaged in that update.
  std::vector<std::size_t> nodes;
  friend bool operator==(const BlockProvenance&, const BlockProvenance&) = default;
};

/// Shared block plus one block per global structure group.
struct GlobalModel {
  std::uint64_t fingerprint = 0;
  ModelParams shared;
  std::map<std::size_t, ModelParams> groups;
  BlockProvenance shared_provenance;
  std::map<std::size_t, BlockProvenance> group_provenance;

  /// All blocks merged into one parameter set for the full regulated spec.
  ModelParams assemble() const;
  /// Splits a full (untrimmed) parameter set into blocks.
  static GlobalModel from_params(const ModelParams& params);
};

/// Psi-Net aggregation for one round:
///   shared block: uniform average over all nodes;
///   group c: uniform average over I_c = nodes whose mask keeps c.
/// An empty I_c carries `previous` forward (or throws StateError under the
/// error policy / without a previous block).
GlobalModel aggregate_psinet(std::span<const ModelParams> models,
                             std::span<const TrimMask> masks, const GroupMapping& mapping,
                             const GlobalModel* previous = nullptr,
                             EmptyGroupPolicy policy = EmptyGroupPolicy::carry_forward,
                             std::ptrdiff_t round = 0);

struct Payload {
  ModelParams params;
  std::size_t bytes = 0;
};

/// Shared block plus exactly the groups `node_spec` keeps; StateError when the
/// global model lacks one of them.
Payload distribute(const GlobalModel& global, const ArchitectureSpec& node_spec);

struct NodeReport {
  std::size_t node = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
  std::size_t bytes_up = 0;
  std::size_t bytes_down = 0;
  std::size_t parameter_count = 0;
  std::vector<std::size_t> kept_groups;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<NodeReport> nodes;
  double global_loss = 0.0;
  double global_accuracy = 0.0;
  double wall_ms = 0.0;
  /// Psi-Net: I_c of every group as used this round (empty when carried).
  std::map<std::size_t, std::vector<std::size_t>> group_nodes;
};

struct FederationResult {
  std::vector<RoundReport> reports;
  GlobalModel global;
  /// Final global parameters for the full spec.
  ModelParams global_params;
  /// Node models after the last local training, before aggregation.
  std::vector<ModelParams> final_local;
  std::vector<ArchitectureSpec> node_specs;
};

using RoundCallback = std::function<void(const RoundReport&, const ModelParams& global)>;

/// Synchronous rounds of distribute -> local_train (all nodes) -> aggregate ->
/// evaluate the full global model on `test`. `spec` must be regulated for the
/// psinet strategy. `initial` overrides init_params(spec, cfg.init_seed).
FederationResult run_federation(const FederationConfig& cfg, const ArchitectureSpec& spec,
                                const Dataset& train, std::span<const NodePartition> partitions,
                                const Dataset& test, const ModelParams* initial = nullptr,
                                const RoundCallback& on_round = {});

}  // namespace psinet
