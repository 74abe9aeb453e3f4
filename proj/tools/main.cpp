// psinet: run federated experiments, sweeps and feature-map diagnostics.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "psinet/checkpoint.hpp"
#include "psinet/error.hpp"
#include "psinet/experiment.hpp"

namespace {

using namespace psinet;

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

void print_summary(const ExperimentResult& r) {
  for (const auto& o : r.outcomes) {
    std::cout << to_string(o.strategy) << ": accuracy " << o.final_accuracy << " loss "
              << o.final_loss;
    if (o.alignment) std::cout << " alignment " << *o.alignment;
    if (o.agreement) std::cout << " agreement " << *o.agreement;
    std::cout << '\n';
  }
}

int cmd_run(const std::string& path) {
  const ExperimentConfig cfg = load_config(path);
  const ExperimentResult r = run_experiment(cfg);
  print_summary(r);
  std::cout << "artifacts in " << cfg.output_dir << '\n';
  return kOk;
}

int cmd_sweep(const std::string& path, const std::string& param, const std::string& values) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  const nlohmann::json base = nlohmann::json::parse(in, nullptr, true, true);
  const auto list = parse_value_list(values);
  const auto results = run_sweep(base, param, list);
  for (std::size_t i = 0; i < results.size(); ++i) {
    std::cout << param << '=' << list[i].dump() << '\n';
    print_summary(results[i]);
  }
  return kOk;
}

// Picks the architecture the checkpoint was written for: the plain network
// first, then the Psi-Net variant of the config.
std::pair<ArchitectureSpec, ModelParams> match_checkpoint(const ExperimentConfig& cfg,
                                                          const Dataset& train,
                                                          const Dataset& test,
                                                          const std::string& ckpt) {
  const ArchitectureSpec base = make_architecture(cfg, train.sample_shape(), train.num_classes);
  try {
    return {base, load_checkpoint_for(ckpt, base)};
  } catch (const AlignmentError&) {
  }
  const ArchitectureSpec psi = resolve_psinet(cfg, base, train, test).spec;
  return {psi, load_checkpoint_for(ckpt, psi)};
}

int cmd_featuremap(const std::string& ckpt, const std::string& layer, const std::string& config,
                   const std::string& out_path) {
  const ExperimentConfig cfg = load_config(config);
  const PreparedData data = prepare_data(cfg);
  const auto [spec, params] = match_checkpoint(cfg, data.data.train, data.data.test, ckpt);
  const std::size_t index = spec.layer_index(layer);
  if (!spec.layers[index].is_conv()) {
    std::string convs;
    for (std::size_t i : conv_layer_indices(spec)) convs += " " + spec.layers[i].name;
    throw ConfigError("layer '" + layer + "' is not a conv layer; conv layers:" + convs);
  }
  const ProbeSet probe = make_probe_set(data.data.test, cfg.probe.batches_per_class,
                                        cfg.probe.batch_size, derive_seed(cfg.seed, 0x9b));
  const auto prefs = class_preference(spec, params, probe, index);
  if (out_path == "-") {
    write_featuremap_csv(std::cout, spec, prefs);
  } else {
    std::ofstream out(out_path);
    if (!out) throw Error("cannot write '" + out_path + "'");
    write_featuremap_csv(out, spec, prefs);
    std::cout << "wrote " << prefs.size() << " rows to " << out_path << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning with class-grouped model regulation"};
  app.require_subcommand(1);

  std::string config;
  auto* run = app.add_subcommand("run", "Run every strategy of an experiment config");
  run->add_option("config", config, "Experiment config (JSON)")->required();

  std::string param, values;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per parameter value");
  sweep->add_option("config", config, "Base experiment config (JSON)")->required();
  sweep->add_option("--param", param, "Dotted config key, e.g. psinet.shared_depth")->required();
  sweep->add_option("--values", values, "Comma separated values")->required();

  std::string ckpt, layer, diag_config, out_path = "featuremap.csv";
  auto* diag = app.add_subcommand("diag", "Diagnostics");
  diag->require_subcommand(1);
  auto* fmap = diag->add_subcommand("featuremap", "Per-channel class preferences of one layer");
  fmap->add_option("checkpoint", ckpt, "Checkpoint file")->required();
  fmap->add_option("layer", layer, "Conv layer name")->required();
  fmap->add_option("--config", diag_config, "Experiment config describing model and data")
      ->required();
  fmap->add_option("-o,--output", out_path, "Output CSV, '-' for stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config);
    if (*sweep) return cmd_sweep(config, param, values);
    return cmd_featuremap(ckpt, layer, diag_config, out_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}
