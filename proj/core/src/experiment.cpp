#include "psinet/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "psinet/checkpoint.hpp"
#include "psinet/csv.hpp"
#include "psinet/error.hpp"
#include "psinet/optim.hpp"

namespace psinet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path data_path(const DatasetConfig& d) {
  if (!d.path.empty()) return d.path;
  if (const char* env = std::getenv(kDataDirEnv)) return env;
  throw ConfigError("dataset.path: not set and $" + std::string(kDataDirEnv) + " is empty");
}

Dataset cap_per_class(const Dataset& ds, std::size_t per_class) {
  if (per_class == 0) return ds;
  std::vector<std::size_t> keep;
  for (const auto& idx : ds.indices_by_class()) {
    keep.insert(keep.end(), idx.begin(), idx.begin() + std::min(per_class, idx.size()));
  }
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

std::ptrdiff_t parse_depth(const std::string& text, const ArchitectureSpec& base) {
  if (text == "none") return -1;
  if (!text.empty() && text.find_first_not_of("-0123456789") == std::string::npos) {
    return std::stoll(text);
  }
  return static_cast<std::ptrdiff_t>(block_end(base, base.layer_index(text)));
}

ModelParams pretrain_central(const ExperimentConfig& cfg, const ArchitectureSpec& base,
                             const Dataset& train) {
  FederationConfig f = cfg.federation;
  f.strategy = Strategy::fedavg;
  f.local_epochs = std::max<std::size_t>(cfg.psinet.pretrain_epochs, 1);
  NodePartition all;
  all.indices.resize(train.size());
  std::iota(all.indices.begin(), all.indices.end(), 0);
  return local_train(base, init_params(base, derive_seed(cfg.seed, 0x9e7)), train, all, f, 0)
      .params;
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span<const std::uint8_t>(
                        reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string value_label(const json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData out;
  const auto& d = cfg.dataset;
  if (d.kind == "synthetic") {
    out.data = synthesize_split(d.synth, d.test_per_class);
  } else if (d.kind == "cifar10") {
    out.data = load_cifar10(data_path(d), d.standardize);
  } else if (d.kind == "cifar100") {
    out.data = load_cifar100(data_path(d), d.standardize);
  } else {
    const fs::path dir = data_path(d);
    out.data = {load_dataset(dir / "train.psnf"), load_dataset(dir / "test.psnf")};
  }
  out.data.train = cap_per_class(out.data.train, d.train_per_class);
  out.partitions = partition(out.data.train, cfg.partition);
  return out;
}

PsinetResolution resolve_psinet(const ExperimentConfig& cfg, const ArchitectureSpec& base,
                                const Dataset& train, const Dataset& probe_source) {
  PsinetResolution r;
  GroupMapping m = default_mapping(base.num_classes, cfg.psinet.groups, cfg.psinet.class_order);
  if (cfg.psinet.shared_depth == "auto") {
    const ModelParams pre = pretrain_central(cfg, base, train);
    const ProbeSet probe = make_probe_set(probe_source, cfg.probe.batches_per_class,
                                          cfg.probe.batch_size, derive_seed(cfg.seed, 0x9b));
    r.profile = total_variance_profile(base, pre, probe);
    r.shared_depth = select_shared_layer(base, *r.profile, cfg.psinet.auto_alpha);
  } else {
    r.shared_depth = parse_depth(cfg.psinet.shared_depth, base);
  }
  m.shared_depth = r.shared_depth;
  r.spec = build_psinet(base, m, {cfg.psinet.shared_norm});
  return r;
}

void write_metrics_rows(std::ostream& out, Strategy strategy, const RoundReport& report) {
  const std::string s(to_string(strategy));
  std::size_t up = 0, down = 0;
  for (const auto& n : report.nodes) {
    out << report.round << ',' << s << ",node" << n.node << ',' << format_double(n.loss) << ','
        << format_double(n.accuracy) << ',' << n.bytes_up << ',' << n.bytes_down << ','
        << format_double(report.wall_ms) << '\n';
    up += n.bytes_up;
    down += n.bytes_down;
  }
  out << report.round << ',' << s << ",global," << format_double(report.global_loss) << ','
      << format_double(report.global_accuracy) << ',' << up << ',' << down << ','
      << format_double(report.wall_ms) << '\n';
}

std::vector<std::size_t> probe_layers(const ExperimentConfig& cfg, const ArchitectureSpec& spec) {
  if (cfg.probe.layers.empty()) return conv_layer_indices(spec);
  std::vector<std::size_t> out;
  for (const auto& name : cfg.probe.layers) {
    const std::size_t i = spec.layer_index(name);
    if (!spec.layers[i].is_conv()) throw ConfigError("probe.layers: '" + name + "' is not a conv layer");
    out.push_back(i);
  }
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg_in, bool write_artifacts) {
  ExperimentResult result;
  result.resolved = cfg_in;
  ExperimentConfig& cfg = result.resolved;

  PreparedData prepared = prepare_data(cfg);
  const Dataset& train = prepared.data.train;
  const Dataset& test = prepared.data.test;
  const ArchitectureSpec base = make_architecture(cfg, train.sample_shape(), train.num_classes);

  std::optional<PsinetResolution> psi;
  const bool wants_psinet =
      std::find(cfg.strategies.begin(), cfg.strategies.end(), Strategy::psinet) != cfg.strategies.end();
  if (wants_psinet) {
    psi = resolve_psinet(cfg, base, train, test);
    cfg.psinet.shared_depth = std::to_string(psi->shared_depth);
  }

  const fs::path root = cfg.output_dir;
  if (write_artifacts) {
    fs::create_directories(root);
    write_text(root / "resolved_config.json", to_json(cfg).dump(2) + "\n");
    if (psi && psi->profile) {
      std::ostringstream os;
      os << "layer,index,neurons,tv\n";
      for (std::size_t i = 0; i < psi->profile->layers.size(); ++i) {
        os << base.layers[psi->profile->layers[i]].name << ',' << psi->profile->layers[i] << ','
           << psi->profile->neurons[i] << ',' << format_double(psi->profile->tv[i]) << '\n';
      }
      write_text(root / "depth_profile.csv", os.str());
    }
  }

  const ProbeSet probe = make_probe_set(test, cfg.probe.batches_per_class, cfg.probe.batch_size,
                                        derive_seed(cfg.seed, 0x9b));
  for (Strategy strategy : cfg.strategies) {
    StrategyOutcome out;
    out.strategy = strategy;
    out.spec = strategy == Strategy::psinet ? psi->spec : base;
    FederationConfig fcfg = cfg.federation;
    fcfg.strategy = strategy;

    const fs::path dir = root / std::string(to_string(strategy));
    std::ofstream metrics;
    if (write_artifacts) {
      fs::create_directories(dir);
      metrics.open(dir / "metrics.csv", std::ios::trunc);
      metrics << kMetricsHeader << '\n';
      // a run that diverges in its first round still leaves a loadable model
      save_checkpoint(dir / "checkpoint.psnf", init_params(out.spec, fcfg.init_seed));
    }
    const RoundCallback on_round = [&](const RoundReport& report, const ModelParams& global) {
      if (!write_artifacts) return;
      write_metrics_rows(metrics, strategy, report);
      metrics.flush();
      save_checkpoint(dir / "checkpoint.psnf", global);
    };
    out.result = run_federation(fcfg, out.spec, train, prepared.partitions, test, nullptr, on_round);
    out.final_accuracy = out.result.reports.back().global_accuracy;
    out.final_loss = out.result.reports.back().global_loss;

    const auto layers = probe_layers(cfg, out.spec);
    std::vector<PreferenceVector> prefs;
    for (std::size_t li : layers) {
      auto p = class_preference(out.spec, out.result.global_params, probe, li);
      prefs.insert(prefs.end(), p.begin(), p.end());
    }
    if (strategy == Strategy::psinet) {
      out.alignment = group_alignment_score(out.spec, out.result.global_params, probe);
    } else if (out.result.final_local.size() > 1) {
      double total = 0.0;
      for (std::size_t li : layers) {
        std::vector<std::vector<PreferenceVector>> per_node;
        for (const auto& local : out.result.final_local) {
          per_node.push_back(class_preference(out.spec, local, probe, li));
        }
        total += top_class_agreement(per_node);
      }
      out.agreement = layers.empty() ? 0.0 : total / double(layers.size());
    }
    if (write_artifacts) {
      std::ostringstream os;
      write_featuremap_csv(os, out.spec, prefs);
      write_text(dir / "featuremap.csv", os.str());
    }
    result.outcomes.push_back(std::move(out));
  }

  if (write_artifacts) {
    std::ostringstream os;
    os << "strategy,rounds,final_loss,final_accuracy,alignment,agreement,bytes_up_total\n";
    for (const auto& o : result.outcomes) {
      std::size_t up = 0;
      for (const auto& r : o.result.reports) {
        for (const auto& n : r.nodes) up += n.bytes_up;
      }
      os << to_string(o.strategy) << ',' << o.result.reports.size() << ','
         << format_double(o.final_loss) << ',' << format_double(o.final_accuracy) << ','
         << (o.alignment ? format_double(*o.alignment) : "") << ','
         << (o.agreement ? format_double(*o.agreement) : "") << ',' << up << '\n';
    }
    write_text(root / "summary.csv", os.str());
  }
  return result;
}

void set_dotted(json& j, const std::string& dotted, const json& value) {
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("sweep parameter '" + dotted + "' has an empty component");
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key)) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    if (!cur->is_object()) throw ConfigError("sweep parameter '" + dotted + "' crosses a non-object");
    start = dot + 1;
  }
}

std::vector<json> parse_value_list(const std::string& text) {
  std::vector<json> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item.empty()) throw ConfigError("empty entry in value list '" + text + "'");
    json v = json::parse(item, nullptr, false);
    if (v.is_discarded() || v.is_object() || v.is_array()) v = item;
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<ExperimentResult> run_sweep(const json& base, const std::string& param,
                                        std::span<const json> values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const ExperimentConfig base_cfg = parse_config(base);
  const fs::path root = base_cfg.output_dir;
  std::vector<ExperimentResult> results;
  std::ostringstream os;
  os << "param,value,strategy,final_loss,final_accuracy,alignment,agreement\n";
  for (const json& v : values) {
    json j = base;
    set_dotted(j, param, v);
    const std::string label = param + "=" + value_label(v);
    j["output_dir"] = (root / label).string();
    j["name"] = base_cfg.name + "_" + label;
    ExperimentConfig cfg = parse_config(j);
    results.push_back(run_experiment(cfg, true));
    for (const auto& o : results.back().outcomes) {
      os << param << ',' << value_label(v) << ',' << to_string(o.strategy) << ','
         << format_double(o.final_loss) << ',' << format_double(o.final_accuracy) << ','
         << (o.alignment ? format_double(*o.alignment) : "") << ','
         << (o.agreement ? format_double(*o.agreement) : "") << '\n';
    }
  }
  fs::create_directories(root);
  write_text(root / "sweep_summary.csv", os.str());
  return results;
}

}  // namespace psinet
