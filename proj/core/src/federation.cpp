#include "psinet/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <numeric>
#include <random>
#include <thread>

#include "psinet/checkpoint.hpp"
#include "psinet/error.hpp"
#include "psinet/optim.hpp"

namespace psinet {

namespace {

void require_same_layout(std::span<const ModelParams> models, const char* what) {
  if (models.empty()) throw ConfigError(std::string(what) + ": no models to aggregate");
  const ModelParams& ref = models.front();
  for (std::size_t i = 1; i < models.size(); ++i) {
    const ModelParams& m = models[i];
    if (m.fingerprint() != ref.fingerprint()) {
      throw AlignmentError(std::string(what) + ": model " + std::to_string(i) +
                           " has a different architecture fingerprint");
    }
    if (m.size() != ref.size()) {
      throw AlignmentError(std::string(what) + ": model " + std::to_string(i) + " holds " +
                           std::to_string(m.size()) + " tensors, model 0 holds " +
                           std::to_string(ref.size()));
    }
    for (const auto& [name, t] : ref.tensors()) {
      if (!m.contains(name) || m.at(name).shape() != t.shape()) {
        throw AlignmentError(std::string(what) + ": model " + std::to_string(i) +
                             " lacks a tensor matching '" + name + "'");
      }
    }
  }
}

/// Weighted mean of aligned models; weights must be positive.
ModelParams average(std::span<const ModelParams* const> models, std::span<const double> weights) {
  const ModelParams& ref = *models.front();
  ModelParams out(ref.fingerprint());
  const std::size_t n = models.size();
  std::vector<std::pair<float, double>> column(n);
  for (const auto& [name, t] : ref.tensors()) {
    std::vector<const float*> src(n);
    for (std::size_t i = 0; i < n; ++i) src[i] = models[i]->at(name).raw();
    Tensor avg(t.shape());
    for (std::size_t e = 0; e < t.numel(); ++e) {
      for (std::size_t i = 0; i < n; ++i) column[i] = {src[i][e], weights[i]};
      std::sort(column.begin(), column.end());
      double num = 0.0, den = 0.0;
      for (const auto& [v, w] : column) {
        num += w * double(v);
        den += w;
      }
      avg[e] = static_cast<float>(num / den);
    }
    out.set(name, std::move(avg));
  }
  return out;
}

std::vector<std::size_t> all_groups(const ArchitectureSpec& spec) {
  std::vector<std::size_t> g(spec.regulation->mapping.group_count());
  std::iota(g.begin(), g.end(), 0);
  return g;
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::fedavg:
      return "fedavg";
    case Strategy::fedprox:
      return "fedprox";
    case Strategy::psinet:
      return "psinet";
  }
  return "unknown";
}

Strategy strategy_from_string(std::string_view text) {
  for (auto s : {Strategy::fedavg, Strategy::fedprox, Strategy::psinet}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown strategy '" + std::string(text) + "' (fedavg, fedprox, psinet)");
}

std::string_view to_string(EmptyGroupPolicy p) {
  return p == EmptyGroupPolicy::carry_forward ? "carry_forward" : "error";
}

EmptyGroupPolicy empty_group_policy_from_string(std::string_view text) {
  if (text == "carry_forward") return EmptyGroupPolicy::carry_forward;
  if (text == "error") return EmptyGroupPolicy::error;
  throw ConfigError("unknown empty-group policy '" + std::string(text) +
                    "' (carry_forward, error)");
}

void FederationConfig::validate() const {
  if (rounds < 1) throw ConfigError("federation.rounds must be >= 1");
  if (local_epochs < 1) throw ConfigError("federation.local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("federation.batch_size must be >= 1");
  if (!(lr > 0.0f)) throw ConfigError("federation.lr must be > 0");
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw ConfigError("federation.momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0f)) throw ConfigError("federation.weight_decay must be >= 0");
  if (!(mu >= 0.0f)) throw ConfigError("federation.mu must be >= 0");
  if (threads < 1) throw ConfigError("federation.threads must be >= 1");
}

BatchResult forward_backward(BoundModel& model, const Tensor& images, std::span<const int> labels,
                             const ModelParams* anchor, float mu) {
  ad::Tape tape;
  const ForwardResult r = forward(tape, model, ad::Variable(images), Mode::train);
  ad::Variable loss = ad::softmax_cross_entropy(tape, r.logits, labels);
  if (anchor) {
    ad::Variable prox;
    for (auto& [name, v] : model.variables()) {
      const ad::Variable d = ad::sub(tape, v, ad::Variable(anchor->at(name)));
      const ad::Variable s = ad::sum(tape, ad::mul(tape, d, d));
      prox = prox.defined() ? ad::add(tape, prox, s) : s;
    }
    if (prox.defined()) loss = ad::add(tape, loss, ad::scale(tape, prox, 0.5f * mu));
  }
  tape.backward(loss);

  BatchResult out;
  out.loss = loss.value().item();
  const Tensor& logits = r.logits.value();
  const std::size_t C = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.raw() + i * C;
    const auto best = static_cast<int>(std::max_element(row, row + C) - row);
    if (best == labels[i]) ++out.correct;
  }
  return out;
}

LocalResult local_train(const ArchitectureSpec& spec, const ModelParams& params,
                        const Dataset& data, const NodePartition& part,
                        const FederationConfig& cfg, std::size_t round) {
  cfg.validate();
  if (part.indices.empty()) {
    throw ConfigError("node " + std::to_string(part.node) + " has an empty partition");
  }
  BoundModel model(spec, params, true);
  Sgd sgd({cfg.lr, cfg.momentum, cfg.weight_decay});
  const bool prox = cfg.strategy == Strategy::fedprox;
  std::mt19937_64 rng(derive_seed(cfg.seed, part.node, round));
  std::vector<std::size_t> order = part.indices;
  std::vector<std::size_t> batch;
  std::vector<int> labels;

  LocalResult result;
  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.assign(order.begin() + start, order.begin() + end);
      labels.clear();
      for (std::size_t i : batch) labels.push_back(data.labels[i]);
      model.zero_grad();
      const BatchResult br =
          forward_backward(model, data.gather(batch), labels, prox ? &params : nullptr, cfg.mu);
      for (auto& [name, v] : model.variables()) {
        const Tensor g = v.grad();
        sgd.update(name, v.mutable_value().data(), g.data());
      }
      loss_sum += br.loss;
      correct += br.correct;
      seen += batch.size();
      ++result.steps;
    }
  }
  result.params = model.params();
  if (!result.params.all_finite()) {
    throw NumericError("node " + std::to_string(part.node) + " diverged in round " +
                       std::to_string(round));
  }
  result.loss = loss_sum / double(result.steps);
  result.accuracy = double(correct) / double(seen);
  result.samples = part.indices.size();
  return result;
}

ModelParams aggregate_fedavg(std::span<const ModelParams> models, std::span<const double> weights) {
  require_same_layout(models, "fedavg");
  std::vector<double> w(models.size(), 1.0);
  if (!weights.empty()) {
    if (weights.size() != models.size()) {
      throw ConfigError("fedavg: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(models.size()) + " models");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!(weights[i] > 0.0)) throw ConfigError("fedavg: weights must be positive");
      w[i] = weights[i];
    }
  }
  std::vector<const ModelParams*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return average(ptrs, w);
}

ModelParams GlobalModel::assemble() const {
  ModelParams out(fingerprint);
  out.merge(shared);
  for (const auto& [k, block] : groups) out.merge(block);
  return out;
}

GlobalModel GlobalModel::from_params(const ModelParams& params) {
  GlobalModel g;
  g.fingerprint = params.fingerprint();
  g.shared = params.subset(Partition{});
  for (std::size_t k : params.groups()) {
    g.groups.emplace(k, params.subset(Partition{k}));
    g.group_provenance.emplace(k, BlockProvenance{});
  }
  return g;
}

GlobalModel aggregate_psinet(std::span<const ModelParams> models, std::span<const TrimMask> masks,
                             const GroupMapping& mapping, const GlobalModel* previous,
                             EmptyGroupPolicy policy, std::ptrdiff_t round) {
  if (models.empty()) throw ConfigError("psinet: no models to aggregate");
  if (masks.size() != models.size()) {
    throw ConfigError("psinet: " + std::to_string(masks.size()) + " trim masks for " +
                      std::to_string(models.size()) + " models");
  }
  const std::size_t G = mapping.group_count();
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (masks[i].size() != G) throw ConfigError("psinet: trim mask size differs from group count");
    if (models[i].fingerprint() != models.front().fingerprint()) {
      throw AlignmentError("psinet: model " + std::to_string(i) +
                           " has a different architecture fingerprint");
    }
    for (std::size_t k = 0; k < G; ++k) {
      const bool holds = !models[i].subset(Partition{k}).tensors().empty();
      if (holds == masks[i].trimmed[k]) {
        throw AlignmentError("psinet: model " + std::to_string(i) + (holds ? " holds" : " lacks") +
                             " group " + std::to_string(k) + " contrary to its trim mask");
      }
    }
  }

  GlobalModel g;
  g.fingerprint = models.front().fingerprint();
  std::vector<ModelParams> shared;
  for (const auto& m : models) shared.push_back(m.subset(Partition{}));
  std::vector<std::size_t> everyone(models.size());
  std::iota(everyone.begin(), everyone.end(), 0);
  if (!shared.front().tensors().empty()) {
    require_same_layout(shared, "psinet shared block");
    std::vector<const ModelParams*> ptrs;
    for (const auto& m : shared) ptrs.push_back(&m);
    g.shared = average(ptrs, std::vector<double>(ptrs.size(), 1.0));
  } else {
    g.shared = ModelParams(g.fingerprint);
  }
  g.shared_provenance = {round, everyone};

  for (std::size_t k = 0; k < G; ++k) {
    std::vector<std::size_t> holders;
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (!masks[i].trimmed[k]) holders.push_back(i);
    }
    if (holders.empty()) {
      if (policy == EmptyGroupPolicy::error) {
        throw StateError("psinet: no node keeps structure group " + std::to_string(k));
      }
      if (!previous || !previous->groups.contains(k)) {
        throw StateError("psinet: no node keeps structure group " + std::to_string(k) +
                         " and there is no previous block to carry forward");
      }
      g.groups.emplace(k, previous->groups.at(k));
      g.group_provenance.emplace(k, previous->group_provenance.at(k));
      continue;
    }
    std::vector<ModelParams> blocks;
    for (std::size_t i : holders) blocks.push_back(models[i].subset(Partition{k}));
    require_same_layout(blocks, "psinet group block");
    std::vector<const ModelParams*> ptrs;
    for (const auto& b : blocks) ptrs.push_back(&b);
    g.groups.emplace(k, average(ptrs, std::vector<double>(ptrs.size(), 1.0)));
    g.group_provenance.emplace(k, BlockProvenance{round, holders});
  }
  return g;
}

Payload distribute(const GlobalModel& global, const ArchitectureSpec& node_spec) {
  Payload p;
  p.params = ModelParams(global.fingerprint);
  p.params.merge(global.shared);
  if (node_spec.regulation) {
    for (std::size_t k : node_spec.regulation->kept_groups) {
      auto it = global.groups.find(k);
      if (it == global.groups.end()) {
        throw StateError("node requests structure group " + std::to_string(k) +
                         " but the global model has no block for it");
      }
      p.params.merge(it->second);
    }
  }
  check_params(node_spec, p.params);
  p.bytes = serialized_size(p.params);
  return p;
}

FederationResult run_federation(const FederationConfig& cfg, const ArchitectureSpec& spec,
                                const Dataset& train, std::span<const NodePartition> partitions,
                                const Dataset& test, const ModelParams* initial,
                                const RoundCallback& on_round) {
  cfg.validate();
  const bool psinet = cfg.strategy == Strategy::psinet;
  if (psinet && !spec.regulated()) {
    throw ConfigError("the psinet strategy needs a regulated (built) architecture");
  }
  if (partitions.empty()) throw ConfigError("federation needs at least one node");
  const std::size_t N = partitions.size();

  FederationResult res;
  std::vector<TrimMask> masks(N);
  for (std::size_t i = 0; i < N; ++i) {
    if (psinet) {
      const GroupMapping& m = spec.regulation->mapping;
      masks[i] = cfg.trimming ? compute_trim_mask(m, partitions[i].classes)
                              : TrimMask{std::vector<bool>(m.group_count(), false)};
      res.node_specs.push_back(trim_spec(spec, masks[i]));
    } else {
      res.node_specs.push_back(spec);
    }
  }

  ModelParams global_params = initial ? adapt_params(spec, *initial) : init_params(spec, cfg.init_seed);
  check_params(spec, global_params);
  GlobalModel global = GlobalModel::from_params(global_params);
  res.final_local.resize(N);

  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundReport report;
    report.round = r;
    report.nodes.resize(N);

    std::vector<Payload> payloads(N);
    for (std::size_t i = 0; i < N; ++i) {
      if (psinet) {
        payloads[i] = distribute(global, res.node_specs[i]);
      } else {
        payloads[i] = {global_params, serialized_size(global_params)};
      }
    }

    std::vector<LocalResult> locals(N);
    std::vector<std::exception_ptr> errors(N);
    auto train_node = [&](std::size_t i) {
      try {
        locals[i] = local_train(res.node_specs[i], payloads[i].params, train, partitions[i], cfg, r);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    if (cfg.threads <= 1 || N == 1) {
      for (std::size_t i = 0; i < N; ++i) train_node(i);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < std::min(cfg.threads, N); ++t) {
        pool.emplace_back([&] {
          for (std::size_t i; (i = next.fetch_add(1)) < N;) train_node(i);
        });
      }
      for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    std::vector<ModelParams> local_params(N);
    for (std::size_t i = 0; i < N; ++i) {
      local_params[i] = locals[i].params;
      NodeReport& nr = report.nodes[i];
      nr.node = partitions[i].node;
      nr.loss = locals[i].loss;
      nr.accuracy = locals[i].accuracy;
      nr.samples = locals[i].samples;
      nr.bytes_down = payloads[i].bytes;
      nr.bytes_up = serialized_size(local_params[i]);
      nr.parameter_count = local_params[i].parameter_count();
      if (psinet) nr.kept_groups = res.node_specs[i].regulation->kept_groups;
    }

    if (psinet) {
      global = aggregate_psinet(local_params, masks, spec.regulation->mapping, &global,
                                cfg.empty_group, static_cast<std::ptrdiff_t>(r));
      global_params = global.assemble();
      for (std::size_t k : all_groups(spec)) {
        const BlockProvenance& p = global.group_provenance.at(k);
        report.group_nodes[k] =
            p.round == static_cast<std::ptrdiff_t>(r) ? p.nodes : std::vector<std::size_t>{};
      }
    } else {
      std::vector<double> weights;
      if (cfg.weighted) {
        for (const auto& l : locals) weights.push_back(double(l.samples));
      }
      global_params = aggregate_fedavg(local_params, weights);
      global = GlobalModel::from_params(global_params);
    }

    const EvalResult ev = evaluate(spec, global_params, test.images, test.labels);
    report.global_loss = ev.loss;
    report.global_accuracy = ev.accuracy;
    report.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.final_local = std::move(local_params);
    if (on_round) on_round(report, global_params);
    res.reports.push_back(std::move(report));
  }
  res.global = std::move(global);
  res.global_params = std::move(global_params);
  return res;
}

}  // namespace psinet
