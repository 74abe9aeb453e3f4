#include <gtest/gtest.h>

#include "oracle.hpp"
#include "psinet/builder.hpp"
#include "psinet/checkpoint.hpp"
#include "psinet/error.hpp"
#include "psinet/federation.hpp"
#include "psinet/optim.hpp"

using namespace psinet;

namespace {

struct Fixture {
  Dataset data;
  ArchitectureSpec base;
  ArchitectureSpec psi;
  GroupMapping mapping;

  explicit Fixture(std::size_t groups = 4) {
    SynthOptions so;
    so.classes = 4;
    so.per_class = 16;
    so.height = so.width = 8;
    data = synthesize_dataset(so);
    base = desk_cnn(data.sample_shape(), 4, 4);
    mapping = default_mapping(4, groups);
    mapping.shared_depth = std::ptrdiff_t(block_end(base, base.layer_index("c1_1")));
    psi = build_psinet(base, mapping);
  }
};

NodePartition all_of(const Dataset& ds, std::size_t node = 0) {
  NodePartition p;
  p.node = node;
  for (std::size_t i = 0; i < ds.size(); ++i) p.indices.push_back(i);
  for (int l : ds.labels) p.classes.insert(std::size_t(l));
  return p;
}

ModelParams random_like(const ModelParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams out = p;
  for (auto& [name, t] : out.tensors()) t = oracle::random_tensor(t.shape(), rng);
  return out;
}

}  // namespace

TEST(LocalTrain, ZeroEpochsRejected) {
  FederationConfig cfg;
  cfg.local_epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(LocalTrain, OneBatchOneEpochIsOneSgdStep) {
  Fixture f;
  FederationConfig cfg;
  cfg.batch_size = 64;
  cfg.momentum = 0.0f;
  const ModelParams p = init_params(f.base, 1);
  const LocalResult r = local_train(f.base, p, f.data, all_of(f.data), cfg, 0);
  EXPECT_EQ(r.steps, 1u);

  BoundModel m(f.base, p);
  std::vector<int> labels(f.data.labels.begin(), f.data.labels.end());
  forward_backward(m, f.data.images, labels);
  ModelParams stepped = m.params();
  Sgd({cfg.lr, 0.0f, cfg.weight_decay}).step(stepped, m.grads());
  EXPECT_LT(max_abs_diff(r.params, stepped), 1e-5);
}

TEST(FedProx, ZeroMuIsStepIdenticalToFedAvg) {
  Fixture f;
  FederationConfig a;
  a.local_epochs = 2;
  a.batch_size = 16;
  FederationConfig b = a;
  b.strategy = Strategy::fedprox;
  b.mu = 0.0f;
  const ModelParams p = init_params(f.base, 2);
  const LocalResult ra = local_train(f.base, p, f.data, all_of(f.data), a, 3);
  const LocalResult rb = local_train(f.base, p, f.data, all_of(f.data), b, 3);
  EXPECT_TRUE(bitwise_equal(ra.params, rb.params));
  EXPECT_EQ(ra.loss, rb.loss);
}

TEST(FedProx, ProximalGradientMatchesAnalyticForm) {
  Fixture f;
  const ModelParams p = init_params(f.base, 3);
  const ModelParams anchor = random_like(p, 4);
  const float mu = 0.37f;
  std::vector<int> labels(f.data.labels.begin(), f.data.labels.end());
  BoundModel plain(f.base, p), prox(f.base, p);
  forward_backward(plain, f.data.images, labels);
  forward_backward(prox, f.data.images, labels, &anchor, mu);
  const ModelParams g0 = plain.grads(), g1 = prox.grads();
  for (const auto& [name, g] : g1.tensors()) {
    const Tensor& w = p.at(name);
    const Tensor& a = anchor.at(name);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double expected = double(g0.at(name)[i]) + double(mu) * (double(w[i]) - double(a[i]));
      EXPECT_NEAR(g[i], expected, 1e-6) << name;
    }
  }
}

TEST(FedAvg, IdenticalModelsAverageToThemselves) {
  Fixture f;
  const ModelParams p = init_params(f.base, 5);
  const std::vector<ModelParams> models(7, p);
  EXPECT_LE(max_abs_diff(aggregate_fedavg(models), p), 1e-12);
  const std::vector<double> w{1, 2, 3, 4, 5, 6, 7};
  EXPECT_LE(max_abs_diff(aggregate_fedavg(models, w), p), 1e-12);
}

TEST(FedAvg, Midpoint) {
  ModelParams a(1), b(1);
  a.set("shared/x.weight", Tensor({2}, 0.0f));
  b.set("shared/x.weight", Tensor({2}, 2.0f));
  const std::vector<ModelParams> models{a, b};
  EXPECT_EQ(aggregate_fedavg(models).at("shared/x.weight"), Tensor({2}, 1.0f));
}

TEST(FedAvg, WeightedMatchesBruteForce) {
  Fixture f;
  const ModelParams p = init_params(f.base, 6);
  std::vector<ModelParams> models;
  for (std::uint64_t i = 0; i < 5; ++i) models.push_back(random_like(p, 10 + i));
  const std::vector<double> w{3, 1, 4, 1, 5};
  const ModelParams avg = aggregate_fedavg(models, w);
  for (const auto& [name, t] : avg.tensors())
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += w[k] * double(models[k].at(name)[i]);
      EXPECT_NEAR(t[i], s / 14.0, 1e-6);
    }
}

TEST(FedAvg, NodeOrderInvariantBitwise) {
  Fixture f;
  const ModelParams p = init_params(f.base, 7);
  std::vector<ModelParams> models;
  for (std::uint64_t i = 0; i < 6; ++i) models.push_back(random_like(p, 20 + i));
  std::vector<double> w{1, 2, 3, 4, 5, 6};
  const ModelParams ref = aggregate_fedavg(models, w);
  std::mt19937_64 rng(8);
  std::vector<std::size_t> order{0, 1, 2, 3, 4, 5};
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<ModelParams> m2;
    std::vector<double> w2;
    for (std::size_t i : order) {
      m2.push_back(models[i]);
      w2.push_back(w[i]);
    }
    EXPECT_TRUE(bitwise_equal(aggregate_fedavg(m2, w2), ref));
  }
}

TEST(FedAvg, MismatchedModelsRejected) {
  Fixture f;
  const std::vector<ModelParams> models{init_params(f.base, 1), init_params(f.psi, 1)};
  EXPECT_THROW(aggregate_fedavg(models), AlignmentError);
}

TEST(PsinetAggregate, SingleGroupEqualsFedAvg) {
  Fixture f(1);
  const ModelParams p = init_params(f.psi, 9);
  std::vector<ModelParams> models;
  std::vector<TrimMask> masks;
  for (std::uint64_t i = 0; i < 4; ++i) {
    models.push_back(random_like(p, 30 + i));
    masks.push_back(compute_trim_mask(f.mapping, {0, 1, 2, 3}));
  }
  const GlobalModel g = aggregate_psinet(models, masks, f.mapping);
  EXPECT_LE(max_abs_diff(g.assemble(), aggregate_fedavg(models)), 1e-12);
}

TEST(PsinetAggregate, MatchedGroupsAndProvenance) {
  Fixture f;
  const ModelParams p = init_params(f.psi, 10);
  const std::vector<std::set<std::size_t>> local{{0, 2}, {0, 1}, {2, 3}};
  std::vector<ModelParams> models;
  std::vector<TrimMask> masks;
  for (std::size_t i = 0; i < 3; ++i) {
    const TrimResult r = trim_model(f.psi, random_like(p, 40 + i), local[i]);
    models.push_back(r.params);
    masks.push_back(r.mask);
  }
  const GlobalModel g = aggregate_psinet(models, masks, f.mapping, nullptr,
                                         EmptyGroupPolicy::carry_forward, 5);
  EXPECT_EQ(g.group_provenance.at(2).nodes, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(g.group_provenance.at(2).round, 5);
  EXPECT_EQ(g.group_provenance.at(1).nodes, (std::vector<std::size_t>{1}));
  EXPECT_EQ(g.shared_provenance.nodes, (std::vector<std::size_t>{0, 1, 2}));
  for (std::size_t c = 0; c < 4; ++c) {
    const auto& nodes = g.group_provenance.at(c).nodes;
    for (const auto& [name, t] : g.groups.at(c).tensors())
      for (std::size_t i = 0; i < t.numel(); ++i) {
        double s = 0;
        for (std::size_t k : nodes) s += models[k].at(name)[i];
        EXPECT_NEAR(t[i], s / double(nodes.size()), 1e-6) << name;
      }
  }
  // A node without group 2 has no influence on it.
  std::vector<ModelParams> changed = models;
  changed[1] = random_like(models[1], 99);
  const GlobalModel g2 = aggregate_psinet(changed, masks, f.mapping);
  EXPECT_TRUE(bitwise_equal(g2.groups.at(2), g.groups.at(2)));
  EXPECT_FALSE(bitwise_equal(g2.shared, g.shared));
}

TEST(PsinetAggregate, EmptyGroupPolicies) {
  Fixture f;
  const ModelParams p = init_params(f.psi, 11);
  const GlobalModel prev = GlobalModel::from_params(p);
  const TrimResult r = trim_model(f.psi, random_like(p, 50), {0});
  const std::vector<ModelParams> models{r.params};
  const std::vector<TrimMask> masks{r.mask};
  const GlobalModel g = aggregate_psinet(models, masks, f.mapping, &prev,
                                         EmptyGroupPolicy::carry_forward, 3);
  EXPECT_TRUE(bitwise_equal(g.groups.at(3), prev.groups.at(3)));
  EXPECT_EQ(g.group_provenance.at(3), prev.group_provenance.at(3));
  EXPECT_THROW(aggregate_psinet(models, masks, f.mapping, &prev, EmptyGroupPolicy::error, 3),
               StateError);
  EXPECT_THROW(aggregate_psinet(models, masks, f.mapping), StateError);
}

TEST(Distribute, FullAndTrimmedPayloads) {
  Fixture f;
  const GlobalModel g = GlobalModel::from_params(init_params(f.psi, 12));
  const Payload full = distribute(g, f.psi);
  EXPECT_NO_THROW(check_params(f.psi, full.params));
  const TrimMask mask = compute_trim_mask(f.mapping, {0, 1});
  const ArchitectureSpec node = trim_spec(f.psi, mask);
  const Payload part = distribute(g, node);
  EXPECT_EQ(part.params.groups(), (std::vector<std::size_t>{0, 1}));
  EXPECT_NO_THROW(check_params(node, part.params));
  EXPECT_LT(part.bytes, full.bytes);
}

TEST(Distribute, SingleNodeRoundTrip) {
  Fixture f;
  const ModelParams p = random_like(init_params(f.psi, 13), 14);
  const std::vector<ModelParams> models{p};
  const std::vector<TrimMask> masks{compute_trim_mask(f.mapping, {0, 1, 2, 3})};
  const Payload back = distribute(aggregate_psinet(models, masks, f.mapping), f.psi);
  EXPECT_LE(max_abs_diff(back.params, p), 1e-12);
}

TEST(RunFederation, SingleNodeEqualsCentralTraining) {
  Fixture f;
  FederationConfig cfg;
  cfg.local_epochs = 3;
  cfg.batch_size = 16;
  cfg.init_seed = 4;
  const std::vector<NodePartition> parts{all_of(f.data)};
  const FederationResult r = run_federation(cfg, f.base, f.data, parts, f.data);
  const LocalResult central = local_train(f.base, init_params(f.base, 4), f.data, parts[0], cfg, 0);
  EXPECT_TRUE(bitwise_equal(r.global_params, central.params));
}

TEST(RunFederation, ThreadsDoNotChangeResults) {
  Fixture f;
  FederationConfig cfg;
  cfg.rounds = 2;
  cfg.batch_size = 16;
  cfg.strategy = Strategy::psinet;
  PartitionSpec ps;
  ps.scheme = PartitionScheme::classes_per_node;
  ps.nodes = 4;
  ps.classes_per_node = 2;
  const auto parts = partition(f.data, ps);
  const FederationResult a = run_federation(cfg, f.psi, f.data, parts, f.data);
  cfg.threads = 3;
  const FederationResult b = run_federation(cfg, f.psi, f.data, parts, f.data);
  EXPECT_TRUE(bitwise_equal(a.global_params, b.global_params));
  for (std::size_t r = 0; r < 2; ++r) EXPECT_EQ(a.reports[r].global_loss, b.reports[r].global_loss);
}

TEST(RunFederation, CallbackSeesEveryRound) {
  Fixture f;
  FederationConfig cfg;
  cfg.rounds = 3;
  cfg.batch_size = 32;
  PartitionSpec ps;
  ps.nodes = 2;
  const auto parts = partition(f.data, ps);
  std::vector<std::size_t> rounds;
  run_federation(cfg, f.base, f.data, parts, f.data, nullptr,
                 [&](const RoundReport& r, const ModelParams& g) {
                   rounds.push_back(r.round);
                   EXPECT_NO_THROW(check_params(f.base, g));
                   EXPECT_EQ(r.nodes.size(), 2u);
                 });
  EXPECT_EQ(rounds, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(RunFederation, PsinetNeedsRegulatedSpec) {
  Fixture f;
  FederationConfig cfg;
  cfg.strategy = Strategy::psinet;
  const std::vector<NodePartition> parts{all_of(f.data)};
  EXPECT_THROW(run_federation(cfg, f.base, f.data, parts, f.data), ConfigError);
}
