#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "oracle.hpp"
#include "psinet/builder.hpp"
#include "psinet/dataset.hpp"
#include "psinet/error.hpp"
#include "psinet/interpretation.hpp"
#include "psinet/network.hpp"

using namespace psinet;
using fixtures::per_sample_preference;
using fixtures::randomize_norm_state;

namespace {

Dataset small_data(std::size_t classes, std::size_t per_class, std::uint64_t seed = 1) {
  SynthOptions so;
  so.classes = classes;
  so.per_class = per_class;
  so.height = so.width = 8;
  so.seed = seed;
  return synthesize_dataset(so);
}

PreferenceVector pv(std::vector<double> p) { return {0, 0, std::move(p)}; }

}  // namespace

TEST(Preference, ConstructedPathFeedsOnlyItsLogit) {
  ArchitectureSpec spec;
  spec.name = "hand";
  spec.input_shape = {1, 2, 2};
  spec.num_classes = 2;
  spec.layers = {LayerDescriptor::conv("c1_1", 1, 2, 1, 1, 0), LayerDescriptor::relu("r1_1"),
                 LayerDescriptor::flatten("flatten"), LayerDescriptor::linear("logits", 8, 2)};
  ModelParams p = init_params(spec, 1);
  p.at("shared/c1_1.weight") = Tensor({2, 1, 1, 1}, std::vector<float>{1.0f, 1.0f});
  p.at("shared/c1_1.bias") = Tensor({2}, 0.0f);
  Tensor w({2, 8}, 0.0f);
  for (std::size_t k = 0; k < 4; ++k) {
    w[k] = 0.5f;          // logit 0 <- channel 0
    w[8 + 4 + k] = 0.7f;  // logit 1 <- channel 1
  }
  p.at("shared/logits.weight") = w;
  Dataset ds;
  ds.num_classes = 2;
  ds.images = Tensor({4, 1, 2, 2}, 1.0f);
  ds.labels = {0, 1, 0, 1};
  const ProbeSet probe = make_probe_set(ds, 1, 2, 3);
  const auto prefs = class_preference(spec, p, probe, 0);
  ASSERT_EQ(prefs.size(), 2u);
  EXPECT_GT(prefs[0].p[0], 0.0);
  EXPECT_EQ(prefs[0].p[1], 0.0);
  EXPECT_EQ(prefs[1].p[0], 0.0);
  EXPECT_GT(prefs[1].p[1], 0.0);
}

TEST(Preference, BatchedMatchesPerSampleOracle) {
  const Dataset ds = small_data(4, 12);
  const auto spec = desk_cnn(ds.sample_shape(), 4, 4);
  ModelParams p = init_params(spec, 2);
  randomize_norm_state(p, 3);
  const ProbeSet probe = make_probe_set(ds, 2, 5, 4);
  for (std::size_t layer : conv_layer_indices(spec)) {
    const auto prefs = class_preference(spec, p, probe, layer);
    const auto ref = per_sample_preference(spec, p, probe, layer);
    for (const auto& pref : prefs)
      for (std::size_t c = 0; c < 4; ++c)
        EXPECT_NEAR(pref.p[c], ref[c][pref.channel], 1e-5) << spec.layers[layer].name;
  }
}

TEST(Preference, PsinetGroupsHaveZeroForeignPreference) {
  const Dataset ds = small_data(4, 8);
  const auto base = desk_cnn(ds.sample_shape(), 4, 4);
  GroupMapping m = default_mapping(4, 2);
  m.shared_depth = std::ptrdiff_t(block_end(base, base.layer_index("c1_1")));
  const auto spec = build_psinet(base, m);
  ModelParams p = init_params(spec, 5);
  randomize_norm_state(p, 6);
  const ProbeSet probe = make_probe_set(ds, 1, 4, 7);
  for (std::size_t layer : conv_layer_indices(spec)) {
    if (!spec.in_grouped_region(layer)) continue;
    const auto prefs = class_preference(spec, p, probe, layer);
    const std::size_t per_group = prefs.size() / 2;
    for (const auto& pref : prefs) {
      const auto& own = m.groups[pref.channel / per_group];
      for (std::size_t c = 0; c < 4; ++c)
        if (std::find(own.begin(), own.end(), c) == own.end()) EXPECT_EQ(pref.p[c], 0.0);
    }
  }
  EXPECT_EQ(group_alignment_score(spec, p, probe), 1.0);
}

TEST(Preference, UntrainedTopClassesRoughlyUniform) {
  const Dataset ds = small_data(10, 6);
  const auto spec = desk_cnn(ds.sample_shape(), 10, 20);
  ModelParams p = init_params(spec, 8);
  randomize_norm_state(p, 9);
  const ProbeSet probe = make_probe_set(ds, 1, 6, 10);
  std::vector<PreferenceVector> all;
  for (std::size_t layer : conv_layer_indices(spec)) {
    auto prefs = class_preference(spec, p, probe, layer);
    all.insert(all.end(), prefs.begin(), prefs.end());
  }
  const auto hist = top_class_histogram(all, 10);
  double total = 0;
  for (auto h : hist) total += double(h);
  ASSERT_GT(total, 100.0);
  double chi2 = 0;
  for (auto h : hist) chi2 += std::pow(double(h) - total / 10, 2) / (total / 10);
  EXPECT_LT(chi2, 27.88);  // 99.9% quantile, 9 degrees of freedom
}

TEST(TopResponse, Examples) {
  EXPECT_EQ(top_response_class(pv({0.1, 0.9})), 1u);
  EXPECT_EQ(top_response_class(pv({0.5, 0.5})), 0u);
  EXPECT_EQ(top_response_class(pv({0.0, 0.0})), kNoPreference);
  EXPECT_EQ(top_response_class(pv({-1.0, -0.5})), kNoPreference);
}

TEST(TotalVariance, SharedVectorGivesZero) {
  std::vector<PreferenceVector> v(5, pv({0.2, 0.3, 0.5}));
  EXPECT_EQ(total_variance(v), 0.0);
}

TEST(TotalVariance, TwoOrthogonalChannels) {
  const std::vector<PreferenceVector> v{pv({1, 0}), pv({0, 1})};
  EXPECT_NEAR(total_variance(v), std::sqrt(2.0) / 2.0, 1e-15);
}

TEST(TotalVariance, RecomputationOracleExact) {
  const Dataset ds = small_data(5, 8);
  const auto spec = desk_cnn(ds.sample_shape(), 5, 6);
  ModelParams p = init_params(spec, 11);
  randomize_norm_state(p, 12);
  const ProbeSet probe = make_probe_set(ds, 1, 4, 13);
  const DivergenceProfile prof = total_variance_profile(spec, p, probe);
  ASSERT_EQ(prof.layers, conv_layer_indices(spec));
  for (std::size_t i = 0; i < prof.layers.size(); ++i) {
    const auto prefs = class_preference(spec, p, probe, prof.layers[i]);
    EXPECT_EQ(prof.tv[i], total_variance(prefs));
    EXPECT_EQ(prof.neurons[i], prefs.size());
  }
}

TEST(TotalVariance, BruteForceMatches) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(-0.2, 1.0);
  std::vector<PreferenceVector> v;
  for (std::size_t j = 0; j < 30; ++j) {
    std::vector<double> p(6);
    for (auto& x : p) x = u(rng);
    v.push_back(pv(p));
  }
  std::vector<std::vector<double>> rows;
  for (const auto& x : v) {
    if (!x.has_preference()) continue;
    std::vector<double> r = x.p;
    double s = 0;
    for (auto& e : r) s += (e = std::max(e, 0.0));
    for (auto& e : r) e /= s;
    rows.push_back(r);
  }
  std::vector<double> mean(6, 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < 6; ++c) mean[c] += r[c] / double(rows.size());
  double tv = 0;
  for (const auto& r : rows) {
    double d = 0;
    for (std::size_t c = 0; c < 6; ++c) d += (r[c] - mean[c]) * (r[c] - mean[c]);
    tv += std::sqrt(d);
  }
  tv /= double(rows.size());
  EXPECT_NEAR(total_variance(v), tv, 1e-12);
}

TEST(TotalVariance, ChannelPermutationInvariantBitwise) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<PreferenceVector> v;
  for (std::size_t j = 0; j < 64; ++j) {
    std::vector<double> p(10);
    for (auto& x : p) x = u(rng);
    v.push_back({3, j, p});
  }
  const double tv = total_variance(v);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(v.begin(), v.end(), rng);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(total_variance(v)), std::bit_cast<std::uint64_t>(tv));
  }
}

TEST(SharedDepth, MonotoneProfile) {
  DivergenceProfile prof{{0, 4, 8, 12}, {0.1, 0.2, 0.8, 0.9}, {8, 8, 8, 8}};
  EXPECT_EQ(select_shared_depth(prof, 0.5), 1u);
  EXPECT_EQ(select_shared_depth(prof, 1.0), 2u);
}

TEST(SharedDepth, FirstLayerAboveThresholdClampsToZero) {
  DivergenceProfile prof{{0, 4}, {0.9, 0.1}, {8, 8}};
  EXPECT_EQ(select_shared_depth(prof, 0.5), 0u);
  DivergenceProfile flat{{0, 4}, {0.0, 0.0}, {8, 8}};
  EXPECT_THROW(select_shared_depth(flat, 0.5), ConfigError);
}

TEST(Alignment, RandomPreferencesNearChance) {
  const GroupMapping m = default_mapping(10, 10);
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<PreferenceVector>> layers(1);
  for (std::size_t j = 0; j < 5000; ++j) {
    std::vector<double> p(10);
    for (auto& x : p) x = u(rng);
    layers[0].push_back({0, j, p});
  }
  EXPECT_NEAR(group_alignment_score(m, layers), 0.1, 0.02);
  EXPECT_EQ(group_alignment_score(default_mapping(10, 1), layers), 1.0);
}

TEST(Agreement, IdenticalAndDisjointNodes) {
  std::vector<std::vector<PreferenceVector>> same(3, {pv({1, 0}), pv({0, 1})});
  EXPECT_EQ(top_class_agreement(same), 1.0);
  std::vector<std::vector<PreferenceVector>> split{{pv({1, 0})}, {pv({0, 1})}};
  EXPECT_EQ(top_class_agreement(split), 0.0);
  std::vector<std::vector<PreferenceVector>> none{{pv({0, 0})}, {pv({0, 0})}};
  EXPECT_EQ(top_class_agreement(none), 0.0);
}

TEST(FeatureMap, CsvRows) {
  const Dataset ds = small_data(4, 8);
  const auto base = desk_cnn(ds.sample_shape(), 4, 4);
  GroupMapping m = default_mapping(4, 2);
  m.shared_depth = std::ptrdiff_t(block_end(base, base.layer_index("c1_1")));
  const auto spec = build_psinet(base, m);
  ModelParams p = init_params(spec, 17);
  randomize_norm_state(p, 18);
  const ProbeSet probe = make_probe_set(ds, 1, 4, 19);
  const std::size_t layer = spec.layer_index("c3_1");
  const auto prefs = class_preference(spec, p, probe, layer);
  std::ostringstream os;
  write_featuremap_csv(os, spec, prefs);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "layer,channel,group,top_class,p_0,p_1,p_2,p_3");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(line.rfind("c3_1,", 0), 0u) << line;
  }
  EXPECT_EQ(rows, prefs.size());
}

TEST(Probe, MissingClassRejected) {
  Dataset ds = small_data(3, 4);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] != 2) keep.push_back(i);
  EXPECT_THROW(make_probe_set(ds.subset(keep), 1, 2, 1), ConfigError);
}
