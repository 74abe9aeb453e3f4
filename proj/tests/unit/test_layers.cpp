#include <gtest/gtest.h>

#include "oracle.hpp"
#include "psinet/autodiff.hpp"
#include "psinet/builder.hpp"
#include "psinet/error.hpp"
#include "psinet/layers.hpp"
#include "psinet/network.hpp"
#include "psinet/permutation.hpp"

using namespace psinet;

namespace {

LayerParams conv_params(std::size_t cout, std::size_t cin_per_group, std::size_t k,
                        std::mt19937_64& rng) {
  return {{"weight", oracle::random_tensor({cout, cin_per_group, k, k}, rng)},
          {"bias", oracle::random_tensor({cout}, rng)}};
}

Tensor channel_slice(const Tensor& x, std::size_t from, std::size_t count) {
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  Tensor out({n, count, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < count; ++ch)
      for (std::size_t k = 0; k < inner; ++k)
        out[(i * count + ch) * inner + k] = x[(i * c + from + ch) * inner + k];
  return out;
}

Tensor rows(const Tensor& t, std::size_t from, std::size_t count) {
  Shape s = t.shape();
  const std::size_t inner = t.numel() / s[0];
  s[0] = count;
  return Tensor(s, std::vector<float>(t.data().begin() + from * inner,
                                      t.data().begin() + (from + count) * inner));
}

}  // namespace

TEST(GroupedConv, SingleGroupEqualsConv) {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng);
  const LayerParams p = conv_params(4, 3, 3, rng);
  ad::Tape t;
  const Tensor ref = ad::conv2d(t, ad::Variable(x), ad::Variable(p.at("weight")),
                                ad::Variable(p.at("bias")), {1, 1, 1}).value();
  EXPECT_TRUE(bitwise_equal(grouped_conv_forward(x, p, 1, 1, 1), ref));
}

TEST(GroupedConv, SplitConvOracleBitwise) {
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({2, 4, 5, 5}, rng);
  const LayerParams p = conv_params(6, 2, 3, rng);
  const Tensor y = grouped_conv_forward(x, p, 2, 1, 1);
  ad::Tape t;
  for (std::size_t g = 0; g < 2; ++g) {
    const Tensor part = ad::conv2d(t, ad::Variable(channel_slice(x, 2 * g, 2)),
                                   ad::Variable(rows(p.at("weight"), 3 * g, 3)),
                                   ad::Variable(rows(p.at("bias"), 3 * g, 3)), {1, 1, 1})
                            .value();
    EXPECT_TRUE(bitwise_equal(channel_slice(y, 3 * g, 3), part)) << "group " << g;
  }
}

TEST(GroupedConv, ZeroedBlockGivesBiasOnlyResponse) {
  std::mt19937_64 rng(3);
  Tensor x = oracle::random_tensor({1, 4, 4, 4}, rng);
  for (std::size_t i = 0; i < 32; ++i) x[i] = 0.0f;
  const LayerParams p = conv_params(4, 2, 3, rng);
  const Tensor y = grouped_conv_forward(x, p, 2, 1, 1);
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(y[ch * 16 + k], p.at("bias")[ch]);
  // Block 1 of the input does not reach block 0 of the output.
  Tensor x2 = x;
  for (std::size_t i = 32; i < 64; ++i) x2[i] += 1.0f;
  const Tensor y2 = grouped_conv_forward(x2, p, 2, 1, 1);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(y[i], y2[i]);
}

TEST(GroupedConv, IndivisibleChannelsRejected) {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({1, 3, 4, 4}, rng);
  EXPECT_THROW(grouped_conv_forward(x, conv_params(4, 1, 3, rng), 2), ConfigError);
}

TEST(GroupedLinear, LogitReadsOnlyItsBlock) {
  std::mt19937_64 rng(5);
  const GroupMapping m = default_mapping(10, 10);
  std::vector<LayerParams> groups;
  for (std::size_t k = 0; k < 10; ++k) {
    groups.push_back({{"weight", oracle::random_tensor({1, 3}, rng)},
                      {"bias", oracle::random_tensor({1}, rng)}});
  }
  const Tensor x = oracle::random_tensor({2, 30}, rng);
  const Tensor y = grouped_linear_forward(x, groups, m);
  ASSERT_EQ(y.shape(), (Shape{2, 10}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 10; ++c) {
      double s = groups[c].at("bias")[0];
      for (std::size_t k = 0; k < 3; ++k) s += double(groups[c].at("weight")[k]) * x[n * 30 + c * 3 + k];
      EXPECT_NEAR(y[n * 10 + c], s, 1e-6);
    }
  // Zeroing every block except block 4 leaves logit 4 unchanged.
  Tensor x2 = x;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t f = 0; f < 30; ++f)
      if (f / 3 != 4) x2[n * 30 + f] = 0.0f;
  const Tensor y2 = grouped_linear_forward(x2, groups, m);
  for (std::size_t n = 0; n < 2; ++n) EXPECT_EQ(y[n * 10 + 4], y2[n * 10 + 4]);
}

TEST(GroupedLinear, OneToManyRowsFollowMapping) {
  std::mt19937_64 rng(6);
  GroupMapping m;
  m.num_classes = 5;
  m.groups = {{1, 3}, {0, 2, 4}};
  std::vector<LayerParams> groups{
      {{"weight", oracle::random_tensor({2, 2}, rng)}, {"bias", oracle::random_tensor({2}, rng)}},
      {{"weight", oracle::random_tensor({3, 2}, rng)}, {"bias", oracle::random_tensor({3}, rng)}}};
  const Tensor x = oracle::random_tensor({1, 4}, rng);
  const Tensor y = grouped_linear_forward(x, groups, m);
  auto logit = [&](std::size_t g, std::size_t r) {
    const auto& w = groups[g].at("weight");
    return double(groups[g].at("bias")[r]) + double(w[r * 2]) * x[2 * g] + double(w[r * 2 + 1]) * x[2 * g + 1];
  };
  EXPECT_NEAR(y[1], logit(0, 0), 1e-6);
  EXPECT_NEAR(y[3], logit(0, 1), 1e-6);
  EXPECT_NEAR(y[0], logit(1, 0), 1e-6);
  EXPECT_NEAR(y[2], logit(1, 1), 1e-6);
  EXPECT_NEAR(y[4], logit(1, 2), 1e-6);
}

TEST(GroupedLinear, UnmappedClassRejected) {
  GroupMapping m;
  m.num_classes = 3;
  m.groups = {{0}, {1}};
  std::vector<LayerParams> groups(2, LayerParams{{"weight", Tensor({1, 1})}, {"bias", Tensor({1})}});
  EXPECT_THROW(grouped_linear_forward(Tensor({1, 2}), groups, m), ConfigError);
}

TEST(GroupedLinear, OtherBlocksGetExactZeroGradient) {
  std::mt19937_64 rng(7);
  const std::vector<std::size_t> row_block{0, 1, 2, 3}, out_col{0, 1, 2, 3};
  for (std::size_t c = 0; c < 4; ++c) {
    ad::Tape t;
    ad::Variable x(oracle::random_tensor({3, 8}, rng), true);
    ad::Variable w(oracle::random_tensor({4, 2}, rng), true), b(oracle::random_tensor({4}, rng), true);
    const ad::Variable y = ad::block_linear(t, x, w, b, 4, row_block, out_col, 4, 0.0f);
    Tensor mask({3, 4});
    for (std::size_t n = 0; n < 3; ++n) mask[n * 4 + c] = 1.0f;
    t.backward(ad::sum(t, ad::mul(t, y, ad::Variable(mask))));
    const Tensor gx = x.grad(), gw = w.grad();
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t k = 0; k < 2; ++k) {
        if (r != c) EXPECT_EQ(gw[r * 2 + k], 0.0f);
      }
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t f = 0; f < 8; ++f)
        if (f / 2 != c) EXPECT_EQ(gx[n * 8 + f], 0.0f);
  }
}

TEST(BlockLinear, SingleBlockBitwiseEqualsLinear) {
  std::mt19937_64 rng(8);
  const Tensor x = oracle::random_tensor({3, 5}, rng), w = oracle::random_tensor({4, 5}, rng),
               b = oracle::random_tensor({4}, rng);
  const std::vector<std::size_t> rb{0, 0, 0, 0}, oc{0, 1, 2, 3};
  ad::Tape t;
  const Tensor a = ad::linear(t, ad::Variable(x), ad::Variable(w), ad::Variable(b)).value();
  const Tensor c = ad::block_linear(t, ad::Variable(x), ad::Variable(w), ad::Variable(b), 1, rb, oc, 4, 0.0f).value();
  EXPECT_TRUE(bitwise_equal(a, c));
}

TEST(Norm, ConstantInputNormalizesToZero) {
  LayerParams bn = make_batch_norm_params(2);
  const Tensor x({3, 2, 2, 2}, 4.0f);
  const Tensor yb = batch_norm_forward(x, bn, Mode::train);
  for (float v : yb.data()) EXPECT_NEAR(v, 0.0f, 1e-6);
  const LayerParams gn{{"weight", Tensor({2}, 1.0f)}, {"bias", Tensor({2})}};
  const Tensor yg = group_norm_forward(x, gn, 2);
  for (float v : yg.data()) EXPECT_NEAR(v, 0.0f, 1e-6);
}

TEST(Norm, EvalBeforeTrainingIsStateError) {
  LayerParams bn = make_batch_norm_params(2);
  EXPECT_THROW(batch_norm_forward(Tensor({2, 2, 2, 2}, 1.0f), bn, Mode::eval), StateError);
  batch_norm_forward(Tensor({2, 2, 2, 2}, 1.0f), bn, Mode::train);
  EXPECT_NO_THROW(batch_norm_forward(Tensor({2, 2, 2, 2}, 1.0f), bn, Mode::eval));
}

TEST(Norm, BatchNormUpdatesRunningStatistics) {
  std::mt19937_64 rng(9);
  LayerParams bn = make_batch_norm_params(2);
  const Tensor x = oracle::random_tensor({4, 2, 3, 3}, rng);
  batch_norm_forward(x, bn, Mode::train);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    double mu = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 9; ++k) mu += x[(n * 2 + ch) * 9 + k];
    mu /= 36.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 9; ++k) ss += std::pow(x[(n * 2 + ch) * 9 + k] - mu, 2);
    EXPECT_NEAR(bn.at("running_mean")[ch], 0.1 * mu, 1e-6);
    EXPECT_NEAR(bn.at("running_var")[ch], 0.9 + 0.1 * ss / 35.0, 1e-6);
  }
}

TEST(Norm, GroupNormSingleGroupIsLayerNorm) {
  std::mt19937_64 rng(10);
  const Tensor x = oracle::random_tensor({2, 3, 2, 2}, rng);
  const LayerParams gn{{"weight", Tensor({3}, 1.0f)}, {"bias", Tensor({3})}};
  const Tensor y = group_norm_forward(x, gn, 1);
  for (std::size_t n = 0; n < 2; ++n) {
    double mu = 0, ss = 0;
    for (std::size_t k = 0; k < 12; ++k) mu += x[n * 12 + k];
    mu /= 12;
    for (std::size_t k = 0; k < 12; ++k) ss += std::pow(x[n * 12 + k] - mu, 2);
    const double sd = std::sqrt(ss / 12 + ad::kNormEpsilon);
    for (std::size_t k = 0; k < 12; ++k) EXPECT_NEAR(y[n * 12 + k], (x[n * 12 + k] - mu) / sd, 1e-5);
  }
}

TEST(Norm, GroupNormMatchesSliceOracle) {
  std::mt19937_64 rng(11);
  const Tensor x = oracle::random_tensor({3, 6, 3, 3}, rng);
  const LayerParams gn{{"weight", oracle::random_tensor({6}, rng)}, {"bias", oracle::random_tensor({6}, rng)}};
  const Tensor y = group_norm_forward(x, gn, 3);
  const oracle::D ref = oracle::group_norm(oracle::D(x), oracle::D(gn.at("weight")), oracle::D(gn.at("bias")), 3,
                                           ad::kNormEpsilon);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
}

// -- permutation invariance -----------------------------------------------------

namespace {

ArchitectureSpec dense_two_layer() {
  ArchitectureSpec s;
  s.name = "mlp";
  s.input_shape = {1, 2, 3};
  s.num_classes = 4;
  s.layers = {LayerDescriptor::flatten("flatten"), LayerDescriptor::linear("fc1", 6, 8),
              LayerDescriptor::relu("r1"), LayerDescriptor::linear("logits", 8, 4)};
  return s;
}

// Marks batch-norm layers as trained and gives them non-trivial statistics.
void randomize_norm_state(ModelParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  for (auto& [name, t] : p.tensors()) {
    if (name.ends_with(".num_batches")) t[0] = 1.0f;
    if (name.ends_with(".running_var")) for (auto& v : t.data()) v = u(rng);
    if (name.ends_with(".running_mean")) for (auto& v : t.data()) v = u(rng) - 1.0f;
  }
}

double max_output_diff(const ArchitectureSpec& spec, const ModelParams& a, const ModelParams& b,
                       const Tensor& x) {
  return max_abs_diff(predict(spec, a, x), predict(spec, b, x));
}

}  // namespace

TEST(Permutation, IdentityLeavesParamsUnchanged) {
  const auto spec = dense_two_layer();
  const ModelParams p = init_params(spec, 1);
  const std::vector<std::size_t> id{0, 1, 2, 3, 4, 5, 6, 7};
  EXPECT_TRUE(bitwise_equal(permute_neurons(spec, p, "fc1", id), p));
}

TEST(Permutation, DenseNetworkFunctionPreserved) {
  const auto spec = dense_two_layer();
  const ModelParams p = init_params(spec, 2);
  std::mt19937_64 rng(3);
  const auto perm = block_permutation(8, 8, rng);
  const ModelParams q = permute_neurons(spec, p, "fc1", perm);
  EXPECT_FALSE(bitwise_equal(p, q));
  const Tensor x = oracle::random_tensor({100, 1, 2, 3}, rng);
  EXPECT_LT(max_output_diff(spec, p, q, x), 1e-6);
}

TEST(Permutation, SwapInsideConvGroupPreservesOutputs) {
  const auto base = desk_cnn({1, 8, 8}, 4, 4);
  const auto spec = build_psinet(base, [&] {
    GroupMapping m = default_mapping(4, 2);
    m.shared_depth = std::ptrdiff_t(block_end(base, base.layer_index("c1_1")));
    return m;
  }());
  ModelParams p = init_params(spec, 4);
  std::mt19937_64 rng(5);
  randomize_norm_state(p, rng);
  std::vector<std::size_t> perm(16);
  for (std::size_t i = 0; i < 16; ++i) perm[i] = i;
  std::swap(perm[9], perm[12]);
  const ModelParams q = permute_neurons(spec, p, "c3_1", perm);
  const Tensor x = oracle::random_tensor({100, 1, 8, 8}, rng);
  EXPECT_LT(max_output_diff(spec, p, q, x), 1e-6);
}

TEST(Permutation, CrossGroupPermutationRejected) {
  const auto base = desk_cnn({1, 8, 8}, 4, 4);
  GroupMapping m = default_mapping(4, 2);
  m.shared_depth = std::ptrdiff_t(block_end(base, base.layer_index("c1_1")));
  const auto spec = build_psinet(base, m);
  const ModelParams p = init_params(spec, 4);
  std::vector<std::size_t> perm(16);
  for (std::size_t i = 0; i < 16; ++i) perm[i] = i;
  std::swap(perm[1], perm[12]);
  EXPECT_THROW(permute_neurons(spec, p, "c3_1", perm), InvarianceError);
}
