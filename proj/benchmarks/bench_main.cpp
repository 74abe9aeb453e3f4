#include <benchmark/benchmark.h>

#include <random>

#include "psinet/autodiff.hpp"
#include "psinet/builder.hpp"
#include "psinet/dataset.hpp"
#include "psinet/federation.hpp"
#include "psinet/network.hpp"

using namespace psinet;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Args: channels, spatial size, groups.
void BM_Conv2dForward(benchmark::State& state) {
  const std::size_t c = state.range(0), hw = state.range(1), g = state.range(2);
  const ad::Variable x(random_tensor({32, c, hw, hw}, 1));
  const ad::Variable w(random_tensor({c, c / g, 3, 3}, 2)), b(random_tensor({c}, 3));
  for (auto _ : state) {
    ad::Tape tape;
    benchmark::DoNotOptimize(ad::conv2d(tape, x, w, b, {1, 1, g}).value().raw());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2dForward)->Args({20, 6, 1})->Args({40, 3, 1})->Args({20, 6, 10})->Args({40, 3, 10});

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const std::size_t c = state.range(0), hw = state.range(1), g = state.range(2);
  const Tensor xv = random_tensor({32, c, hw, hw}, 1);
  const Tensor wv = random_tensor({c, c / g, 3, 3}, 2), bv = random_tensor({c}, 3);
  for (auto _ : state) {
    ad::Tape tape;
    ad::Variable x(xv, true), w(wv, true), b(bv, true);
    tape.backward(ad::sum(tape, ad::conv2d(tape, x, w, b, {1, 1, g})));
    benchmark::DoNotOptimize(w.grad().raw());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({20, 6, 1})->Args({40, 3, 1})->Args({20, 6, 10})->Args({40, 3, 10});

// One local epoch of the desk-scale network over 250 samples. Arg: width.
void BM_LocalEpoch(benchmark::State& state) {
  const std::size_t width = state.range(0);
  SynthOptions so;
  so.per_class = 25;
  const Dataset ds = synthesize_dataset(so);
  const auto spec = desk_cnn(ds.sample_shape(), 10, width);
  const ModelParams p = init_params(spec, 1);
  NodePartition all;
  for (std::size_t i = 0; i < ds.size(); ++i) all.indices.push_back(i);
  FederationConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(local_train(spec, p, ds, all, cfg, 0).loss);
  state.SetItemsProcessed(state.iterations() * ds.size());
}
BENCHMARK(BM_LocalEpoch)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_LocalEpochPsinet(benchmark::State& state) {
  const std::size_t width = state.range(0);
  SynthOptions so;
  so.per_class = 25;
  const Dataset ds = synthesize_dataset(so);
  const auto base = desk_cnn(ds.sample_shape(), 10, width);
  GroupMapping m = default_mapping(10, 10);
  m.shared_depth = std::ptrdiff_t(block_end(base, base.layer_index("c1_1")));
  const auto spec = build_psinet(base, m);
  const ModelParams p = init_params(spec, 1);
  NodePartition all;
  for (std::size_t i = 0; i < ds.size(); ++i) all.indices.push_back(i);
  FederationConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(local_train(spec, p, ds, all, cfg, 0).loss);
  state.SetItemsProcessed(state.iterations() * ds.size());
}
BENCHMARK(BM_LocalEpochPsinet)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_AggregateFedavg(benchmark::State& state) {
  const auto spec = vgg9({3, 32, 32}, 10, 10);
  std::vector<ModelParams> models;
  for (std::uint64_t i = 0; i < std::uint64_t(state.range(0)); ++i) models.push_back(init_params(spec, i));
  for (auto _ : state) benchmark::DoNotOptimize(aggregate_fedavg(models).size());
  state.SetItemsProcessed(state.iterations() * models.size() * models[0].parameter_count());
}
BENCHMARK(BM_AggregateFedavg)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_AggregatePsinet(benchmark::State& state) {
  const auto base = vgg9({3, 32, 32}, 10, 10);
  GroupMapping m = default_mapping(10, 10);
  m.shared_depth = std::ptrdiff_t(block_end(base, base.layer_index("c2_1")));
  const auto spec = build_psinet(base, m);
  std::vector<ModelParams> models;
  std::vector<TrimMask> masks;
  for (std::size_t i = 0; i < std::size_t(state.range(0)); ++i) {
    std::set<std::size_t> local;
    for (std::size_t k = 0; k < 5; ++k) local.insert((i + k) % 10);
    auto r = trim_model(spec, init_params(spec, i), local);
    models.push_back(std::move(r.params));
    masks.push_back(r.mask);
  }
  for (auto _ : state) benchmark::DoNotOptimize(aggregate_psinet(models, masks, m).groups.size());
}
BENCHMARK(BM_AggregatePsinet)->Arg(10)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
