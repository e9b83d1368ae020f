#include <benchmark/benchmark.h>

#include "groundgen/decoding.hpp"
#include "groundgen/metrics.hpp"
#include "groundgen/training.hpp"

namespace {

using namespace groundgen;

// The synthetic-experiment shape: d = 64, 2 + 2 layers, ~20-token sources.
ModelConfig bench_config(GroundingMode mode) {
  ModelConfig c;
  c.vocab_size = 120;
  c.max_source_len = 64;
  c.max_context_len = 16;
  c.max_target_len = 16;
  c.dropout = 0;
  c.grounding_mode = mode;
  c.seed = 1;
  return c;
}

std::vector<PreparedSample> bench_batch(std::size_t n) {
  Rng rng(7);
  auto ids = [&](std::size_t len) {
    std::vector<TokenId> out(len);
    for (auto& t : out) t = static_cast<TokenId>(kNumReserved + rng.index(115));
    return out;
  };
  std::vector<PreparedSample> batch;
  for (std::size_t i = 0; i < n; ++i) batch.push_back({ids(8), ids(12), ids(7)});
  return batch;
}

GroundingMode mode_arg(const benchmark::State& state) { return static_cast<GroundingMode>(state.range(0)); }

void BM_Loss(benchmark::State& state) {
  const GroundedModel<float> model(bench_config(mode_arg(state)));
  const auto batch = bench_batch(16);
  for (auto _ : state) {
    Graph<float> g(false);
    auto ctx = model.eval_context();
    benchmark::DoNotOptimize(model.loss(g, batch, ctx).value()[0]);
  }
  state.SetLabel(to_string(mode_arg(state)));
}

void BM_TrainStep(benchmark::State& state) {
  GroundedModel<float> model(bench_config(mode_arg(state)));
  auto train_state = TrainState<float>::zeros_like(model.parameters());
  const auto batch = bench_batch(16);
  TrainConfig tc;
  tc.set_learning_rate("1e-3");
  for (auto _ : state) benchmark::DoNotOptimize(train_step(model, std::span<const PreparedSample>(batch), train_state, tc));
  state.SetItemsProcessed(state.iterations() * 16);
  state.SetLabel(to_string(mode_arg(state)));
}

void BM_Decode(benchmark::State& state) {
  const GroundedModel<float> model(bench_config(GroundingMode::DoHA));
  const auto batch = bench_batch(16);
  DecodeConfig c;
  c.strategy = state.range(0) == 1 ? DecodeStrategy::Greedy : DecodeStrategy::Beam;
  c.beam_size = static_cast<std::size_t>(state.range(0));
  c.max_target_len = 12;
  c.min_length = 12;  // an untrained model would otherwise stop at random
  for (auto _ : state) benchmark::DoNotOptimize(generate(model, std::span<const PreparedSample>(batch), c));
  state.SetItemsProcessed(state.iterations() * 16);
  state.SetLabel(c.strategy == DecodeStrategy::Greedy ? "greedy" : "beam " + std::to_string(c.beam_size));
}

void BM_CorpusMetrics(benchmark::State& state) {
  Rng rng(9);
  std::vector<std::string> outputs, refs;
  auto sentence = [&] {
    std::string s;
    for (int i = 0; i < 20; ++i) s += "w" + std::to_string(rng.index(50)) + " ";
    return s;
  };
  for (int i = 0; i < 500; ++i) {
    outputs.push_back(sentence());
    refs.push_back(sentence());
  }
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_corpus(outputs, refs));
}

constexpr int kConcat = static_cast<int>(GroundingMode::Concat);
constexpr int kCoDR = static_cast<int>(GroundingMode::CoDR);
constexpr int kDoHA = static_cast<int>(GroundingMode::DoHA);

BENCHMARK(BM_Loss)->Arg(kConcat)->Arg(kCoDR)->Arg(kDoHA)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainStep)->Arg(kConcat)->Arg(kCoDR)->Arg(kDoHA)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Decode)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CorpusMetrics)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
