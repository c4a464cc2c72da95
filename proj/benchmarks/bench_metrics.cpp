#include <benchmark/benchmark.h>

#include "rarecell/metrics.hpp"
#include "rarecell/random.hpp"

namespace {

// Test-pool sized list: N scored instances, T positives.
rarecell::RankedList make_list(std::size_t n, std::size_t t) {
  rarecell::Rng rng(7);
  std::vector<rarecell::RankedEntry> e;
  e.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    e.push_back({"i" + std::to_string(i), rng.uniform() + (i < t ? 0.5 : 0.0), i < t ? 1 : 0});
  }
  return rarecell::RankedList(std::move(e));
}

void BM_Rank(benchmark::State& state) {
  const auto base = make_list(static_cast<std::size_t>(state.range(0)), 40);
  for (auto _ : state) {
    auto copy = base.entries();
    benchmark::DoNotOptimize(rarecell::RankedList(std::move(copy)));
  }
}
BENCHMARK(BM_Rank)->Arg(1000)->Arg(8000);

void BM_MetricsAt400(benchmark::State& state) {
  const auto list = make_list(static_cast<std::size_t>(state.range(0)), 40);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rarecell::recall_at_k(list, 400, 40));
    benchmark::DoNotOptimize(rarecell::ndcg_at_k(list, 400, 40));
    benchmark::DoNotOptimize(rarecell::autk_at_k(list, 400, 40));
    benchmark::DoNotOptimize(rarecell::aufroc_norm(list, 400, 40));
  }
}
BENCHMARK(BM_MetricsAt400)->Arg(1000)->Arg(8000);

void BM_Auroc(benchmark::State& state) {
  const auto list = make_list(static_cast<std::size_t>(state.range(0)), 40);
  for (auto _ : state) benchmark::DoNotOptimize(rarecell::auroc(list));
}
BENCHMARK(BM_Auroc)->Arg(8000);

}  // namespace
