#include <benchmark/benchmark.h>

#include "rarecell/ocsvm.hpp"
#include "rarecell/random.hpp"

namespace {

std::vector<std::vector<float>> gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  rarecell::Rng rng(seed);
  std::vector<std::vector<float>> x(n, std::vector<float>(d));
  for (auto& row : x) {
    for (auto& v : row) v = static_cast<float>(rng.normal());
  }
  return x;
}

void BM_OcsvmFit(benchmark::State& state) {
  const auto x = gaussian(static_cast<std::size_t>(state.range(0)), 64, 1);
  for (auto _ : state) benchmark::DoNotOptimize(rarecell::OneClassSvm::fit(x, {}));
}
BENCHMARK(BM_OcsvmFit)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

void BM_OcsvmScore(benchmark::State& state) {
  const auto svm = rarecell::OneClassSvm::fit(gaussian(2000, 64, 1), {});
  const auto q = gaussian(1, 64, 2).front();
  for (auto _ : state) benchmark::DoNotOptimize(svm.anomaly_score(q));
}
BENCHMARK(BM_OcsvmScore);

}  // namespace
