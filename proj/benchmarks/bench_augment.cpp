#include <benchmark/benchmark.h>

#include "rarecell/augment.hpp"
#include "rarecell/synthetic.hpp"

namespace {

rarecell::Augmenter augmenter() {
  rarecell::AugmentationPolicy p;
  p.target_side = 224;
  return rarecell::Augmenter(p);
}

void BM_Weak(benchmark::State& state) {
  const auto aug = augmenter();
  const auto x = rarecell::synthetic::blob_cell(192, 3);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(aug.apply_weak(x, seed++));
}
BENCHMARK(BM_Weak);

void BM_Strong(benchmark::State& state) {
  const auto aug = augmenter();
  const auto x = rarecell::synthetic::blob_cell(192, 3);
  const int id = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(aug.apply_pseudo_abnormal(x, id, seed++));
}
BENCHMARK(BM_Strong)->DenseRange(0, rarecell::kStrongTransformCount - 1);

void BM_TtaViews(benchmark::State& state) {
  const auto aug = augmenter();
  const auto x = rarecell::synthetic::blob_cell(192, 3);
  for (auto _ : state) benchmark::DoNotOptimize(aug.tta_views(x));
}
BENCHMARK(BM_TtaViews);

}  // namespace
