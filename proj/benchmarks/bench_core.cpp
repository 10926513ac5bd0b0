// Micro-benchmarks for the hot paths of each training stage.

#include <random>

#include <benchmark/benchmark.h>

#include "grouppref/aligner.hpp"
#include "grouppref/config.hpp"
#include "grouppref/grm.hpp"
#include "grouppref/grouping.hpp"
#include "grouppref/metrics.hpp"
#include "grouppref/prefnet.hpp"

using namespace grouppref;

namespace {

Mat gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

const World& default_world() {
  static const World w = build_world(PipelineConfig{}.world, 0);
  return w;
}

void BM_KMeans(benchmark::State& state) {
  const Mat pts = gaussian(state.range(0), 128, 1);
  for (auto _ : state) benchmark::DoNotOptimize(kmeans(pts, 4, 7).wcss);
}
BENCHMARK(BM_KMeans)->Arg(100)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_SelectK(benchmark::State& state) {
  const Mat pts = gaussian(state.range(0), 128, 2);
  for (auto _ : state) benchmark::DoNotOptimize(select_k(pts, 2, 5, 3).k);
}
BENCHMARK(BM_SelectK)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_Silhouette(benchmark::State& state) {
  const Mat pts = gaussian(state.range(0), 128, 3);
  std::vector<int> labels(static_cast<std::size_t>(pts.rows()));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 4);
  for (auto _ : state) benchmark::DoNotOptimize(mean_silhouette(pts, labels));
}
BENCHMARK(BM_Silhouette)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_PrefnetLossAndGrad(benchmark::State& state) {
  const World& w = default_world();
  const auto params = init_pref_params(PipelineConfig{}.prefnet_config(), 1);
  std::vector<PrefSample> batch;
  for (int i = 0; i < state.range(0); ++i) {
    PrefSample s;
    s.user = &w.users[static_cast<std::size_t>(i) % w.users.size()];
    s.creative = &w.creatives[static_cast<std::size_t>(i * 7) % w.creatives.size()];
    s.product = &w.product(s.creative->product_id);
    s.label = i % 2;
    batch.push_back(s);
  }
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grad(batch, params).loss);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PrefnetLossAndGrad)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_GrmLossAndGrad(benchmark::State& state) {
  const World& w = default_world();
  const PipelineConfig c;
  const int dim = (1 + c.grouping.spec.total()) * c.pref_dim_d;
  const auto params = init_grm_params(dim, c.world.d_raw, c.grm, 1);
  const Mat groups = gaussian(state.range(0), dim, 4);
  std::vector<PrefPairSample> pairs;
  for (int i = 0; i < state.range(0); ++i) {
    const auto cr = w.creatives_of(static_cast<int>(static_cast<std::size_t>(i) % w.products.size()));
    PrefPairSample q;
    q.product_id = cr[0]->product_id;
    q.creative_a = cr[0]->creative_id;
    q.creative_b = cr[1]->creative_id;
    q.group = groups.row(i).transpose();
    q.label = i % 2;
    pairs.push_back(q);
  }
  for (auto _ : state) benchmark::DoNotOptimize(grm_loss_and_grad(pairs, w, params).loss);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GrmLossAndGrad)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_PolicyLogprob(benchmark::State& state) {
  const auto shape = PipelineConfig{}.policy_shape();
  const auto params = init_policy_params(shape, 1);
  const Vec ctx = gaussian(shape.context_dim, 1, 5).col(0);
  const PromptSeq y{{1, 5, 9, 13}};
  for (auto _ : state) benchmark::DoNotOptimize(policy_logprob(y, ctx, params));
}
BENCHMARK(BM_PolicyLogprob);

void BM_GroupDpoLoss(benchmark::State& state) {
  const auto shape = PipelineConfig{}.policy_shape();
  const auto theta = init_policy_params(shape, 1);
  const auto ref = init_policy_params(shape, 2);
  const DpoExample ex{gaussian(shape.context_dim, 1, 6).col(0), PromptSeq{{1, 5, 9, 13}}, PromptSeq{{2, 6, 10, 14}}};
  for (auto _ : state) benchmark::DoNotOptimize(group_dpo_loss(ex, theta, ref, 0.1).loss);
}
BENCHMARK(BM_GroupDpoLoss);

void BM_ModalDecode(benchmark::State& state) {
  const auto shape = PipelineConfig{}.policy_shape();
  const auto params = init_policy_params(shape, 1);
  const Vec ctx = gaussian(shape.context_dim, 1, 7).col(0);
  for (auto _ : state) benchmark::DoNotOptimize(generate(ctx, params, DecodeMode::kModal).tokens);
}
BENCHMARK(BM_ModalDecode);

}  // namespace

BENCHMARK_MAIN();
