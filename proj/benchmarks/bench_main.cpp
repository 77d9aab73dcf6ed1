#include <benchmark/benchmark.h>

#include "mfbsde/fluctuation.hpp"

using namespace mfbsde;

namespace {

ModelPtr model(const std::string& name) {
  CatalogParams p;
  p.values = {{"s", 0.5}};
  p.x0 = {1.0};
  return catalog_model(name, p);
}

void BM_BrownianIncrements(benchmark::State& state) {
  TimeGrid g(1.0, static_cast<int>(state.range(0)));
  std::vector<double> dw(g.steps);
  std::uint64_t k = 0;
  for (auto _ : state) {
    brownian_increments(derive_digest(7, Role::replication, k++), g, 1, dw);
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * g.steps);
}
BENCHMARK(BM_BrownianIncrements)->Arg(64)->Arg(1024);

void BM_SdeN(benchmark::State& state) {
  auto m = model("tanh_bounded");
  TimeGrid g(1.0, 64);
  LawFlow law = solve_limit_forward(*m, g, 512, StreamKey(1));
  PicardOptions p;
  p.cloud_size = 1024;
  p.max_iters = 2;
  int n = static_cast<int>(state.range(0));
  for (auto _ : state) {
    SdeNResult r = solve_sde_n(*m, n, g, law, p, StreamKey(2), StreamKey(3), 500);
    benchmark::DoNotOptimize(r.paths.value(0, 64, 0));
  }
}
BENCHMARK(BM_SdeN)->Arg(16)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_ClassicalCloud(benchmark::State& state) {
  auto m = model("tanh_bounded");
  TimeGrid g(1.0, 32);
  for (auto _ : state) {
    LawFlow law = solve_limit_forward(*m, g, static_cast<int>(state.range(0)), StreamKey(4));
    benchmark::DoNotOptimize(law.mean(32)[0]);
  }
}
BENCHMARK(BM_ClassicalCloud)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_LimitBsde(benchmark::State& state) {
  auto m = model("mf_bsde_linear");
  TimeGrid g(1.0, 64);
  LawFlow law = LawFlow::closed_form(*m, g, 1024, StreamKey(5));
  int reps = static_cast<int>(state.range(0));
  PathEnsemble drive(g, 1, reps, true);
  for (int r = 0; r < reps; ++r) drive.set_increments(r, brownian_increments(derive_key(StreamKey(6), Role::replication, r), g, 1));
  PathEnsemble x = limit_paths(*m, law, drive);
  RegressionOptions ro;
  for (auto _ : state) {
    BsdeSolution s = solve_mfbsde(*m, law, x, ro);
    benchmark::DoNotOptimize(s.y[0]);
  }
}
BENCHMARK(BM_LimitBsde)->Arg(1000)->Arg(4000)->Unit(benchmark::kMillisecond);

void BM_BsdeN(benchmark::State& state) {
  auto m = model("mf_bsde_linear");
  TimeGrid g(1.0, 32);
  LawFlow law = LawFlow::closed_form(*m, g, 1024, StreamKey(7));
  PicardOptions p;
  p.cloud_size = 1024;
  SdeNResult sde = solve_sde_n(*m, 64, g, law, p, StreamKey(8), StreamKey(9), 200);
  PathEnsemble xl = limit_paths(*m, law, sde.paths);
  RegressionOptions ro;
  ro.inner_paths = 64;
  BsdeSolution lim = solve_mfbsde(*m, law, xl, ro);
  for (auto _ : state) {
    BsdeSolution yn = solve_bsde_n(*m, 64, sde, LimitInputs{&law, &xl, &lim}, ro, StreamKey(10));
    benchmark::DoNotOptimize(yn.y[0]);
  }
}
BENCHMARK(BM_BsdeN)->Unit(benchmark::kMillisecond);

void BM_TheoreticalCovariance(benchmark::State& state) {
  auto m = model("tanh_bounded");
  TimeGrid g(1.0, 32);
  LawFlow law = solve_limit_forward(*m, g, 1024, StreamKey(11));
  FieldLattice lat;
  for (int i = 1; i <= static_cast<int>(state.range(0)); ++i) lat.times.push_back(g.t(i * 32 / state.range(0)));
  lat.points = {{0.0}, {1.0}};
  for (auto _ : state) {
    CovarianceMatrix c = theoretical_covariance(*m, law, lat);
    benchmark::DoNotOptimize(c.value(0, 0));
  }
}
BENCHMARK(BM_TheoreticalCovariance)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_LimitSystemForward(benchmark::State& state) {
  auto m = model("ou_mean_field");
  TimeGrid g(1.0, 32);
  LawFlow law = LawFlow::closed_form(*m, g, 1024, StreamKey(12));
  LimitSystemOptions o;
  o.members = static_cast<int>(state.range(0));
  o.backward = false;
  for (auto _ : state) {
    LimitSystemResult r = solve_limit_system(*m, law, nullptr, o, StreamKey(13));
    benchmark::DoNotOptimize(r.xbar[0]);
  }
}
BENCHMARK(BM_LimitSystemForward)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
