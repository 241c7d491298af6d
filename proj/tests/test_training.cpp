#include <cmath>
#include <cstdio>
#include <vector>

#include "doctest.h"
#include "iqt/checkpoint.hpp"
#include "iqt/simulator.hpp"
#include "iqt/training.hpp"

using namespace iqt;

namespace {

DenoiserConfig tiny_cfg() {
  DenoiserConfig cfg;
  cfg.patch = 8;
  cfg.filters = {8, 16};
  cfg.token_size = {2, 1};
  cfg.dfe_depth = 1;
  return cfg;
}

std::pair<Volume, Volume> tiny_pair(std::uint64_t seed) {
  PhantomSpec ps;
  ps.dims = {16, 16, 16};
  ps.seed = seed;
  Volume hf = generate_phantom(ps);
  DecimationSpec ds;
  ds.factor = 4;
  ds.seed = seed + 1000;
  Volume lf = decimate(hf, ds);
  return {normalize(hf), normalize(lf)};
}

}  // namespace

TEST_CASE("group_loss is the mean squared error over all member voxels") {
  Tensor<float> t1({1, 2, 1, 1});
  t1.v = {1.f, 2.f};
  Tensor<float> p1({1, 2, 1, 1});
  p1.v = {0.f, 4.f};
  Tensor<float> t2({1, 1, 1, 1});
  t2.v = {3.f};
  Tensor<float> p2({1, 1, 1, 1});
  p2.v = {0.f};
  // squared errors 1, 4, 9 over 3 voxels -> mean 14/3
  double v = group_loss({t1, t2}, {p1, p2});
  CHECK(v == doctest::Approx(14.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(group_loss({t1}, {p1, p2}), ShapeError);
  CHECK_THROWS_AS(group_loss({t1}, {p2}), ShapeError);
}

TEST_CASE("init_train_state starts from the seeded initialization") {
  DenoiserConfig cfg = tiny_cfg();
  TrainConfig tc;
  tc.seed = 12;
  TrainState st = init_train_state(cfg, tc);
  CHECK(st.step == 0);
  ParamStore ref = init_params(cfg, 12);
  REQUIRE(st.params.size() == ref.size());
  for (const auto& [name, t] : ref) CHECK(st.params.at(name).v == t.v);
  for (const auto& [name, t] : st.adam_m)
    for (float x : t.v) CHECK(x == 0.f);
  TrainConfig bad;
  bad.learning_rate = -1;
  CHECK_THROWS_AS(init_train_state(cfg, bad), CheckpointError);
}

TEST_CASE("checkpoints round-trip bit-exactly through the file format") {
  DenoiserConfig cfg = tiny_cfg();
  TrainConfig tc;
  tc.seed = 5;
  tc.learning_rate = 2.5e-4;
  tc.parametrization = PredKind::V;
  TrainState st = init_train_state(cfg, tc);
  st.step = 1234;
  // non-trivial optimizer state
  for (auto& [name, t] : st.adam_m)
    for (size_t i = 0; i < t.v.size(); ++i) t.v[i] = 0.01f * (float)(i % 17);
  Checkpoint ck = st.to_checkpoint(/*rng_state=*/987654321);

  std::string path = "tmp_roundtrip.iqtc";
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);
  std::remove(path.c_str());

  CHECK(back.step == ck.step);
  CHECK(back.rng_state == ck.rng_state);
  CHECK(back.config.patch == cfg.patch);
  CHECK(back.config.filters == cfg.filters);
  CHECK(back.config.use_cross_batch == cfg.use_cross_batch);
  CHECK(back.train.learning_rate == tc.learning_rate);
  CHECK(back.train.parametrization == PredKind::V);
  REQUIRE(back.params.size() == ck.params.size());
  for (const auto& [name, t] : ck.params) CHECK(back.params.at(name).v == t.v);
  for (const auto& [name, t] : ck.adam_m) CHECK(back.adam_m.at(name).v == t.v);
  for (const auto& [name, t] : ck.adam_v) CHECK(back.adam_v.at(name).v == t.v);

  CHECK_THROWS_AS(load_checkpoint("does_not_exist.iqtc"), CheckpointError);
}

TEST_CASE("fit with zero steps returns the untouched initialization") {
  DenoiserConfig cfg = tiny_cfg();
  TrainConfig tc;
  tc.steps = 0;
  tc.seed = 3;
  NoiseSchedule sched;
  auto pair = tiny_pair(1);
  FitResult res = fit({pair}, {}, cfg, tc, sched);
  CHECK(res.checkpoint.step == 0);
  ParamStore ref = init_params(cfg, 3);
  for (const auto& [name, t] : ref)
    CHECK(res.checkpoint.params.at(name).v == t.v);
}

TEST_CASE("short training run lowers the loss and is seed-deterministic") {
  DenoiserConfig cfg = tiny_cfg();
  TrainConfig tc;
  tc.steps = 30;
  tc.seed = 17;
  tc.learning_rate = 3e-4;
  tc.log_every = 5;
  NoiseSchedule sched;
  auto pair = tiny_pair(2);

  FitResult a = fit({pair}, {}, cfg, tc, sched);
  REQUIRE(!a.log.empty());
  double first = a.log.front().train_loss;
  double last = a.log.back().train_loss;
  CHECK(last < first);
  CHECK(a.checkpoint.step == 30);

  FitResult b = fit({pair}, {}, cfg, tc, sched);
  for (const auto& [name, t] : a.checkpoint.params)
    CHECK(b.checkpoint.params.at(name).v == t.v);  // bit-reproducible
}

TEST_CASE("validation loss is deterministic and finite") {
  DenoiserConfig cfg = tiny_cfg();
  TrainConfig tc;
  tc.seed = 4;
  TrainState st = init_train_state(cfg, tc);
  NoiseSchedule sched;
  auto pair = tiny_pair(3);
  PreparedVolume pv = prepare_volume(pair.first, pair.second, cfg.patch);
  double v1 = validation_loss(st, {pv}, sched, 77);
  double v2 = validation_loss(st, {pv}, sched, 77);
  CHECK(v1 == v2);
  CHECK(std::isfinite(v1));
  CHECK(v1 > 0);
}

TEST_CASE("finite-difference gradient check passes on the small network") {
  DenoiserConfig cfg = tiny_cfg();
  GradCheckReport rep = gradient_check(cfg, 1e-4, 4);
  CHECK(rep.max_rel_err <= 1e-5);
  // every class sampled
  for (const char* cls : {"conv", "norm", "attention", "mlp"})
    CHECK(rep.max_rel_err_by_class.count(cls) == 1);
}

TEST_CASE("gradient check detects a deliberately corrupted gradient") {
  DenoiserConfig cfg = tiny_cfg();
  GradCheckReport rep = gradient_check(cfg, 1e-4, 2, "stem.w");
  CHECK(rep.max_rel_err > 1e-2);
}
