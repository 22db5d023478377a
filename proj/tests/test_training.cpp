#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "apt/datagen.hpp"
#include "apt/dataio.hpp"
#include "apt/training.hpp"
#include "fd_check.hpp"

using namespace apt;

namespace {

Dataset tiny_dataset(uint64_t seed, int64_t n_samples, int64_t nodes = 24,
                     MeshMode mode = MeshMode::fixed) {
  DatagenConfig cfg;
  cfg.seed = seed;
  cfg.name = "unit-" + std::to_string(seed);
  cfg.n_samples = n_samples;
  cfg.split = "1:0:0";
  cfg.grid = 16;
  cfg.n_times = 3;
  cfg.t_max = 0.004;
  cfg.nodes = nodes;
  cfg.mode = mode;
  const std::string dir = "build_train_unit_" + std::to_string(seed);
  std::filesystem::remove_all(dir);
  build_dataset(cfg, dir);
  Dataset ds = read_dataset(dir + "/train.aptds");
  std::filesystem::remove_all(dir);
  return ds;
}

ModelConfig unit_model_config(const Dataset& ds) {
  ModelConfig cfg;
  cfg.dim = ds.schema.dim;
  cfg.d_a = ds.schema.d_a;
  cfg.d_z = ds.schema.d_z;
  cfg.scalar_names = ds.schema.scalar_names;
  cfg.d_h = 16;
  cfg.d_e = 16;
  cfg.n_heads = 2;
  cfg.n_supernodes = 8;
  cfg.n_latent = 4;
  cfg.n_enc = 1;
  cfg.n_app = 1;
  cfg.n_dec = 1;
  cfg.pe_grid = 4;
  cfg.pe_time_dim = 8;
  cfg.mlp_ratio = 2;
  cfg.radius = 60.0;
  cfg.max_neighbors = 16;
  return cfg;
}

TrainConfig unit_train_config() {
  TrainConfig tc;
  tc.seed = 5;
  tc.epochs = 2;
  tc.batch = 2;
  tc.node_budget = 24;
  tc.optimizer = "adamw";
  tc.lr = 1e-3;
  tc.weight_decay = 0.0;
  tc.schedule = "cosine";
  tc.warmup_frac = 0.1;
  tc.loss_p = 2.0;
  tc.loss_eps = 1e-8;
  return tc;
}

}  // namespace

TEST_CASE("fit_normalization and its inverse") {
  Dataset ds = tiny_dataset(3, 4);
  NormalizationStats st = fit_normalization(ds);

  // apply then invert is the identity
  Array2D fields = ds.samples[0].fields[0];
  Array2D round = fields;
  normalize_fields(round, st);
  denormalize_fields(round, st);
  for (size_t i = 0; i < fields.v.size(); ++i)
    CHECK(round.v[i] == doctest::Approx(fields.v[i]).epsilon(1e-10));

  // normalized training features have mean ~0 and population std ~1
  std::vector<double> sums(size_t(ds.schema.d_a), 0.0), sqs(size_t(ds.schema.d_a), 0.0);
  int64_t n = 0;
  for (const auto& s : ds.samples) {
    Array2D f = s.features;
    normalize_features(f, st);
    for (int64_t i = 0; i < f.rows; ++i) {
      for (int64_t j = 0; j < f.cols; ++j) {
        sums[size_t(j)] += f.at(i, j);
        sqs[size_t(j)] += f.at(i, j) * f.at(i, j);
      }
    }
    n += f.rows;
  }
  for (int64_t j = 0; j < ds.schema.d_a; ++j) {
    const double mean = sums[size_t(j)] / double(n);
    const double var = sqs[size_t(j)] / double(n) - mean * mean;
    CHECK(std::fabs(mean) < 1e-8);
    CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-6);
  }

  // hand case: column {1, 3} -> mean 2, std 1, normalized {-1, +1}
  Dataset two;
  two.schema = {2, 1, 1, {}};
  two.meta["domain"] = "0,0,1,1";
  PointCloudSample s;
  s.mode = MeshMode::fixed;
  s.coords = Array2D(2, 2);
  s.coords.at(1, 0) = 1.0;
  s.features = Array2D(2, 1);
  s.features.at(0, 0) = 1.0;
  s.features.at(1, 0) = 3.0;
  s.times = {1.0};
  s.fields.push_back(Array2D(2, 1));
  two.samples.push_back(s);
  NormalizationStats st2 = fit_normalization(two);
  CHECK(st2.feat_mean[0] == doctest::Approx(2.0));
  CHECK(st2.feat_std[0] == doctest::Approx(1.0));
  Array2D f2 = two.samples[0].features;
  normalize_features(f2, st2);
  CHECK(f2.at(0, 0) == doctest::Approx(-1.0));
  CHECK(f2.at(1, 0) == doctest::Approx(1.0));

  // constant feature column falls back to std 1 (normalized to zeros)
  CHECK(st2.field_std[0] == 1.0);

  Dataset empty;
  empty.schema = two.schema;
  CHECK_THROWS_AS(fit_normalization(empty), Error);
}

TEST_CASE("sample_training_instance honors budget, determinism, adaptivity") {
  Dataset ds = tiny_dataset(4, 2);
  const PointCloudSample& s = ds.samples[0];

  TrainingInstance all = sample_training_instance(s, s.coords.rows, 9);
  CHECK(all.coords.rows == s.coords.rows);

  TrainingInstance a = sample_training_instance(s, 16, 1234);
  TrainingInstance b = sample_training_instance(s, 16, 1234);
  CHECK(a.coords.v == b.coords.v);
  CHECK(a.time_index == b.time_index);
  CHECK(a.targets.v == b.targets.v);

  // adaptive sample: budget stays constant even though snapshot sizes differ
  Dataset ad = tiny_dataset(5, 2, 40, MeshMode::adaptive);
  const PointCloudSample& sa = ad.samples[0];
  for (uint64_t seed = 0; seed < 8; ++seed) {
    TrainingInstance inst = sample_training_instance(sa, 20, seed);
    CHECK(inst.coords.rows == 20);
    // targets row count matches, and the time index points into the times
    CHECK(inst.targets.rows == 20);
    CHECK(inst.time_index >= 0);
    CHECK(inst.time_index < int64_t(sa.times.size()));
  }
}

TEST_CASE("relative_lp_loss examples and properties") {
  Tensor t34 = Tensor::from({1, 2}, std::vector<double>{3, 4});
  Tensor zero = Tensor::zeros({1, 2});
  CHECK(relative_lp_loss(t34, t34, 2.0, 1e-8).item() == 0.0);
  CHECK(relative_lp_loss(zero, t34, 2.0, 1e-8).item() ==
        doctest::Approx(5.0 / (5.0 + 1e-8)).epsilon(1e-12));

  CHECK_THROWS_AS(relative_lp_loss(t34, Tensor::zeros({2, 1}), 2.0, 1e-8), Error);

  // scale robustness: the eps effect vanishes as the magnitude grows
  Rng rng(6);
  Tensor z = Tensor::randn({5, 2}, rng);
  Tensor zh = Tensor::randn({5, 2}, rng);
  const double base = relative_lp_loss(scale(z, 1000.0), scale(zh, 1000.0), 2.0, 1e-8).item();
  const double small = relative_lp_loss(z, zh, 2.0, 1e-8).item();
  CHECK(base == doctest::Approx(small).epsilon(1e-6));

  // differentiable wrt predictions
  std::vector<Tensor> params = {Tensor::randn({4, 2}, rng)};
  Tensor target = Tensor::randn({4, 2}, rng);
  auto loss = [&]() { return relative_lp_loss(params[0], target, 2.0, 1e-8); };
  auto r = test::grad_check(params, loss);
  CHECK(r.max_rel_err < 1e-5);
}

TEST_CASE("optimizer_step rules") {
  TrainConfig cfg = unit_train_config();

  // zero grads, zero weight decay: parameters unchanged
  std::vector<Tensor> params = {Tensor::from({2}, std::vector<double>{1.5, -2.0})};
  params[0].set_requires_grad(true);
  params[0].accumulate_grad(Tensor::zeros({2}));
  cfg.optimizer = "adamw";
  cfg.weight_decay = 0.0;
  OptimizerState st = init_optimizer("adamw", params);
  optimizer_step(params, st, cfg, 0.1);
  CHECK(params[0].item(0) == 1.5);
  CHECK(params[0].item(1) == -2.0);

  // lion: pre-decay step magnitude is exactly lr per coordinate
  std::vector<Tensor> lion_p = {Tensor::from({2}, std::vector<double>{0.0, 0.0})};
  lion_p[0].set_requires_grad(true);
  lion_p[0].accumulate_grad(Tensor::from({2}, std::vector<double>{0.3, -7.0}));
  cfg.optimizer = "lion";
  OptimizerState lst = init_optimizer("lion", lion_p);
  optimizer_step(lion_p, lst, cfg, 0.05);
  CHECK(lion_p[0].item(0) == doctest::Approx(-0.05));
  CHECK(lion_p[0].item(1) == doctest::Approx(0.05));

  // adamw hand case: p=1, g=1, lr=0.1, fresh state -> p ~ 0.9
  std::vector<Tensor> ap = {Tensor::from({1}, std::vector<double>{1.0})};
  ap[0].set_requires_grad(true);
  ap[0].accumulate_grad(Tensor::from({1}, std::vector<double>{1.0}));
  cfg.optimizer = "adamw";
  OptimizerState ast = init_optimizer("adamw", ap);
  optimizer_step(ap, ast, cfg, 0.1);
  CHECK(ap[0].item(0) == doctest::Approx(0.9).epsilon(1e-7));

  // missing gradient is a state error
  std::vector<Tensor> missing = {Tensor::zeros({2})};
  OptimizerState mst = init_optimizer("adamw", missing);
  CHECK_THROWS_WITH_AS(optimizer_step(missing, mst, cfg, 0.1), doctest::Contains("gradient"),
                       Error);
}

TEST_CASE("lr_schedule shapes") {
  CHECK(lr_schedule(0, 100, 0.2, 1.0, "cosine") == 0.0);
  CHECK(lr_schedule(20, 100, 0.2, 1.0, "cosine") == doctest::Approx(1.0));
  CHECK(lr_schedule(60, 100, 0.2, 1.0, "cosine") == doctest::Approx(0.5));  // cos midpoint
  CHECK(lr_schedule(100, 100, 0.2, 1.0, "cosine") == doctest::Approx(0.0).epsilon(1e-12));

  // bounds and cyclic restarts
  double prev_end = 1.0;
  for (int64_t s = 0; s <= 200; ++s) {
    double lr = lr_schedule(s, 200, 0.1, 1.0, "cyclic", 4);
    CHECK(lr >= 0.0);
    CHECK(lr <= 1.0);
    prev_end = lr;
  }
  CHECK(prev_end == doctest::Approx(0.0).epsilon(1e-9));
  // a restart boundary jumps back near base_lr
  const int64_t warmup = 20;
  const int64_t cycle = (200 - warmup) / 4;
  double before = lr_schedule(warmup + cycle - 1, 200, 0.1, 1.0, "cyclic", 4);
  double after = lr_schedule(warmup + cycle + 1, 200, 0.1, 1.0, "cyclic", 4);
  CHECK(before < 0.05);
  CHECK(after > 0.9);
}

TEST_CASE("training runs deterministically and logs draw counts") {
  Dataset full = tiny_dataset(11, 6);
  Dataset val = tiny_dataset(12, 2);
  val.meta = full.meta;

  auto run_once = [&]() {
    ModelConfig mc = unit_model_config(full);
    AptModel model = make_model(mc, 99);
    std::vector<TrainDataset> sets;
    sets.push_back(prepare_train_dataset(full, val, mc.extent));
    TrainConfig tc = unit_train_config();
    tc.epochs = 3;
    return train(model, sets, tc);
  };
  TrainResult r1 = run_once();
  TrainResult r2 = run_once();
  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
    CHECK(r1.history[i].val_loss == r2.history[i].val_loss);
    CHECK(r1.history[i].lr == r2.history[i].lr);
  }
  CHECK(r1.best_epoch == r2.best_epoch);
}

TEST_CASE("mix weights drive dataset draws and tolerate node-count mismatch") {
  Dataset a = tiny_dataset(21, 4, 24);
  Dataset b = tiny_dataset(22, 4, 48);  // deliberately different node counts
  ModelConfig mc = unit_model_config(a);
  AptModel model = make_model(mc, 1);
  std::vector<TrainDataset> sets;
  sets.push_back(prepare_train_dataset(a, Dataset{a.schema, {}, a.meta}, mc.extent));
  sets.push_back(prepare_train_dataset(b, Dataset{b.schema, {}, b.meta}, mc.extent));

  TrainConfig tc = unit_train_config();
  tc.epochs = 50;  // 8 samples / batch 2 -> 4 steps per epoch, 200 draws
  tc.batch = 2;
  tc.node_budget = 24;
  tc.mix = {0.5, 0.5};
  TrainResult r = train(model, sets, tc);
  const double total = double(r.draw_counts[0] + r.draw_counts[1]);
  CHECK(total >= 100);
  const double frac = double(r.draw_counts[0]) / total;
  CHECK(std::fabs(frac - 0.5) < 0.15);  // law of large numbers, sampling noise
}

TEST_CASE("a small model overfits four samples") {
  Dataset ds = tiny_dataset(31, 4);
  ModelConfig mc = unit_model_config(ds);
  AptModel model = make_model(mc, 3);
  std::vector<TrainDataset> sets;
  sets.push_back(prepare_train_dataset(ds, Dataset{ds.schema, {}, ds.meta}, mc.extent));
  TrainConfig tc = unit_train_config();
  tc.optimizer = "adamw";
  tc.lr = 3e-3;
  tc.warmup_frac = 0.05;
  tc.schedule = "cosine";
  tc.batch = 4;
  tc.epochs = 500;  // one step per epoch at batch 4 over 4 samples
  tc.val_every = 100;
  TrainResult r = train(model, sets, tc);
  CHECK(r.history.back().train_loss < 1e-2);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  Dataset ds = tiny_dataset(41, 2);
  ModelConfig mc = unit_model_config(ds);
  AptModel model = make_model(mc, 3);
  std::vector<TrainDataset> sets;
  sets.push_back(prepare_train_dataset(ds, Dataset{ds.schema, {}, ds.meta}, mc.extent));
  TrainConfig tc = unit_train_config();
  tc.optimizer = "adamw";
  tc.lr = 1e14;  // guaranteed blow-up
  tc.warmup_frac = 0.0;
  tc.epochs = 20;
  CHECK_THROWS_AS(train(model, sets, tc), Error);
}
