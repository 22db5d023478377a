#include "apt/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace apt {

void TrainConfig::validate(int64_t n_supernodes, size_t n_datasets) const {
  if (epochs < 1) fail(ErrorKind::config, "train.epochs must be >= 1");
  if (batch < 1) fail(ErrorKind::config, "train.batch must be >= 1");
  if (node_budget < n_supernodes)
    fail(ErrorKind::config, "train.node_budget (" + std::to_string(node_budget) +
                                ") must be >= model.n_supernodes (" +
                                std::to_string(n_supernodes) + ")");
  if (optimizer != "lion" && optimizer != "adamw")
    fail(ErrorKind::config, "train.optimizer must be lion or adamw");
  if (lr <= 0) fail(ErrorKind::config, "train.lr must be positive");
  if (weight_decay < 0) fail(ErrorKind::config, "train.weight_decay must be >= 0");
  if (schedule != "cyclic" && schedule != "cosine")
    fail(ErrorKind::config, "train.schedule must be cyclic or cosine");
  if (warmup_frac < 0 || warmup_frac >= 1)
    fail(ErrorKind::config, "train.warmup_frac must lie in [0,1)");
  if (lr_cycles < 1) fail(ErrorKind::config, "train.lr_cycles must be >= 1");
  if (loss_p < 1) fail(ErrorKind::config, "train.loss_p must be >= 1");
  if (loss_eps <= 0) fail(ErrorKind::config, "train.loss_eps must be positive");
  if (!mix.empty()) {
    if (mix.size() != n_datasets)
      fail(ErrorKind::config, "train.mix needs one weight per dataset");
    double total = 0;
    for (double w : mix) {
      if (w < 0) fail(ErrorKind::config, "train.mix weights must be >= 0");
      total += w;
    }
    if (total <= 0) fail(ErrorKind::config, "train.mix weights sum to zero");
  }
  if (val_every < 1) fail(ErrorKind::config, "train.val_every must be >= 1");
  if (early_stop_patience < 0) fail(ErrorKind::config, "train.early_stop_patience must be >= 0");
}

// ---------------------------------------------------------------------------
// normalization

namespace {

struct Accumulator {
  double sum = 0, sq = 0;
  int64_t n = 0;
  void add(double v) {
    sum += v;
    sq += v * v;
    ++n;
  }
  double mean() const { return n ? sum / double(n) : 0.0; }
  double std(const char* what) const {
    if (!n) return 1.0;
    double var = sq / double(n) - mean() * mean();
    var = std::max(var, 0.0);
    double s = std::sqrt(var);
    if (s == 0.0) {
      log_warn(std::string(what) + ": zero variance, falling back to std = 1");
      return 1.0;
    }
    return s;
  }
};

}  // namespace

NormalizationStats fit_normalization(const Dataset& train_split) {
  if (train_split.samples.empty())
    fail(ErrorKind::data, "fit_normalization: empty training split");
  const int64_t d_a = train_split.schema.d_a;
  const int64_t d_z = train_split.schema.d_z;
  const int64_t n_scalars = int64_t(train_split.schema.scalar_names.size());
  std::vector<Accumulator> feat(static_cast<size_t>(d_a));
  std::vector<Accumulator> field(static_cast<size_t>(d_z));
  std::vector<Accumulator> scalars(static_cast<size_t>(n_scalars));
  double t_max = 0.0;

  auto eat_features = [&](const Array2D& a) {
    for (int64_t i = 0; i < a.rows; ++i)
      for (int64_t j = 0; j < a.cols; ++j) feat[size_t(j)].add(a.at(i, j));
  };
  auto eat_fields = [&](const Array2D& a) {
    for (int64_t i = 0; i < a.rows; ++i)
      for (int64_t j = 0; j < a.cols; ++j) field[size_t(j)].add(a.at(i, j));
  };
  for (const PointCloudSample& s : train_split.samples) {
    for (double t : s.times) t_max = std::max(t_max, t);
    for (int64_t k = 0; k < n_scalars; ++k) scalars[size_t(k)].add(s.scalars[size_t(k)]);
    if (s.mode == MeshMode::fixed) {
      eat_features(s.features);
      for (const Array2D& f : s.fields) eat_fields(f);
    } else {
      for (const Snapshot& snap : s.snapshots) {
        eat_features(snap.features);
        eat_fields(snap.fields);
      }
    }
  }
  NormalizationStats st;
  for (int64_t j = 0; j < d_a; ++j) {
    st.feat_mean.push_back(feat[size_t(j)].mean());
    st.feat_std.push_back(feat[size_t(j)].std("input feature"));
  }
  for (int64_t j = 0; j < d_z; ++j) {
    st.field_mean.push_back(field[size_t(j)].mean());
    st.field_std.push_back(field[size_t(j)].std("output field"));
  }
  for (int64_t k = 0; k < n_scalars; ++k) {
    st.scalar_mean.push_back(scalars[size_t(k)].mean());
    st.scalar_std.push_back(scalars[size_t(k)].std("scalar condition"));
  }
  st.time_scale = t_max > 0 ? t_max : 1.0;
  return st;
}

void normalize_features(Array2D& features, const NormalizationStats& st) {
  for (int64_t i = 0; i < features.rows; ++i)
    for (int64_t j = 0; j < features.cols; ++j)
      features.at(i, j) = (features.at(i, j) - st.feat_mean[size_t(j)]) / st.feat_std[size_t(j)];
}

void normalize_fields(Array2D& fields, const NormalizationStats& st) {
  for (int64_t i = 0; i < fields.rows; ++i)
    for (int64_t j = 0; j < fields.cols; ++j)
      fields.at(i, j) = (fields.at(i, j) - st.field_mean[size_t(j)]) / st.field_std[size_t(j)];
}

void denormalize_fields(Array2D& fields, const NormalizationStats& st) {
  for (int64_t i = 0; i < fields.rows; ++i)
    for (int64_t j = 0; j < fields.cols; ++j)
      fields.at(i, j) = fields.at(i, j) * st.field_std[size_t(j)] + st.field_mean[size_t(j)];
}

std::vector<double> normalize_scalars(const std::vector<double>& scalars,
                                      const NormalizationStats& st) {
  std::vector<double> out(scalars.size());
  for (size_t k = 0; k < scalars.size(); ++k)
    out[k] = (scalars[k] - st.scalar_mean[k]) / st.scalar_std[k];
  return out;
}

// ---------------------------------------------------------------------------
// instance sampling

TrainingInstance sample_training_instance(const PointCloudSample& sample, int64_t node_budget,
                                          uint64_t seed) {
  if (sample.times.empty()) fail(ErrorKind::data, "sample has no snapshots to train on");
  Rng rng(derive_seed(seed, 0x1257a));
  TrainingInstance inst;
  inst.time_index = int64_t(rng.below(uint64_t(sample.times.size())));
  inst.t = sample.times[size_t(inst.time_index)];

  const Array2D& coords =
      sample.mode == MeshMode::fixed ? sample.coords
                                     : sample.snapshots[size_t(inst.time_index)].coords;
  const Array2D& features =
      sample.mode == MeshMode::fixed ? sample.features
                                     : sample.snapshots[size_t(inst.time_index)].features;
  const Array2D& fields =
      sample.mode == MeshMode::fixed ? sample.fields[size_t(inst.time_index)]
                                     : sample.snapshots[size_t(inst.time_index)].fields;

  int64_t budget = node_budget;
  if (budget > coords.rows) {
    log_warn("node budget " + std::to_string(node_budget) + " exceeds cloud size " +
             std::to_string(coords.rows) + "; taking the whole cloud");
    budget = coords.rows;
  }
  std::vector<int64_t> chosen = rng.sample_without_replacement(coords.rows, budget);
  std::sort(chosen.begin(), chosen.end());

  inst.coords = Array2D(budget, coords.cols);
  inst.features = Array2D(budget, features.cols);
  inst.targets = Array2D(budget, fields.cols);
  for (int64_t i = 0; i < budget; ++i) {
    const int64_t row = chosen[size_t(i)];
    for (int64_t j = 0; j < coords.cols; ++j) inst.coords.at(i, j) = coords.at(row, j);
    for (int64_t j = 0; j < features.cols; ++j) inst.features.at(i, j) = features.at(row, j);
    for (int64_t j = 0; j < fields.cols; ++j) inst.targets.at(i, j) = fields.at(row, j);
  }
  return inst;
}

// ---------------------------------------------------------------------------
// loss and optimizers

Tensor relative_lp_loss(const Tensor& pred, const Tensor& target, double p, double eps) {
  if (pred.shape() != target.shape())
    fail(ErrorKind::data, "relative_lp_loss: prediction and target shapes differ");
  if (p < 1) fail(ErrorKind::data, "relative_lp_loss: p must be >= 1");
  if (eps <= 0) fail(ErrorKind::data, "relative_lp_loss: eps must be positive");
  Tensor numer = sum(rows_lp_norm(sub(pred, target), p));
  Tensor denom = add_scalar(sum(rows_lp_norm(target, p)), eps);
  return div_scalar_tensors(numer, denom);
}

OptimizerState init_optimizer(const std::string& kind, std::vector<Tensor>& params) {
  OptimizerState st;
  st.kind = kind;
  for (Tensor& p : params) {
    st.m.push_back(Tensor::zeros(p.shape(), p.dtype()));
    if (kind == "adamw") st.v.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
  return st;
}

namespace {

template <class T>
void adamw_kernel(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v,
                  double lr, double wd, double bc1, double bc2) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (size_t k = 0; k < p.size(); ++k) {
    const double grad = double(g[k]);
    const double mk = beta1 * double(m[k]) + (1 - beta1) * grad;
    const double vk = beta2 * double(v[k]) + (1 - beta2) * grad * grad;
    m[k] = T(mk);
    v[k] = T(vk);
    const double update = (mk / bc1) / (std::sqrt(vk / bc2) + eps);
    p[k] = T(double(p[k]) - lr * (update + wd * double(p[k])));
  }
}

template <class T>
void lion_kernel(std::span<T> p, std::span<const T> g, std::span<T> m, double lr, double wd) {
  constexpr double beta1 = 0.9, beta2 = 0.99;
  for (size_t k = 0; k < p.size(); ++k) {
    const double grad = double(g[k]);
    const double blend = beta1 * double(m[k]) + (1 - beta1) * grad;
    const double direction = blend > 0 ? 1.0 : (blend < 0 ? -1.0 : 0.0);
    p[k] = T(double(p[k]) - lr * (direction + wd * double(p[k])));
    m[k] = T(beta2 * double(m[k]) + (1 - beta2) * grad);
  }
}

}  // namespace

void optimizer_step(std::vector<Tensor>& params, OptimizerState& state,
                    const TrainConfig& cfg, double lr) {
  state.step += 1;
  const double wd = cfg.weight_decay;
  const double bc1 = 1.0 - std::pow(0.9, double(state.step));
  const double bc2 = 1.0 - std::pow(0.999, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    Tensor g = p.grad();
    if (!g.defined())
      fail(ErrorKind::data, "optimizer_step: parameter " + std::to_string(i) +
                                " has no gradient (backward not run?)");
    if (p.dtype() == Dtype::f64) {
      if (state.kind == "adamw")
        adamw_kernel<double>(p.data<double>(), g.data<double>(), state.m[i].data<double>(),
                             state.v[i].data<double>(), lr, wd, bc1, bc2);
      else
        lion_kernel<double>(p.data<double>(), g.data<double>(), state.m[i].data<double>(), lr,
                            wd);
    } else {
      if (state.kind == "adamw")
        adamw_kernel<float>(p.data<float>(), g.data<float>(), state.m[i].data<float>(),
                            state.v[i].data<float>(), lr, wd, bc1, bc2);
      else
        lion_kernel<float>(p.data<float>(), g.data<float>(), state.m[i].data<float>(), lr, wd);
    }
  }
}

double lr_schedule(int64_t step, int64_t total, double warmup_frac, double base_lr,
                   const std::string& kind, int64_t cycles) {
  if (step < 0 || step > total) fail(ErrorKind::config, "lr_schedule: step out of range");
  const int64_t warmup = int64_t(warmup_frac * double(total));
  if (warmup > 0 && step < warmup) return base_lr * double(step) / double(warmup);
  if (total == warmup) return base_lr;
  double progress = double(step - warmup) / double(total - warmup);
  if (kind == "cyclic") {
    // cosine annealing with restarts: each cycle decays from base to zero
    double scaled = progress * double(cycles);
    double cycle_pos = scaled - std::floor(scaled);
    if (progress >= 1.0) cycle_pos = 1.0;
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * cycle_pos));
  }
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// pipeline helpers

TrainDataset prepare_train_dataset(Dataset train_split, Dataset val_split,
                                   double target_extent) {
  TrainDataset ds;
  ds.dataset_id = train_split.id();
  ds.stats = fit_normalization(train_split);
  ds.rescale = dataset_rescale(train_split, target_extent);
  ds.train = std::move(train_split);
  ds.val = std::move(val_split);
  return ds;
}

PreparedInstance prepare_instance(const TrainingInstance& inst, const PointCloudSample& sample,
                                  const TrainDataset& ds) {
  PreparedInstance out;
  out.coords_scaled = ds.rescale.apply(inst.coords);
  out.features_norm = inst.features;
  normalize_features(out.features_norm, ds.stats);
  out.anchors_scaled = ds.rescale.apply(sample_anchors(sample, inst.coords.cols));
  out.targets_norm = inst.targets;
  normalize_fields(out.targets_norm, ds.stats);
  out.scalars_norm = normalize_scalars(sample.scalars, ds.stats);
  out.t_norm = inst.t / ds.stats.time_scale;
  return out;
}

// ---------------------------------------------------------------------------
// the training loop

namespace {

double instance_loss_and_grads(AptModel& model, const PreparedInstance& pi,
                               const TrainConfig& cfg, uint64_t forward_seed,
                               GradStore& sink) {
  GradTape tape;
  TapeScope scope(tape);
  Tensor pred = model_forward(model, {pi.coords_scaled, pi.features_norm, pi.anchors_scaled},
                              pi.t_norm, pi.scalars_norm, pi.coords_scaled,
                              {forward_seed, cfg.variant});
  Tensor target = pi.targets_norm.tensor(pred.dtype());
  Tensor loss = relative_lp_loss(pred, target, cfg.loss_p, cfg.loss_eps);
  const double value = loss.item();
  if (!std::isfinite(value)) return value;  // caller aborts with diagnostics
  tape.backward(loss, &sink);
  return value;
}

double grad_norm_of(std::vector<Tensor>& params) {
  double total = 0;
  for (Tensor& p : params) {
    Tensor g = p.grad();
    if (!g.defined()) continue;
    for (int64_t k = 0; k < g.numel(); ++k) total += g.item(k) * g.item(k);
  }
  return std::sqrt(total);
}

}  // namespace

double validation_rel_l2(const AptModel& model, const TrainDataset& ds,
                         const TrainConfig& cfg) {
  NoGradScope no_grad;
  double total = 0;
  int64_t count = 0;
  for (size_t si = 0; si < ds.val.samples.size(); ++si) {
    const PointCloudSample& sample = ds.val.samples[si];
    for (size_t ti = 0; ti < sample.times.size(); ++ti) {
      // budget-capped node subset with a fixed per-(sample, time) seed
      TrainingInstance inst;
      {
        Rng pick(derive_seed(cfg.seed, 0xe5a1, uint64_t(si * 1000 + ti)));
        const Array2D& coords = sample.mode == MeshMode::fixed
                                    ? sample.coords
                                    : sample.snapshots[ti].coords;
        const Array2D& features = sample.mode == MeshMode::fixed
                                      ? sample.features
                                      : sample.snapshots[ti].features;
        const Array2D& fields = sample.mode == MeshMode::fixed ? sample.fields[ti]
                                                               : sample.snapshots[ti].fields;
        const int64_t budget = std::min(cfg.node_budget, coords.rows);
        auto chosen = pick.sample_without_replacement(coords.rows, budget);
        std::sort(chosen.begin(), chosen.end());
        inst.coords = Array2D(budget, coords.cols);
        inst.features = Array2D(budget, features.cols);
        inst.targets = Array2D(budget, fields.cols);
        for (int64_t i = 0; i < budget; ++i) {
          for (int64_t j = 0; j < coords.cols; ++j)
            inst.coords.at(i, j) = coords.at(chosen[size_t(i)], j);
          for (int64_t j = 0; j < features.cols; ++j)
            inst.features.at(i, j) = features.at(chosen[size_t(i)], j);
          for (int64_t j = 0; j < fields.cols; ++j)
            inst.targets.at(i, j) = fields.at(chosen[size_t(i)], j);
        }
        inst.t = sample.times[ti];
        inst.time_index = int64_t(ti);
      }
      PreparedInstance pi = prepare_instance(inst, sample, ds);
      Tensor pred = model_forward(model, {pi.coords_scaled, pi.features_norm, pi.anchors_scaled},
                                  pi.t_norm, pi.scalars_norm, pi.coords_scaled,
                                  {derive_seed(cfg.seed, 0xe5a2, uint64_t(si)), cfg.variant});
      // rel-L2 on physical fields
      Array2D pred_phys(pred.extent(0), pred.extent(1));
      pred_phys.v = pred.to_vector();
      denormalize_fields(pred_phys, ds.stats);
      double num = 0, den = 0;
      for (size_t i = 0; i < pred_phys.v.size(); ++i) {
        const double diff = pred_phys.v[i] - inst.targets.v[i];
        num += diff * diff;
        den += inst.targets.v[i] * inst.targets.v[i];
      }
      if (den > 0) {
        total += std::sqrt(num / den);
        ++count;
      }
    }
  }
  return count ? total / double(count) : 0.0;
}

TrainResult train(AptModel& model, std::vector<TrainDataset>& datasets, const TrainConfig& cfg,
                  int64_t start_step, const EpochCallback& on_epoch) {
  if (datasets.empty()) fail(ErrorKind::data, "train: no datasets");
  cfg.validate(model.config.n_supernodes, datasets.size());
  for (const TrainDataset& ds : datasets) {
    if (ds.train.schema != datasets[0].train.schema)
      fail(ErrorKind::data, "train: dataset schemas differ: " + ds.train.schema.describe() +
                                " vs " + datasets[0].train.schema.describe());
    if (ds.train.samples.empty()) fail(ErrorKind::data, "train: empty training split");
  }

  std::vector<Tensor> params;
  std::vector<std::string> names;
  model.visit_params([&](const std::string& n, Tensor& t) {
    names.push_back(n);
    params.push_back(t);
  });
  OptimizerState opt = init_optimizer(cfg.optimizer, params);
  opt.step = start_step;

  int64_t total_train_samples = 0;
  for (const TrainDataset& ds : datasets) total_train_samples += int64_t(ds.train.samples.size());
  const int64_t steps_per_epoch = std::max<int64_t>(1, total_train_samples / cfg.batch);
  const int64_t total_steps = start_step + cfg.epochs * steps_per_epoch;

  std::vector<double> weights = cfg.mix;
  if (weights.empty()) weights.assign(datasets.size(), 1.0);

  TrainResult result;
  result.draw_counts.assign(datasets.size(), 0);
  double best_val = HUGE_VAL;
  int64_t epochs_since_best = 0;
  int64_t step = start_step;
  Rng draw_rng(derive_seed(cfg.seed, 0xd4a3));

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0;
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const double lr =
          lr_schedule(step, total_steps, cfg.warmup_frac, cfg.lr, cfg.schedule, cfg.lr_cycles);

      const size_t d = datasets.size() == 1 ? 0 : draw_rng.weighted_index(weights);
      ++result.draw_counts[d];
      TrainDataset& ds = datasets[d];

      for (Tensor& p : params) p.zero_grad();
      double batch_loss = 0;
      std::vector<GradStore> sinks(size_t(cfg.batch));
      for (int64_t b = 0; b < cfg.batch; ++b) {
        const uint64_t inst_seed = derive_seed(cfg.seed, uint64_t(step), uint64_t(b));
        Rng pick(derive_seed(inst_seed, 0x5a));
        const size_t sample_idx = size_t(pick.below(uint64_t(ds.train.samples.size())));
        const PointCloudSample& sample = ds.train.samples[sample_idx];
        TrainingInstance inst = sample_training_instance(sample, cfg.node_budget, inst_seed);
        PreparedInstance pi = prepare_instance(inst, sample, ds);
        const double value = instance_loss_and_grads(model, pi, cfg,
                                                     derive_seed(inst_seed, 0xf0), sinks[size_t(b)]);
        if (!std::isfinite(value)) {
          std::ostringstream os;
          os << "training aborted: non-finite loss at step " << step << " (lr " << lr
             << ", grad-norm " << grad_norm_of(params) << ")";
          fail(ErrorKind::numeric, os.str());
        }
        batch_loss += value;
      }
      // ordered single-threaded reduction keeps runs bit-reproducible
      const double inv_batch = 1.0 / double(cfg.batch);
      for (size_t pi_idx = 0; pi_idx < params.size(); ++pi_idx) {
        for (int64_t b = 0; b < cfg.batch; ++b) {
          const Tensor* g = sinks[size_t(b)].find(params[pi_idx].node());
          if (g != nullptr) params[pi_idx].accumulate_grad(scale(*g, inv_batch));
        }
        if (!params[pi_idx].grad().defined())
          params[pi_idx].accumulate_grad(Tensor::zeros(params[pi_idx].shape(),
                                                       params[pi_idx].dtype()));
      }
      optimizer_step(params, opt, cfg, lr);
      batch_loss /= double(cfg.batch);
      epoch_loss += batch_loss;
      ++step;
    }
    epoch_loss /= double(steps_per_epoch);

    LossRow row;
    row.step = step;
    row.epoch = epoch;
    row.lr = lr_schedule(std::min(step, total_steps), total_steps, cfg.warmup_frac, cfg.lr,
                         cfg.schedule, cfg.lr_cycles);
    row.train_loss = epoch_loss;
    row.val_loss = std::numeric_limits<double>::quiet_NaN();
    if ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs) {
      double val = 0;
      int64_t denom = 0;
      for (TrainDataset& ds : datasets) {
        if (ds.val.samples.empty()) continue;
        val += validation_rel_l2(model, ds, cfg);
        ++denom;
      }
      row.val_loss = denom ? val / double(denom) : epoch_loss;
      if (row.val_loss < best_val) {
        best_val = row.val_loss;
        result.best_epoch = epoch;
        result.best_val = best_val;
        epochs_since_best = 0;
        result.best_params.clear();
        for (size_t i = 0; i < params.size(); ++i)
          result.best_params[names[i]] = params[i].to_vector();
      } else {
        ++epochs_since_best;
      }
    }
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);
    if (cfg.early_stop_patience > 0 && epochs_since_best >= cfg.early_stop_patience) break;
  }
  result.final_step = step;
  if (result.best_params.empty()) {
    for (size_t i = 0; i < params.size(); ++i)
      result.best_params[names[i]] = params[i].to_vector();
    result.best_val = result.history.empty() ? 0.0 : result.history.back().train_loss;
    result.best_epoch = int64_t(result.history.size()) - 1;
  }
  return result;
}

}  // namespace apt
