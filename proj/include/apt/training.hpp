#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "apt/dataset.hpp"
#include "apt/model.hpp"

namespace apt {

struct TrainConfig {
  uint64_t seed = 1;
  int64_t epochs = 200;
  int64_t batch = 64;
  int64_t node_budget = 1024;
  std::string optimizer = "lion";  // lion | adamw
  double lr = 1e-4;
  double weight_decay = 0.5;
  std::string schedule = "cyclic";  // cyclic | cosine
  double warmup_frac = 0.2;
  int64_t lr_cycles = 4;
  double loss_p = 2.0;
  double loss_eps = 1e-8;
  std::vector<double> mix;  // per-dataset draw weights; empty = uniform
  int64_t val_every = 1;
  int64_t early_stop_patience = 0;  // epochs without val improvement; 0 = off
  Variant variant = Variant::fused;

  void validate(int64_t n_supernodes, size_t n_datasets) const;
};

NormalizationStats fit_normalization(const Dataset& train_split);

// z-score application/inversion on raw arrays
void normalize_features(Array2D& features, const NormalizationStats& st);
void normalize_fields(Array2D& fields, const NormalizationStats& st);
void denormalize_fields(Array2D& fields, const NormalizationStats& st);
std::vector<double> normalize_scalars(const std::vector<double>& scalars,
                                      const NormalizationStats& st);

// One training instance: a seeded node subset of one snapshot, with the true
// field rows at those nodes as targets. Raw (unnormalized) values.
struct TrainingInstance {
  Array2D coords;
  Array2D features;
  Array2D targets;
  double t = 0.0;
  int64_t time_index = 0;
};

TrainingInstance sample_training_instance(const PointCloudSample& sample, int64_t node_budget,
                                          uint64_t seed);

// Eq-style relative l_p loss: sum_i ||z_i - z^_i||_p / (sum_i ||z_i||_p + eps)
Tensor relative_lp_loss(const Tensor& pred, const Tensor& target, double p, double eps);

struct OptimizerState {
  std::string kind;
  std::vector<Tensor> m;  // first moment / momentum
  std::vector<Tensor> v;  // second moment (adamw only)
  int64_t step = 0;
};

OptimizerState init_optimizer(const std::string& kind, std::vector<Tensor>& params);
void optimizer_step(std::vector<Tensor>& params, OptimizerState& state,
                    const TrainConfig& cfg, double lr);

double lr_schedule(int64_t step, int64_t total, double warmup_frac, double base_lr,
                   const std::string& kind, int64_t cycles = 4);

// A loaded dataset ready for training: its splits, fitted statistics, and the
// shared coordinate rescaling.
struct TrainDataset {
  std::string dataset_id;
  Dataset train;
  Dataset val;
  NormalizationStats stats;
  RescaleTransform rescale;
};

TrainDataset prepare_train_dataset(Dataset train_split, Dataset val_split,
                                   double target_extent);

// Normalized model inputs for one instance; query points are the instance
// nodes themselves (direct one-step supervision).
struct PreparedInstance {
  Array2D coords_scaled;
  Array2D features_norm;
  Array2D anchors_scaled;
  Array2D targets_norm;
  std::vector<double> scalars_norm;
  double t_norm = 0.0;
};

PreparedInstance prepare_instance(const TrainingInstance& inst, const PointCloudSample& sample,
                                  const TrainDataset& ds);

struct LossRow {
  int64_t step = 0;
  int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<LossRow> history;
  std::vector<int64_t> draw_counts;  // per dataset
  int64_t best_epoch = -1;
  double best_val = 0.0;
  int64_t final_step = 0;
  std::map<std::string, std::vector<double>> best_params;  // by parameter name
};

using EpochCallback = std::function<void(const LossRow&)>;

// Direct one-step training over one or several datasets drawn by mix weight.
// Deterministic for a fixed (config, datasets, start state). `start_step`
// continues the step counter when resuming from a checkpoint.
TrainResult train(AptModel& model, std::vector<TrainDataset>& datasets,
                  const TrainConfig& cfg, int64_t start_step = 0,
                  const EpochCallback& on_epoch = nullptr);

// Mean relative-L2 over a split, on denormalized fields (the early-stopping
// metric). Nodes are budget-capped with a fixed seed; all times evaluated.
double validation_rel_l2(const AptModel& model, const TrainDataset& ds,
                         const TrainConfig& cfg);

}  // namespace apt
