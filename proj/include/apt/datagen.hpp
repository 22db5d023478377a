#pragma once

#include <string>
#include <vector>

#include "apt/dataset.hpp"

namespace apt {

// Coefficient-field families. The binary variants threshold the underlying
// Gaussian field at its median into a two-valued (channel-like) medium.
enum class FieldClass : uint8_t {
  gaussian_continuous = 0,
  gaussian_binary = 1,
  von_karman_continuous = 2,
  von_karman_binary = 3,
};
FieldClass parse_field_class(const std::string& name);
const char* field_class_name(FieldClass c);

struct FieldParams {
  double corr_len = 0.2;        // correlation length in domain units (domain is the unit square)
  double log_mean = 0.0;        // mean of ln(coefficient)
  double log_std = 1.0;         // std of ln(coefficient)
  double binary_contrast = 1.0; // binary values: exp(log_mean -+ contrast * log_std)
  double vk_smoothness = 0.5;   // von Karman spectral smoothness
};

struct CoefficientField {
  int64_t grid = 0;              // cells per axis
  std::vector<double> values;    // grid*grid, strictly positive, cell-centered
  FieldClass field_class = FieldClass::gaussian_continuous;

  double at(int64_t ix, int64_t iy) const { return values[size_t(ix * grid + iy)]; }
  // bilinear interpolation of cell-centered values at (x, y) in [0,1]^2
  double interp(double x, double y) const;
};

// Correlated random field by direct spectral synthesis (sum of seeded random
// cosine/sine modes with the class's spectral density), exponentiated or
// thresholded to a positive medium.
CoefficientField generate_field(FieldClass cls, const FieldParams& p, int64_t grid,
                                uint64_t seed);

struct Well {
  double x = 0.5, y = 0.5;
  double rate = 1.0;        // injected amount per unit time while active
  double t_on = 0.0;
  double t_off = 1e300;
};

struct DiffusionScenario {
  CoefficientField coeff;
  std::vector<double> initial;        // grid*grid; empty means all zero
  std::vector<Well> wells;
  std::vector<double> snapshot_times; // strictly increasing, > 0
  double cfl_safety = 0.9;
  double dt_override = 0.0;           // tests only: force a fixed step size
};

struct SolveResult {
  std::vector<std::vector<double>> snapshots;  // cell values per snapshot time
  std::vector<double> mass;                    // domain integral per snapshot
  std::vector<double> injected;                // cumulative injected amount
  int64_t steps = 0;
  int64_t max_principle_violations = 0;        // source-free steps only
};

// Conservative finite-volume solve of  du/dt = div(D grad u) + q  on the unit
// square with no-flux boundaries, harmonic-mean face coefficients, and an
// explicit monotone step. Snapshot times are hit exactly.
SolveResult solve_diffusion(const DiffusionScenario& s);

struct ObservationConfig {
  int64_t n_nodes = 256;
  MeshMode mode = MeshMode::fixed;
  double adaptive_alpha = 0.1;  // background sampling mass away from fronts
  bool vary_adaptive_counts = true;
  uint64_t seed = 1;
};

// Sample the solved trajectory onto an observation point cloud. Well
// locations are always included as points and recorded as anchors. Adaptive
// mode draws each snapshot's own node set with density ~ alpha + |grad u|.
PointCloudSample sample_observations(const DiffusionScenario& s, const SolveResult& r,
                                     const ObservationConfig& oc);

// Per-snapshot cell sampling weights used in adaptive mode (exposed for tests).
std::vector<double> adaptive_cell_weights(const std::vector<double>& field, int64_t grid,
                                          double alpha);

struct DatagenConfig {
  uint64_t seed = 1;
  std::string name = "aptds";
  int64_t n_samples = 64;
  std::string split = "8:1:1";
  int64_t grid = 64;
  int64_t n_times = 10;
  double t_max = 0.01;
  int64_t nodes = 256;
  int64_t nodes_full = 1024;
  bool dualres = false;
  MeshMode mode = MeshMode::fixed;
  int64_t n_wells = 1;
  double rate_min = 0.5, rate_max = 2.0;
  std::vector<FieldClass> classes_train{FieldClass::gaussian_continuous};
  std::vector<FieldClass> classes_val{FieldClass::gaussian_continuous};
  std::vector<FieldClass> classes_test{FieldClass::gaussian_continuous};
  FieldParams field;
  double adaptive_alpha = 0.1;

  void validate() const;
};

struct BuiltDataset {
  std::vector<std::string> files;  // paths written, train/val/test (+ _full)
  std::string manifest;            // manifest text (also written to disk)
};

// Generates scenarios, solves them, samples observations, and writes the
// APTDS files plus a manifest into out_dir. Deterministic per (config, seed).
BuiltDataset build_dataset(const DatagenConfig& cfg, const std::string& out_dir);

}  // namespace apt
