#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "apt/tensor.hpp"

namespace apt {

// Plain row-major numeric table for the data path (samples, grids, reports).
// Model-side math converts views of these into Tensors.
struct Array2D {
  int64_t rows = 0, cols = 0;
  std::vector<double> v;

  Array2D() = default;
  Array2D(int64_t r, int64_t c) : rows(r), cols(c), v(size_t(r * c), 0.0) {}

  double& at(int64_t i, int64_t j) { return v[size_t(i * cols + j)]; }
  double at(int64_t i, int64_t j) const { return v[size_t(i * cols + j)]; }
  bool empty() const { return rows == 0 || cols == 0; }

  Tensor tensor(Dtype dt = Dtype::f64) const { return Tensor::from({rows, cols}, v, dt); }
};

enum class MeshMode : uint8_t { fixed = 0, adaptive = 1 };

struct Snapshot {
  Array2D coords;    // [n, dim]
  Array2D features;  // [n, d_a]
  Array2D fields;    // [n, d_z]
};

// One simulation trajectory observed on a point cloud. In fixed-mesh mode one
// node set serves all snapshot times; in adaptive mode each snapshot carries
// its own node set, features, and fields.
struct PointCloudSample {
  MeshMode mode = MeshMode::fixed;
  Array2D coords;               // fixed mode [N, dim]
  Array2D features;             // fixed mode [N, d_a]
  std::vector<double> scalars;  // dataset scalar-condition values, schema order
  std::vector<double> times;    // strictly increasing, within [0, T_max]
  std::vector<Array2D> fields;  // fixed mode, one [N, d_z] per time
  std::vector<Snapshot> snapshots;  // adaptive mode, aligned with times
  std::map<std::string, std::string> meta;

  int64_t n_points(int64_t time_index = 0) const {
    return mode == MeshMode::fixed ? coords.rows : snapshots[size_t(time_index)].coords.rows;
  }
  void validate() const;
};

struct SupernodeSet {
  Array2D coords;                    // [N_s, dim]
  std::vector<uint8_t> anchor_mask;  // 1 where deterministically included
};

struct RadiusGraph {
  struct Edge {
    int64_t center;  // index into the supernode set
    int64_t member;  // index into the input cloud
  };
  std::vector<Edge> edges;
  std::vector<double> offsets;    // [E, dim] flattened, member - center
  std::vector<double> distances;  // [E]
  double radius = 0.0;
  int64_t max_neighbors = 0;
  std::vector<uint8_t> isolated;  // 1 for degree-0 centers
  int64_t dim = 0;
};

enum class SupernodeStrategy : uint8_t { seeded_uniform = 0, farthest_point = 1 };
SupernodeStrategy parse_supernode_strategy(const std::string& name);
const char* supernode_strategy_name(SupernodeStrategy s);

// Lexicographic order of points by coordinates (then feature rows, then
// original index), making every seeded selection a function of geometry
// rather than storage order.
std::vector<int64_t> canonical_order(const Array2D& coords, const Array2D* features = nullptr);

struct RescaleTransform {
  std::vector<double> lo;     // per-axis minimum
  std::vector<double> scale;  // 0 marks a degenerate axis (maps to extent/2)
  double extent = 0.0;

  void apply_in_place(Array2D& coords) const;
  Array2D apply(const Array2D& coords) const;
};

RescaleTransform fit_rescale(const Array2D& coords, double target_extent);
Array2D rescale_coords(const Array2D& coords, double target_extent);

SupernodeSet sample_supernodes(const Array2D& cloud_coords, int64_t n_supernodes,
                               SupernodeStrategy strategy, const Array2D& anchors,
                               uint64_t seed);

RadiusGraph build_radius_graph(const Array2D& cloud_coords, const Array2D& centers,
                               double radius, int64_t max_neighbors, uint64_t seed);

// Interleaved sin/cos ladder with geometrically spaced periods (base^(2k/dim)).
std::vector<double> sinusoidal_pe(double value, int64_t dim, double base_period = 10000.0);

// Multilinear interpolation weights of `coords` (clamped into [0, extent]^dim)
// over a grid_size^dim vertex table; 2^dim corners per query.
struct GridInterp {
  std::vector<int64_t> indices;  // [n, 2^dim]
  std::vector<double> weights;   // [n, 2^dim]
  int64_t n = 0, corners = 0;
};
GridInterp grid_interp(const Array2D& coords, int64_t grid_size, double extent);

// Differentiable table lookup: rows of `table` combined with multilinear
// weights. table is [grid_size^dim, d_h].
Tensor grid_pe(const Tensor& table, const Array2D& coords, int64_t grid_size, double extent);

}  // namespace apt
