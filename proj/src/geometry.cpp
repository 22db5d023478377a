#include "apt/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "apt/rng.hpp"

namespace apt {

void PointCloudSample::validate() const {
  if (times.empty()) fail(ErrorKind::data, "sample has no snapshot times");
  for (size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      fail(ErrorKind::data, "snapshot times must be strictly increasing");
  auto check_finite = [](const Array2D& a, const char* what) {
    for (double x : a.v)
      if (!std::isfinite(x)) fail(ErrorKind::data, std::string(what) + " contains non-finite values");
  };
  if (mode == MeshMode::fixed) {
    if (coords.rows < 1) fail(ErrorKind::data, "sample needs at least one point");
    if (features.rows != coords.rows)
      fail(ErrorKind::data, "feature row count does not match coordinates");
    if (fields.size() != times.size())
      fail(ErrorKind::data, "one field array per snapshot time required");
    for (const Array2D& f : fields)
      if (f.rows != coords.rows)
        fail(ErrorKind::data, "field row count does not match coordinates");
    check_finite(coords, "coords");
  } else {
    if (snapshots.size() != times.size())
      fail(ErrorKind::data, "one snapshot per time required in adaptive mode");
    for (const Snapshot& s : snapshots) {
      if (s.coords.rows < 1) fail(ErrorKind::data, "adaptive snapshot needs at least one point");
      if (s.features.rows != s.coords.rows || s.fields.rows != s.coords.rows)
        fail(ErrorKind::data, "adaptive snapshot row counts do not match");
      check_finite(s.coords, "snapshot coords");
    }
  }
}

SupernodeStrategy parse_supernode_strategy(const std::string& name) {
  if (name == "seeded-uniform") return SupernodeStrategy::seeded_uniform;
  if (name == "farthest-point") return SupernodeStrategy::farthest_point;
  fail(ErrorKind::config, "unknown supernode strategy '" + name + "'");
}

const char* supernode_strategy_name(SupernodeStrategy s) {
  return s == SupernodeStrategy::seeded_uniform ? "seeded-uniform" : "farthest-point";
}

std::vector<int64_t> canonical_order(const Array2D& coords, const Array2D* features) {
  std::vector<int64_t> order(static_cast<size_t>(coords.rows));
  std::iota(order.begin(), order.end(), int64_t(0));
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    for (int64_t j = 0; j < coords.cols; ++j) {
      if (coords.at(a, j) != coords.at(b, j)) return coords.at(a, j) < coords.at(b, j);
    }
    if (features != nullptr) {
      for (int64_t j = 0; j < features->cols; ++j)
        if (features->at(a, j) != features->at(b, j))
          return features->at(a, j) < features->at(b, j);
    }
    return a < b;
  });
  return order;
}

RescaleTransform fit_rescale(const Array2D& coords, double target_extent) {
  if (coords.rows < 1) fail(ErrorKind::data, "rescale_coords: empty point set");
  RescaleTransform t;
  t.extent = target_extent;
  t.lo.resize(size_t(coords.cols));
  t.scale.resize(size_t(coords.cols));
  for (int64_t j = 0; j < coords.cols; ++j) {
    double lo = coords.at(0, j), hi = lo;
    for (int64_t i = 0; i < coords.rows; ++i) {
      double x = coords.at(i, j);
      if (!std::isfinite(x)) fail(ErrorKind::data, "rescale_coords: non-finite coordinate");
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    t.lo[size_t(j)] = lo;
    t.scale[size_t(j)] = hi > lo ? target_extent / (hi - lo) : 0.0;
  }
  return t;
}

void RescaleTransform::apply_in_place(Array2D& coords) const {
  for (int64_t i = 0; i < coords.rows; ++i)
    for (int64_t j = 0; j < coords.cols; ++j) {
      const double s = scale[size_t(j)];
      coords.at(i, j) = s == 0.0 ? extent / 2.0 : (coords.at(i, j) - lo[size_t(j)]) * s;
    }
}

Array2D RescaleTransform::apply(const Array2D& coords) const {
  Array2D out = coords;
  apply_in_place(out);
  return out;
}

Array2D rescale_coords(const Array2D& coords, double target_extent) {
  return fit_rescale(coords, target_extent).apply(coords);
}

namespace {

bool same_point(const Array2D& a, int64_t i, const Array2D& b, int64_t j) {
  for (int64_t c = 0; c < a.cols; ++c)
    if (a.at(i, c) != b.at(j, c)) return false;
  return true;
}

double sq_dist(const Array2D& a, int64_t i, const Array2D& b, int64_t j) {
  double d2 = 0;
  for (int64_t c = 0; c < a.cols; ++c) {
    double d = a.at(i, c) - b.at(j, c);
    d2 += d * d;
  }
  return d2;
}

}  // namespace

SupernodeSet sample_supernodes(const Array2D& cloud_coords, int64_t n_supernodes,
                               SupernodeStrategy strategy, const Array2D& anchors,
                               uint64_t seed) {
  const int64_t n_points = cloud_coords.rows;
  const int64_t n_anchors = anchors.rows;
  if (n_supernodes > n_points)
    fail(ErrorKind::data, "sample_supernodes: requested " + std::to_string(n_supernodes) +
                              " supernodes from " + std::to_string(n_points) + " points");
  if (n_anchors > n_supernodes)
    fail(ErrorKind::data, "sample_supernodes: more anchors than supernodes");
  if (n_supernodes < 1) fail(ErrorKind::data, "sample_supernodes: need at least one supernode");

  SupernodeSet out;
  out.coords = Array2D(n_supernodes, cloud_coords.cols);
  out.anchor_mask.assign(size_t(n_supernodes), 0);
  for (int64_t a = 0; a < n_anchors; ++a) {
    for (int64_t j = 0; j < cloud_coords.cols; ++j) out.coords.at(a, j) = anchors.at(a, j);
    out.anchor_mask[size_t(a)] = 1;
  }

  // Selection works on the canonically ordered cloud so the result depends on
  // geometry and seed only, never on storage order. Points coinciding with an
  // anchor are excluded so anchor coordinates appear exactly once.
  const std::vector<int64_t> order = canonical_order(cloud_coords);
  std::vector<int64_t> pool;
  pool.reserve(size_t(n_points));
  for (int64_t rank = 0; rank < n_points; ++rank) {
    const int64_t idx = order[size_t(rank)];
    bool is_anchor = false;
    for (int64_t a = 0; a < n_anchors && !is_anchor; ++a)
      is_anchor = same_point(cloud_coords, idx, anchors, a);
    if (!is_anchor) pool.push_back(idx);
  }
  const int64_t wanted = n_supernodes - n_anchors;
  if (wanted > int64_t(pool.size()))
    fail(ErrorKind::data, "sample_supernodes: not enough distinct points outside anchors");

  Rng rng(derive_seed(seed, 0x5e1ec7));
  std::vector<int64_t> chosen_ranks;  // positions within `pool`
  if (strategy == SupernodeStrategy::seeded_uniform) {
    chosen_ranks = rng.sample_without_replacement(int64_t(pool.size()), wanted);
  } else {
    // farthest-point: greedy max-min distance to everything already selected
    // (anchors included); ties resolved toward the lower canonical rank.
    std::vector<double> best(pool.size(), HUGE_VAL);
    std::vector<uint8_t> taken(pool.size(), 0);
    auto update_from_cloud = [&](int64_t pool_rank) {
      for (size_t r = 0; r < pool.size(); ++r)
        if (!taken[r])
          best[r] = std::min(best[r],
                             sq_dist(cloud_coords, pool[r], cloud_coords, pool[size_t(pool_rank)]));
    };
    for (int64_t a = 0; a < n_anchors; ++a)
      for (size_t r = 0; r < pool.size(); ++r)
        best[r] = std::min(best[r], sq_dist(cloud_coords, pool[r], anchors, a));
    for (int64_t pick = 0; pick < wanted; ++pick) {
      int64_t choice = -1;
      if (pick == 0 && n_anchors == 0) {
        choice = int64_t(rng.below(uint64_t(pool.size())));
      } else {
        double best_d = -1.0;
        for (size_t r = 0; r < pool.size(); ++r) {
          if (taken[r]) continue;
          if (best[r] > best_d) {
            best_d = best[r];
            choice = int64_t(r);
          }
        }
      }
      taken[size_t(choice)] = 1;
      chosen_ranks.push_back(choice);
      update_from_cloud(choice);
    }
  }
  std::sort(chosen_ranks.begin(), chosen_ranks.end());  // canonical slot order
  for (int64_t k = 0; k < wanted; ++k) {
    const int64_t idx = pool[size_t(chosen_ranks[size_t(k)])];
    for (int64_t j = 0; j < cloud_coords.cols; ++j)
      out.coords.at(n_anchors + k, j) = cloud_coords.at(idx, j);
  }
  return out;
}

RadiusGraph build_radius_graph(const Array2D& cloud_coords, const Array2D& centers,
                               double radius, int64_t max_neighbors, uint64_t seed) {
  if (radius <= 0) fail(ErrorKind::data, "build_radius_graph: radius must be positive");
  if (max_neighbors < 1) fail(ErrorKind::data, "build_radius_graph: max_neighbors must be >= 1");
  const int64_t dim = cloud_coords.cols;
  RadiusGraph graph;
  graph.radius = radius;
  graph.max_neighbors = max_neighbors;
  graph.dim = dim;
  graph.isolated.assign(size_t(centers.rows), 0);

  const std::vector<int64_t> order = canonical_order(cloud_coords);
  const double r2 = radius * radius;
  std::vector<int64_t> candidates;  // canonical ranks
  for (int64_t c = 0; c < centers.rows; ++c) {
    candidates.clear();
    for (int64_t rank = 0; rank < cloud_coords.rows; ++rank) {
      const int64_t idx = order[size_t(rank)];
      if (sq_dist(cloud_coords, idx, centers, c) <= r2) candidates.push_back(rank);
    }
    if (candidates.empty()) {
      graph.isolated[size_t(c)] = 1;
      continue;
    }
    if (int64_t(candidates.size()) > max_neighbors) {
      // cap overflow: seeded uniform subsample of the candidate set
      Rng rng(derive_seed(seed, 0x9c0de, uint64_t(c)));
      auto keep = rng.sample_without_replacement(int64_t(candidates.size()), max_neighbors);
      std::sort(keep.begin(), keep.end());
      std::vector<int64_t> capped;
      capped.reserve(size_t(max_neighbors));
      for (int64_t k : keep) capped.push_back(candidates[size_t(k)]);
      candidates.swap(capped);
    }
    for (int64_t rank : candidates) {
      const int64_t idx = order[size_t(rank)];
      graph.edges.push_back({c, idx});
      double d2 = 0;
      for (int64_t j = 0; j < dim; ++j) {
        const double off = cloud_coords.at(idx, j) - centers.at(c, j);
        graph.offsets.push_back(off);
        d2 += off * off;
      }
      graph.distances.push_back(std::sqrt(d2));
    }
  }
  return graph;
}

std::vector<double> sinusoidal_pe(double value, int64_t dim, double base_period) {
  if (dim < 2 || dim % 2 != 0)
    fail(ErrorKind::data, "sinusoidal_pe: dimension must be even and >= 2, got " +
                              std::to_string(dim));
  std::vector<double> out(static_cast<size_t>(dim));
  for (int64_t k = 0; k < dim / 2; ++k) {
    const double freq = value / std::pow(base_period, double(2 * k) / double(dim));
    out[size_t(2 * k)] = std::sin(freq);
    out[size_t(2 * k + 1)] = std::cos(freq);
  }
  return out;
}

GridInterp grid_interp(const Array2D& coords, int64_t grid_size, double extent) {
  if (grid_size < 2) fail(ErrorKind::data, "grid_interp: grid size must be >= 2 per axis");
  if (extent <= 0) fail(ErrorKind::data, "grid_interp: extent must be positive");
  const int64_t dim = coords.cols;
  const int64_t corners = int64_t(1) << dim;
  GridInterp gi;
  gi.n = coords.rows;
  gi.corners = corners;
  gi.indices.resize(size_t(gi.n * corners));
  gi.weights.resize(size_t(gi.n * corners));

  std::vector<int64_t> stride(static_cast<size_t>(dim));
  int64_t s = 1;
  for (int64_t a = dim - 1; a >= 0; --a) {
    stride[size_t(a)] = s;
    s *= grid_size;
  }
  std::vector<int64_t> cell(static_cast<size_t>(dim));
  std::vector<double> frac(static_cast<size_t>(dim));
  for (int64_t i = 0; i < gi.n; ++i) {
    for (int64_t a = 0; a < dim; ++a) {
      double x = coords.at(i, a);
      x = std::min(std::max(x, 0.0), extent);  // boundary queries clamp
      double u = x / extent * double(grid_size - 1);
      int64_t i0 = std::min(int64_t(std::floor(u)), grid_size - 2);
      cell[size_t(a)] = i0;
      frac[size_t(a)] = u - double(i0);
    }
    for (int64_t b = 0; b < corners; ++b) {
      int64_t index = 0;
      double weight = 1.0;
      for (int64_t a = 0; a < dim; ++a) {
        const int bit = int((b >> (dim - 1 - a)) & 1);
        index += (cell[size_t(a)] + bit) * stride[size_t(a)];
        weight *= bit ? frac[size_t(a)] : 1.0 - frac[size_t(a)];
      }
      gi.indices[size_t(i * corners + b)] = index;
      gi.weights[size_t(i * corners + b)] = weight;
    }
  }
  return gi;
}

Tensor grid_pe(const Tensor& table, const Array2D& coords, int64_t grid_size, double extent) {
  GridInterp gi = grid_interp(coords, grid_size, extent);
  return index_weighted_sum(table, gi.indices, gi.weights, gi.n, gi.corners);
}

}  // namespace apt
