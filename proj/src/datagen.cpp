#include "apt/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "apt/dataio.hpp"
#include "apt/rng.hpp"

namespace apt {

FieldClass parse_field_class(const std::string& name) {
  if (name == "gaussian-continuous") return FieldClass::gaussian_continuous;
  if (name == "gaussian-binary") return FieldClass::gaussian_binary;
  if (name == "von-karman-continuous") return FieldClass::von_karman_continuous;
  if (name == "von-karman-binary") return FieldClass::von_karman_binary;
  fail(ErrorKind::config, "unknown field class '" + name + "'");
}

const char* field_class_name(FieldClass c) {
  switch (c) {
    case FieldClass::gaussian_continuous: return "gaussian-continuous";
    case FieldClass::gaussian_binary: return "gaussian-binary";
    case FieldClass::von_karman_continuous: return "von-karman-continuous";
    default: return "von-karman-binary";
  }
}

double CoefficientField::interp(double x, double y) const {
  const double h = 1.0 / double(grid);
  // clamp into the cell-center lattice
  auto locate = [&](double v) {
    double u = v / h - 0.5;
    u = std::min(std::max(u, 0.0), double(grid - 1));
    int64_t i0 = std::min(int64_t(std::floor(u)), grid - 2);
    if (grid == 1) i0 = 0;
    return std::pair<int64_t, double>{i0, u - double(i0)};
  };
  auto [ix, fx] = locate(x);
  auto [iy, fy] = locate(y);
  if (grid == 1) return values[0];
  return (1 - fx) * (1 - fy) * at(ix, iy) + (1 - fx) * fy * at(ix, iy + 1) +
         fx * (1 - fy) * at(ix + 1, iy) + fx * fy * at(ix + 1, iy + 1);
}

namespace {

bool is_gaussian(FieldClass c) {
  return c == FieldClass::gaussian_continuous || c == FieldClass::gaussian_binary;
}
bool is_binary(FieldClass c) {
  return c == FieldClass::gaussian_binary || c == FieldClass::von_karman_binary;
}

}  // namespace

CoefficientField generate_field(FieldClass cls, const FieldParams& p, int64_t grid,
                                uint64_t seed) {
  if (p.corr_len <= 0) fail(ErrorKind::config, "field correlation length must be positive");
  CoefficientField field;
  field.grid = grid;
  field.field_class = cls;
  field.values.assign(size_t(grid * grid), 0.0);

  if (p.log_std == 0.0) {
    std::fill(field.values.begin(), field.values.end(), std::exp(p.log_mean));
    return field;
  }

  // Spectral density on the integer mode lattice (cycles per domain length).
  //   gaussian:   C(r) = exp(-r^2 / l^2)   ->  S(k) ~ exp(-pi^2 |k|^2 l^2)
  //   von Karman (2D Matern):                  S(k) ~ (1 + (2 pi |k| l)^2)^-(nu+1)
  const int64_t k_max = std::max<int64_t>(grid / 2, 2);
  struct Mode {
    double kx, ky, sigma, g1, g2;
  };
  std::vector<Mode> modes;
  double total_power = 0.0;
  for (int64_t kx = 0; kx <= k_max; ++kx) {
    for (int64_t ky = (kx == 0 ? 1 : -k_max); ky <= k_max; ++ky) {
      const double k2 = double(kx * kx + ky * ky);
      double s;
      if (is_gaussian(cls)) {
        const double pi2 = 9.869604401089358;
        s = std::exp(-pi2 * k2 * p.corr_len * p.corr_len);
      } else {
        const double two_pi = 6.283185307179586;
        const double kl2 = two_pi * two_pi * k2 * p.corr_len * p.corr_len;
        s = std::pow(1.0 + kl2, -(p.vk_smoothness + 1.0));
      }
      modes.push_back({double(kx), double(ky), s, 0.0, 0.0});
      total_power += s;
    }
  }
  Rng rng(derive_seed(seed, 0xf1e1d));
  for (Mode& m : modes) {
    m.sigma = std::sqrt(m.sigma / total_power);
    m.g1 = rng.normal();
    m.g2 = rng.normal();
  }

  const double two_pi = 6.283185307179586;
  const double h = 1.0 / double(grid);
  std::vector<double> gauss(size_t(grid * grid), 0.0);
  for (const Mode& m : modes) {
    const double amp1 = m.sigma * m.g1 * std::sqrt(2.0);
    const double amp2 = m.sigma * m.g2 * std::sqrt(2.0);
    for (int64_t ix = 0; ix < grid; ++ix) {
      const double x = (double(ix) + 0.5) * h;
      const double phase_x = two_pi * m.kx * x;
      for (int64_t iy = 0; iy < grid; ++iy) {
        const double y = (double(iy) + 0.5) * h;
        const double phase = phase_x + two_pi * m.ky * y;
        gauss[size_t(ix * grid + iy)] += amp1 * std::cos(phase) + amp2 * std::sin(phase);
      }
    }
  }

  if (is_binary(cls)) {
    std::vector<double> sorted = gauss;
    std::nth_element(sorted.begin(), sorted.begin() + int64_t(sorted.size()) / 2, sorted.end());
    const double median = sorted[sorted.size() / 2];
    const double lo = std::exp(p.log_mean - p.binary_contrast * p.log_std);
    const double hi = std::exp(p.log_mean + p.binary_contrast * p.log_std);
    for (size_t i = 0; i < gauss.size(); ++i)
      field.values[i] = gauss[i] > median ? hi : lo;
  } else {
    for (size_t i = 0; i < gauss.size(); ++i)
      field.values[i] = std::exp(p.log_mean + p.log_std * gauss[i]);
  }
  return field;
}

// ---------------------------------------------------------------------------
// solver

SolveResult solve_diffusion(const DiffusionScenario& s) {
  const int64_t n = s.coeff.grid;
  if (n < 2) fail(ErrorKind::config, "solver grid must be at least 2x2");
  if (s.snapshot_times.empty()) fail(ErrorKind::config, "no snapshot times requested");
  for (size_t i = 0; i < s.snapshot_times.size(); ++i) {
    if (s.snapshot_times[i] <= 0 ||
        (i > 0 && s.snapshot_times[i] <= s.snapshot_times[i - 1]))
      fail(ErrorKind::config, "snapshot times must be positive and strictly increasing");
  }
  const double h = 1.0 / double(n);
  const double cell_area = h * h;

  std::vector<double> u = s.initial;
  if (u.empty()) u.assign(size_t(n * n), 0.0);
  if (int64_t(u.size()) != n * n)
    fail(ErrorKind::data, "initial condition size does not match the grid");

  // harmonic-mean face coefficients
  auto harmonic = [](double a, double b) { return 2.0 * a * b / (a + b); };
  std::vector<double> face_x(size_t((n - 1) * n));  // between (ix,iy) and (ix+1,iy)
  std::vector<double> face_y(size_t(n * (n - 1)));  // between (ix,iy) and (ix,iy+1)
  for (int64_t ix = 0; ix + 1 < n; ++ix)
    for (int64_t iy = 0; iy < n; ++iy)
      face_x[size_t(ix * n + iy)] = harmonic(s.coeff.at(ix, iy), s.coeff.at(ix + 1, iy));
  for (int64_t ix = 0; ix < n; ++ix)
    for (int64_t iy = 0; iy + 1 < n; ++iy)
      face_y[size_t(ix * (n - 1) + iy)] = harmonic(s.coeff.at(ix, iy), s.coeff.at(ix, iy + 1));

  // monotone explicit step: dt * sum(face coeffs of a cell) <= safety * h^2
  double max_face_sum = 0.0;
  for (int64_t ix = 0; ix < n; ++ix)
    for (int64_t iy = 0; iy < n; ++iy) {
      double fsum = 0;
      if (ix > 0) fsum += face_x[size_t((ix - 1) * n + iy)];
      if (ix + 1 < n) fsum += face_x[size_t(ix * n + iy)];
      if (iy > 0) fsum += face_y[size_t(ix * (n - 1) + iy - 1)];
      if (iy + 1 < n) fsum += face_y[size_t(ix * (n - 1) + iy)];
      max_face_sum = std::max(max_face_sum, fsum);
    }
  const double dt_stable = s.cfl_safety * cell_area / max_face_sum;
  const double dt_base = s.dt_override > 0 ? s.dt_override : dt_stable;

  std::vector<int64_t> well_cells;
  for (const Well& w : s.wells) {
    int64_t ix = std::min<int64_t>(int64_t(w.x * double(n)), n - 1);
    int64_t iy = std::min<int64_t>(int64_t(w.y * double(n)), n - 1);
    well_cells.push_back(ix * n + iy);
  }

  SolveResult result;
  std::vector<double> next(u.size());
  double t = 0.0;
  double injected_total = 0.0;
  size_t snap = 0;
  const double blow_up = 1e12;

  while (snap < s.snapshot_times.size()) {
    const double target = s.snapshot_times[snap];
    const double dt = std::min(dt_base, target - t);

    bool sources_active = false;
    const double u_min = *std::min_element(u.begin(), u.end());
    const double u_max = *std::max_element(u.begin(), u.end());

    for (int64_t ix = 0; ix < n; ++ix)
      for (int64_t iy = 0; iy < n; ++iy) {
        const size_t c = size_t(ix * n + iy);
        double flux = 0;
        if (ix > 0) flux += face_x[size_t((ix - 1) * n + iy)] * (u[c - size_t(n)] - u[c]);
        if (ix + 1 < n) flux += face_x[size_t(ix * n + iy)] * (u[c + size_t(n)] - u[c]);
        if (iy > 0) flux += face_y[size_t(ix * (n - 1) + iy - 1)] * (u[c - 1] - u[c]);
        if (iy + 1 < n) flux += face_y[size_t(ix * (n - 1) + iy)] * (u[c + 1] - u[c]);
        next[c] = u[c] + dt * flux / cell_area;
      }
    for (size_t w = 0; w < s.wells.size(); ++w) {
      const Well& well = s.wells[w];
      if (t >= well.t_on && t < well.t_off && well.rate != 0.0) {
        sources_active = true;
        next[size_t(well_cells[w])] += dt * well.rate / cell_area;
        injected_total += dt * well.rate;
      }
    }
    u.swap(next);
    t += dt;
    ++result.steps;

    double new_min = *std::min_element(u.begin(), u.end());
    double new_max = *std::max_element(u.begin(), u.end());
    if (!std::isfinite(new_min) || !std::isfinite(new_max) || std::fabs(new_max) > blow_up ||
        std::fabs(new_min) > blow_up)
      fail(ErrorKind::numeric,
           "diffusion solver unstable (field blow-up) at step " + std::to_string(result.steps));
    if (!sources_active && (new_max > u_max + 1e-13 || new_min < u_min - 1e-13)) {
      ++result.max_principle_violations;
#ifndef NDEBUG
      fail(ErrorKind::numeric, "maximum principle violated at step " +
                                   std::to_string(result.steps));
#endif
    }

    if (t >= target - 1e-15 * std::max(1.0, target)) {
      result.snapshots.push_back(u);
      double mass = std::accumulate(u.begin(), u.end(), 0.0) * cell_area;
      result.mass.push_back(mass);
      result.injected.push_back(injected_total);
      ++snap;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// observation sampling

std::vector<double> adaptive_cell_weights(const std::vector<double>& field, int64_t grid,
                                          double alpha) {
  std::vector<double> grad(size_t(grid * grid), 0.0);
  double max_grad = 0.0;
  const double h = 1.0 / double(grid);
  for (int64_t ix = 0; ix < grid; ++ix)
    for (int64_t iy = 0; iy < grid; ++iy) {
      auto value = [&](int64_t a, int64_t b) {
        a = std::min(std::max<int64_t>(a, 0), grid - 1);
        b = std::min(std::max<int64_t>(b, 0), grid - 1);
        return field[size_t(a * grid + b)];
      };
      const double gx = (value(ix + 1, iy) - value(ix - 1, iy)) / (2 * h);
      const double gy = (value(ix, iy + 1) - value(ix, iy - 1)) / (2 * h);
      const double g = std::sqrt(gx * gx + gy * gy);
      grad[size_t(ix * grid + iy)] = g;
      max_grad = std::max(max_grad, g);
    }
  std::vector<double> weights(grad.size(), alpha);
  if (max_grad > 0)
    for (size_t i = 0; i < grad.size(); ++i) weights[i] = alpha + grad[i] / max_grad;
  return weights;
}

namespace {

Array2D well_anchor_coords(const DiffusionScenario& s) {
  Array2D anchors(int64_t(s.wells.size()), 2);
  for (size_t w = 0; w < s.wells.size(); ++w) {
    anchors.at(int64_t(w), 0) = s.wells[w].x;
    anchors.at(int64_t(w), 1) = s.wells[w].y;
  }
  return anchors;
}

Array2D node_features(const DiffusionScenario& s, const Array2D& coords) {
  const int64_t n_wells = int64_t(s.wells.size());
  Array2D features(coords.rows, 1 + n_wells);
  for (int64_t i = 0; i < coords.rows; ++i) {
    features.at(i, 0) = std::log(s.coeff.interp(coords.at(i, 0), coords.at(i, 1)));
    for (int64_t w = 0; w < n_wells; ++w) {
      const double dx = coords.at(i, 0) - s.wells[size_t(w)].x;
      const double dy = coords.at(i, 1) - s.wells[size_t(w)].y;
      features.at(i, 1 + w) = std::sqrt(dx * dx + dy * dy);
    }
  }
  return features;
}

Array2D interp_field(const std::vector<double>& field, int64_t grid, const Array2D& coords) {
  CoefficientField view;
  view.grid = grid;
  view.values = field;  // reuse the cell-centered bilinear interpolation
  Array2D out(coords.rows, 1);
  for (int64_t i = 0; i < coords.rows; ++i)
    out.at(i, 0) = view.interp(coords.at(i, 0), coords.at(i, 1));
  return out;
}

Array2D draw_uniform_nodes(const DiffusionScenario& s, int64_t n_nodes, Rng& rng) {
  const int64_t n_wells = int64_t(s.wells.size());
  Array2D coords(n_nodes, 2);
  for (int64_t w = 0; w < n_wells && w < n_nodes; ++w) {
    coords.at(w, 0) = s.wells[size_t(w)].x;
    coords.at(w, 1) = s.wells[size_t(w)].y;
  }
  for (int64_t i = n_wells; i < n_nodes; ++i) {
    coords.at(i, 0) = rng.uniform();
    coords.at(i, 1) = rng.uniform();
  }
  return coords;
}

Array2D draw_adaptive_nodes(const DiffusionScenario& s, const std::vector<double>& field,
                            int64_t n_nodes, double alpha, Rng& rng) {
  const int64_t grid = s.coeff.grid;
  const double h = 1.0 / double(grid);
  std::vector<double> weights = adaptive_cell_weights(field, grid, alpha);
  const int64_t n_wells = int64_t(s.wells.size());
  Array2D coords(n_nodes, 2);
  for (int64_t w = 0; w < n_wells && w < n_nodes; ++w) {
    coords.at(w, 0) = s.wells[size_t(w)].x;
    coords.at(w, 1) = s.wells[size_t(w)].y;
  }
  for (int64_t i = n_wells; i < n_nodes; ++i) {
    const size_t cell = rng.weighted_index(weights);
    const int64_t ix = int64_t(cell) / grid, iy = int64_t(cell) % grid;
    coords.at(i, 0) = (double(ix) + rng.uniform()) * h;
    coords.at(i, 1) = (double(iy) + rng.uniform()) * h;
  }
  return coords;
}

}  // namespace

PointCloudSample sample_observations(const DiffusionScenario& s, const SolveResult& r,
                                     const ObservationConfig& oc) {
  if (oc.n_nodes < 16) fail(ErrorKind::config, "observation clouds need at least 16 nodes");
  if (r.snapshots.size() != s.snapshot_times.size())
    fail(ErrorKind::data, "solve result does not match the scenario");
  Rng rng(derive_seed(oc.seed, 0x0b5e));
  PointCloudSample sample;
  sample.mode = oc.mode;
  sample.times = s.snapshot_times;
  sample.meta["anchors"] = encode_anchors(well_anchor_coords(s));

  const int64_t grid = s.coeff.grid;
  if (oc.mode == MeshMode::fixed) {
    sample.coords = draw_uniform_nodes(s, oc.n_nodes, rng);
    sample.features = node_features(s, sample.coords);
    for (const auto& snapshot : r.snapshots)
      sample.fields.push_back(interp_field(snapshot, grid, sample.coords));
  } else {
    for (size_t k = 0; k < r.snapshots.size(); ++k) {
      int64_t count = oc.n_nodes;
      if (oc.vary_adaptive_counts) {
        // emulate mesh-optimizer behavior: node counts drift per snapshot
        count = std::max<int64_t>(16, int64_t(double(oc.n_nodes) * rng.uniform(0.8, 1.2)));
      }
      Snapshot snap;
      snap.coords = draw_adaptive_nodes(s, r.snapshots[k], count, oc.adaptive_alpha, rng);
      snap.features = node_features(s, snap.coords);
      snap.fields = interp_field(r.snapshots[k], grid, snap.coords);
      sample.snapshots.push_back(std::move(snap));
    }
  }
  return sample;
}

// ---------------------------------------------------------------------------
// dataset builder

void DatagenConfig::validate() const {
  if (n_samples < 1) fail(ErrorKind::config, "data.n_samples must be >= 1");
  if (grid < 8) fail(ErrorKind::config, "data.grid must be >= 8");
  if (n_times < 1 || n_times > 0xffff) fail(ErrorKind::config, "data.n_times out of range");
  if (t_max <= 0) fail(ErrorKind::config, "data.t_max must be positive");
  if (nodes < 16) fail(ErrorKind::config, "data.nodes must be >= 16");
  if (dualres && nodes_full <= nodes)
    fail(ErrorKind::config, "data.nodes_full must exceed data.nodes for dual resolution");
  if (dualres && mode != MeshMode::fixed)
    fail(ErrorKind::config, "dual-resolution emission requires static meshes");
  if (n_wells < 1 || n_wells > 8) fail(ErrorKind::config, "data.n_wells out of range [1,8]");
  if (rate_min <= 0 || rate_max < rate_min) fail(ErrorKind::config, "invalid rate range");
  if (classes_train.empty() || classes_val.empty() || classes_test.empty())
    fail(ErrorKind::config, "every split needs at least one field class");
}

namespace {

struct SplitCounts {
  int64_t train = 0, val = 0, test = 0;
};

SplitCounts parse_split(const std::string& ratio, int64_t n) {
  std::istringstream is(ratio);
  std::string tok;
  std::vector<int64_t> parts;
  while (std::getline(is, tok, ':')) parts.push_back(std::stoll(tok));
  if (parts.size() != 3 || parts[0] < 1 || parts[1] < 0 || parts[2] < 0)
    fail(ErrorKind::config, "data.split must look like '8:1:1'");
  const int64_t total = parts[0] + parts[1] + parts[2];
  SplitCounts c;
  c.val = n * parts[1] / total;
  c.test = n * parts[2] / total;
  c.train = n - c.val - c.test;
  if (c.train < 1) fail(ErrorKind::config, "split leaves no training samples");
  return c;
}

std::string class_list_names(const std::vector<FieldClass>& classes) {
  std::string out;
  for (size_t i = 0; i < classes.size(); ++i)
    out += std::string(i ? "," : "") + field_class_name(classes[i]);
  return out;
}

}  // namespace

BuiltDataset build_dataset(const DatagenConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  SplitCounts counts = parse_split(cfg.split, cfg.n_samples);

  struct Plan {
    std::string split;
    FieldClass cls;
    uint64_t seed;
    int64_t index_in_split;
  };
  std::vector<Plan> plans;
  auto extend = [&](const std::string& split, uint64_t split_tag, int64_t count,
                    const std::vector<FieldClass>& classes) {
    for (int64_t i = 0; i < count; ++i) {
      const uint64_t seed = derive_seed(cfg.seed, split_tag, uint64_t(i));
      plans.push_back({split, classes[size_t(i) % classes.size()], seed, i});
    }
  };
  extend("train", 1, counts.train, cfg.classes_train);
  extend("val", 2, counts.val, cfg.classes_val);
  extend("test", 3, counts.test, cfg.classes_test);

  DatasetSchema schema;
  schema.dim = 2;
  schema.d_a = 1 + cfg.n_wells;  // log-coefficient plus one distance channel per well
  schema.d_z = 1;
  for (int64_t w = 0; w < cfg.n_wells; ++w)
    schema.scalar_names.push_back("rate" + std::to_string(w));

  auto make_dataset = [&](const std::string& split, const std::string& resolution) {
    Dataset ds;
    ds.schema = schema;
    ds.meta["dataset_id"] = cfg.name + (resolution == "full" ? ".full" : "");
    ds.meta["split"] = split;
    ds.meta["mode"] = cfg.mode == MeshMode::fixed ? "static" : "adaptive";
    ds.meta["oracle_grid"] = std::to_string(cfg.grid);
    ds.meta["domain"] = "0,0,1,1";
    ds.meta["t_max"] = std::to_string(cfg.t_max);
    ds.meta["n_wells"] = std::to_string(cfg.n_wells);
    ds.meta["nodes"] = std::to_string(resolution == "full" ? cfg.nodes_full : cfg.nodes);
    ds.meta["resolution"] = resolution;
    ds.meta["pair_id"] = cfg.name;
    return ds;
  };

  std::map<std::string, Dataset> sets;
  sets["train"] = make_dataset("train", "train");
  sets["val"] = make_dataset("val", "train");
  sets["test"] = make_dataset("test", "train");
  std::map<std::string, Dataset> sets_full;
  if (cfg.dualres) {
    sets_full["train"] = make_dataset("train", "full");
    sets_full["val"] = make_dataset("val", "full");
    sets_full["test"] = make_dataset("test", "full");
  }

  std::ostringstream manifest;
  manifest << "dataset " << cfg.name << "\n";
  manifest << "seed=" << cfg.seed << " n_samples=" << cfg.n_samples << " grid=" << cfg.grid
           << " nodes=" << cfg.nodes << " mode="
           << (cfg.mode == MeshMode::fixed ? "static" : "adaptive") << "\n";
  manifest << "classes.train=" << class_list_names(cfg.classes_train) << "\n";
  manifest << "classes.val=" << class_list_names(cfg.classes_val) << "\n";
  manifest << "classes.test=" << class_list_names(cfg.classes_test) << "\n";
  if (cfg.dualres) manifest << "dualres nodes_full=" << cfg.nodes_full << "\n";

  for (const Plan& plan : plans) {
    Rng scen_rng(derive_seed(plan.seed, 0x5ce11));
    DiffusionScenario scenario;
    scenario.coeff = generate_field(plan.cls, cfg.field, cfg.grid, derive_seed(plan.seed, 1));
    for (int64_t w = 0; w < cfg.n_wells; ++w) {
      Well well;
      well.x = scen_rng.uniform(0.2, 0.8);
      well.y = scen_rng.uniform(0.2, 0.8);
      well.rate = scen_rng.uniform(cfg.rate_min, cfg.rate_max);
      scenario.wells.push_back(well);
    }
    // irregularly spaced snapshot times within (0, t_max]
    for (int64_t k = 0; k < cfg.n_times; ++k) {
      const double jitter = scen_rng.uniform(-0.3, 0.3);
      scenario.snapshot_times.push_back(cfg.t_max * (double(k) + 1.0 + jitter) /
                                        double(cfg.n_times));
    }
    std::sort(scenario.snapshot_times.begin(), scenario.snapshot_times.end());
    scenario.snapshot_times.back() = std::min(scenario.snapshot_times.back(), cfg.t_max);

    SolveResult solved = solve_diffusion(scenario);

    ObservationConfig oc;
    oc.mode = cfg.mode;
    oc.adaptive_alpha = cfg.adaptive_alpha;
    oc.seed = derive_seed(plan.seed, 2);
    oc.n_nodes = cfg.dualres ? cfg.nodes_full : cfg.nodes;
    PointCloudSample full = sample_observations(scenario, solved, oc);
    for (int64_t w = 0; w < cfg.n_wells; ++w)
      full.scalars.push_back(scenario.wells[size_t(w)].rate);
    full.meta["class"] = field_class_name(plan.cls);
    full.meta["scenario"] = plan.split + "-" + std::to_string(plan.index_in_split);
    full.meta["seed"] = std::to_string(plan.seed);

    if (cfg.dualres) {
      // the subsampled cloud is a prefix of the full node list (wells first),
      // so the training-resolution node set is a subset of the full one
      PointCloudSample sub = full;
      sub.coords = Array2D(cfg.nodes, 2);
      sub.features = Array2D(cfg.nodes, full.features.cols);
      for (int64_t i = 0; i < cfg.nodes; ++i) {
        for (int64_t j = 0; j < 2; ++j) sub.coords.at(i, j) = full.coords.at(i, j);
        for (int64_t j = 0; j < full.features.cols; ++j)
          sub.features.at(i, j) = full.features.at(i, j);
      }
      sub.fields.clear();
      for (const Array2D& f : full.fields) {
        Array2D sf(cfg.nodes, f.cols);
        for (int64_t i = 0; i < cfg.nodes; ++i)
          for (int64_t j = 0; j < f.cols; ++j) sf.at(i, j) = f.at(i, j);
        sub.fields.push_back(std::move(sf));
      }
      sets[plan.split].samples.push_back(std::move(sub));
      sets_full[plan.split].samples.push_back(std::move(full));
    } else {
      sets[plan.split].samples.push_back(std::move(full));
    }

    manifest << plan.split << " id=" << plan.index_in_split << " class="
             << field_class_name(plan.cls) << " seed=" << plan.seed << "\n";
  }

  BuiltDataset built;
  for (const std::string& split : {"train", "val", "test"}) {
    const std::string path = out_dir + "/" + split + ".aptds";
    write_dataset(path, sets[split]);
    built.files.push_back(path);
    if (cfg.dualres) {
      const std::string full_path = out_dir + "/" + split + "_full.aptds";
      write_dataset(full_path, sets_full[split]);
      built.files.push_back(full_path);
    }
  }
  built.manifest = manifest.str();
  {
    std::ofstream mf(out_dir + "/manifest.txt", std::ios::trunc);
    mf << built.manifest;
  }
  return built;
}

}  // namespace apt
