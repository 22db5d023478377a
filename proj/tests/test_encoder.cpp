#include <doctest.h>

#include <cmath>
#include <vector>

#include "apt/encoder.hpp"

using namespace apt;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.dim = 2;
  cfg.d_a = 2;
  cfg.d_z = 1;
  cfg.d_h = 6;
  cfg.d_e = 4;
  cfg.n_heads = 1;
  cfg.n_supernodes = 3;
  cfg.n_latent = 2;
  cfg.n_enc = 1;
  cfg.n_enc_post = 0;
  cfg.pe_grid = 3;
  cfg.pe_time_dim = 4;
  cfg.mlp_ratio = 2;
  cfg.radius = 300.0;  // everything within reach, no cap pressure
  cfg.max_neighbors = 64;
  return cfg;
}

Array2D random_cloud(Rng& rng, int64_t n, int64_t dim, double extent = 200.0) {
  Array2D a(n, dim);
  for (auto& v : a.v) v = rng.uniform(0, extent);
  return a;
}

Array2D empty_anchors(int64_t dim) { return Array2D(0, dim); }

// ------- plain-loop reference for the full encoder pipeline (1 head) -------

using Rows = std::vector<std::vector<double>>;

Rows linear_ref(const Rows& x, const Linear& l) {
  const int64_t in = l.w.extent(0), out = l.w.extent(1);
  Rows y(x.size(), std::vector<double>(size_t(out), 0.0));
  for (size_t i = 0; i < x.size(); ++i)
    for (int64_t j = 0; j < out; ++j) {
      double acc = l.b.defined() ? l.b.item(j) : 0.0;
      for (int64_t k = 0; k < in; ++k) acc += x[i][size_t(k)] * l.w.item(k * out + j);
      y[i][size_t(j)] = acc;
    }
  return y;
}

Rows gelu_ref(Rows x) {
  for (auto& row : x)
    for (double& v : row) v = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x;
}

Rows mlp_ref(const Rows& x, const Mlp& m) { return linear_ref(gelu_ref(linear_ref(x, m.fc1)), m.fc2); }

Rows attention_ref(const Rows& q_in, const Rows& kv, const MultiHeadAttentionParams& p) {
  const int64_t d = p.d_h;
  Rows q = linear_ref(q_in, p.wq), k = linear_ref(kv, p.wk), v = linear_ref(kv, p.wv);
  Rows ctx(q.size(), std::vector<double>(size_t(d), 0.0));
  for (size_t i = 0; i < q.size(); ++i) {
    std::vector<double> scores(k.size());
    double maxv = -1e300;
    for (size_t j = 0; j < k.size(); ++j) {
      double s = 0;
      for (int64_t c = 0; c < d; ++c) s += q[i][size_t(c)] * k[j][size_t(c)];
      scores[j] = s / std::sqrt(double(d));
      maxv = std::max(maxv, scores[j]);
    }
    double total = 0;
    for (double& s : scores) {
      s = std::exp(s - maxv);
      total += s;
    }
    for (size_t j = 0; j < k.size(); ++j)
      for (int64_t c = 0; c < d; ++c) ctx[i][size_t(c)] += scores[j] / total * v[j][size_t(c)];
  }
  return linear_ref(ctx, p.wo);
}

Rows layer_norm_ref(const Rows& x) {
  Rows y = x;
  for (auto& row : y) {
    double mean = 0;
    for (double v : row) mean += v;
    mean /= double(row.size());
    double var = 0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= double(row.size());
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (double& v : row) v = (v - mean) * inv;
  }
  return y;
}

Rows dit_block_ref(const Rows& x, const std::vector<double>& cond_vec,
                   const DitBlockParams& block) {
  const int64_t d = block.attn.d_h;
  Rows cond_in = {cond_vec};
  Rows six = linear_ref(gelu_ref(cond_in), block.cond);
  auto seg = [&](int64_t s) {
    return std::vector<double>(six[0].begin() + s * d, six[0].begin() + (s + 1) * d);
  };
  auto shift_a = seg(0), scale_a = seg(1), gate_a = seg(2);
  auto shift_m = seg(3), scale_m = seg(4), gate_m = seg(5);
  auto modulate = [&](const Rows& h, const std::vector<double>& sh,
                      const std::vector<double>& sc) {
    Rows n = layer_norm_ref(h);
    for (auto& row : n)
      for (size_t j = 0; j < row.size(); ++j) row[j] = row[j] * (1.0 + sc[j]) + sh[j];
    return n;
  };
  Rows attn_out = attention_ref(modulate(x, shift_a, scale_a), modulate(x, shift_a, scale_a),
                                block.attn);
  Rows h = x;
  for (size_t i = 0; i < h.size(); ++i)
    for (size_t j = 0; j < h[i].size(); ++j) h[i][j] += gate_a[j] * attn_out[i][j];
  Rows mlp_out = mlp_ref(modulate(h, shift_m, scale_m), block.mlp);
  for (size_t i = 0; i < h.size(); ++i)
    for (size_t j = 0; j < h[i].size(); ++j) h[i][j] += gate_m[j] * mlp_out[i][j];
  return h;
}

Rows grid_pe_ref(const Tensor& table, const Array2D& coords, int64_t grid, double extent) {
  GridInterp gi = grid_interp(coords, grid, extent);
  const int64_t d = table.extent(1);
  Rows out(size_t(coords.rows), std::vector<double>(size_t(d), 0.0));
  for (int64_t i = 0; i < gi.n; ++i)
    for (int64_t c = 0; c < gi.corners; ++c)
      for (int64_t j = 0; j < d; ++j)
        out[size_t(i)][size_t(j)] += gi.weights[size_t(i * gi.corners + c)] *
                                     table.item(gi.indices[size_t(i * gi.corners + c)] * d + j);
  return out;
}

Rows tensor_rows(const Tensor& t) {
  Rows out(size_t(t.extent(0)), std::vector<double>(size_t(t.extent(1))));
  for (int64_t i = 0; i < t.extent(0); ++i)
    for (int64_t j = 0; j < t.extent(1); ++j) out[size_t(i)][size_t(j)] = t.item(i * t.extent(1) + j);
  return out;
}

// straight-line recomputation of encode() from the same parameters
Rows ref_encode(const EncoderParams& p, const ModelConfig& cfg, const Array2D& coords_in,
                const Array2D& features_in, const std::vector<double>& cond_vec,
                uint64_t seed) {
  auto order = canonical_order(coords_in, &features_in);
  Array2D coords(coords_in.rows, coords_in.cols), features(features_in.rows, features_in.cols);
  for (int64_t i = 0; i < coords.rows; ++i) {
    for (int64_t j = 0; j < coords.cols; ++j) coords.at(i, j) = coords_in.at(order[size_t(i)], j);
    for (int64_t j = 0; j < features.cols; ++j)
      features.at(i, j) = features_in.at(order[size_t(i)], j);
  }
  // embed: W_f a + p(x) + proj(cond)
  Rows feat = tensor_rows(features.tensor());
  Rows h0 = linear_ref(feat, p.input_proj);
  Rows pe = grid_pe_ref(p.pe.table, coords, cfg.pe_grid, cfg.extent);
  Rows cond_proj = linear_ref({cond_vec}, p.cond_proj);
  for (size_t i = 0; i < h0.size(); ++i)
    for (size_t j = 0; j < h0[i].size(); ++j) h0[i][j] += pe[i][j] + cond_proj[0][j];

  SupernodeSet sn = sample_supernodes(coords, cfg.n_supernodes, cfg.strategy,
                                      empty_anchors(cfg.dim), derive_seed(seed, 1));
  RadiusGraph graph = build_radius_graph(coords, sn.coords, cfg.radius, cfg.max_neighbors,
                                         derive_seed(seed, 2));

  // global branch
  Rows queries = grid_pe_ref(p.pe.table, sn.coords, cfg.pe_grid, cfg.extent);
  for (size_t i = 0; i < queries.size(); ++i)
    for (size_t j = 0; j < queries[i].size(); ++j)
      queries[i][j] += p.query_offsets.item(int64_t(i) * cfg.d_h + int64_t(j));
  Rows v_attn = attention_ref(queries, h0, p.global_attn);

  // local branch
  Rows v_gno(size_t(cfg.n_supernodes), std::vector<double>(size_t(cfg.d_h), 0.0));
  std::vector<int64_t> counts(size_t(cfg.n_supernodes), 0);
  {
    Rows edge_in;
    for (size_t e = 0; e < graph.edges.size(); ++e) {
      std::vector<double> row = h0[size_t(graph.edges[e].member)];
      for (int64_t j = 0; j < cfg.dim; ++j) row.push_back(graph.offsets[e * 2 + size_t(j)]);
      row.push_back(graph.distances[e]);
      edge_in.push_back(std::move(row));
    }
    Rows edge_out = edge_in.empty() ? Rows{} : mlp_ref(edge_in, p.gno_kernel);
    for (size_t e = 0; e < graph.edges.size(); ++e) {
      const int64_t c = graph.edges[e].center;
      ++counts[size_t(c)];
      for (int64_t j = 0; j < cfg.d_h; ++j) v_gno[size_t(c)][size_t(j)] += edge_out[e][size_t(j)];
    }
    for (int64_t c = 0; c < cfg.n_supernodes; ++c)
      if (counts[size_t(c)] > 0)
        for (int64_t j = 0; j < cfg.d_h; ++j) v_gno[size_t(c)][size_t(j)] /= double(counts[size_t(c)]);
  }

  // gate fuse
  Rows fused(size_t(cfg.n_supernodes), std::vector<double>(size_t(cfg.d_h), 0.0));
  for (int64_t c = 0; c < cfg.n_supernodes; ++c)
    for (int64_t j = 0; j < cfg.d_h; ++j) {
      double g = 1.0 / (1.0 + std::exp(-p.gate_logits.item(j)));
      fused[size_t(c)][size_t(j)] = g * v_attn[size_t(c)][size_t(j)] +
                                    (1.0 - g) * v_gno[size_t(c)][size_t(j)];
    }

  Rows tokens = fused;
  for (const DitBlockParams& block : p.blocks) tokens = dit_block_ref(tokens, cond_vec, block);
  Rows pooled = attention_ref(tensor_rows(p.pool_queries), tokens, p.pool_attn);
  return pooled;
}

}  // namespace

TEST_CASE("embed_inputs composes projection, positional encoding and conditioning") {
  Rng rng(21);
  ModelConfig cfg = small_config();
  EncoderParams p = make_encoder(cfg, rng);
  Array2D coords = random_cloud(rng, 4, 2);
  Array2D features = random_cloud(rng, 4, 2, 1.0);
  Tensor cond = Tensor::randn({1, cfg.d_e}, rng);

  // zero projections leave only the positional encodings
  EncoderParams zeroed = p;
  zeroed.input_proj = make_zero_linear(cfg.d_a, cfg.d_h, Dtype::f64, false);
  zeroed.cond_proj = make_zero_linear(cfg.d_e, cfg.d_h, Dtype::f64, false);
  Tensor h0 = embed_inputs(zeroed, coords, features, cond);
  Tensor pe_only = zeroed.pe.encode(coords);
  CHECK(h0.to_vector() == pe_only.to_vector());

  // equal nodes embed equally
  Array2D dup(2, 2), dup_feat(2, 2);
  for (int64_t j = 0; j < 2; ++j) {
    dup.at(0, j) = dup.at(1, j) = coords.at(0, j);
    dup_feat.at(0, j) = dup_feat.at(1, j) = features.at(0, j);
  }
  Tensor h_dup = embed_inputs(p, dup, dup_feat, cond);
  for (int64_t j = 0; j < cfg.d_h; ++j) CHECK(h_dup.item(j) == h_dup.item(cfg.d_h + j));

  // hand-composed sum of the three terms
  Tensor full = embed_inputs(p, coords, features, cond);
  Tensor wf_term = p.input_proj.apply(features.tensor());
  Tensor pe_term = p.pe.encode(coords);
  Tensor cond_term = p.cond_proj.apply(cond);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < cfg.d_h; ++j) {
      double expect = wf_term.item(i * cfg.d_h + j) + pe_term.item(i * cfg.d_h + j) +
                      cond_term.item(j);
      CHECK(full.item(i * cfg.d_h + j) == doctest::Approx(expect).epsilon(1e-12));
    }

  // feature width mismatch is a schema error
  CHECK_THROWS_AS(embed_inputs(p, coords, random_cloud(rng, 4, 3), cond), Error);
}

TEST_CASE("global branch is convex over identical embeddings and ignores node order") {
  Rng rng(22);
  ModelConfig cfg = small_config();
  EncoderParams p = make_encoder(cfg, rng);
  // identical node embeddings: every supernode sees the value projection of u
  Tensor u = Tensor::randn({1, cfg.d_h}, rng);
  std::vector<Tensor> rows(5, u);
  Tensor h0 = concat_rows(rows);
  EncoderParams probe = p;
  probe.global_attn.wo.w = Tensor::zeros({cfg.d_h, cfg.d_h});
  for (int64_t i = 0; i < cfg.d_h; ++i) probe.global_attn.wo.w.set_item(i * cfg.d_h + i, 1.0);
  probe.global_attn.wo.b = Tensor::zeros({cfg.d_h});
  Array2D centers = random_cloud(rng, 3, 2);
  Tensor v_attn = global_branch(probe, h0, centers);
  Tensor value = probe.global_attn.wv.apply(u);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t j = 0; j < cfg.d_h; ++j)
      CHECK(v_attn.item(c * cfg.d_h + j) == doctest::Approx(value.item(j)).epsilon(1e-12));

  // permuting the node axis leaves the branch output unchanged
  Tensor h_rand = Tensor::randn({6, cfg.d_h}, rng);
  Tensor base = global_branch(p, h_rand, centers);
  std::vector<int64_t> perm = {5, 2, 0, 4, 1, 3};
  Tensor permuted_out = global_branch(p, gather_rows(h_rand, perm), centers);
  for (int64_t i = 0; i < base.numel(); ++i)
    CHECK(permuted_out.item(i) == doctest::Approx(base.item(i)).epsilon(1e-12));
}

TEST_CASE("local branch aggregates neighborhood kernels by mean") {
  Rng rng(23);
  ModelConfig cfg = small_config();
  EncoderParams p = make_encoder(cfg, rng);
  const int64_t d = cfg.d_h;

  // pass-through kernel: project out the member embedding exactly
  Mlp passthrough;
  passthrough.fc1.w = Tensor::zeros({d + 3, d});
  for (int64_t i = 0; i < d; ++i) passthrough.fc1.w.set_item(i * d + i, 1.0);
  passthrough.fc1.b = Tensor::full({d}, 30.0);
  passthrough.fc2.w = Tensor::zeros({d, d});
  for (int64_t i = 0; i < d; ++i) passthrough.fc2.w.set_item(i * d + i, 1.0);
  passthrough.fc2.b = Tensor::full({d}, -30.0);

  EncoderParams probe = p;
  probe.gno_kernel = passthrough;

  Tensor h0 = Tensor::randn({2, d}, rng);
  RadiusGraph graph;
  graph.dim = 2;
  graph.radius = 1.0;
  graph.max_neighbors = 8;
  graph.isolated = {0, 1};

  // single member per center
  graph.edges = {{0, 0}, {1, 1}};
  graph.offsets = {0.1, 0.0, 0.0, 0.2};
  graph.distances = {0.1, 0.2};
  Tensor single = local_branch(probe, h0, graph, 2);
  for (int64_t i = 0; i < 2 * d; ++i)
    CHECK(single.item(i) == doctest::Approx(h0.item(i)).epsilon(1e-9));

  // two members with embeddings u, v -> (u+v)/2
  graph.edges = {{0, 0}, {0, 1}};
  Tensor mean2 = local_branch(probe, h0, graph, 2);
  for (int64_t j = 0; j < d; ++j)
    CHECK(mean2.item(j) == doctest::Approx(0.5 * (h0.item(j) + h0.item(d + j))).epsilon(1e-9));
  for (int64_t j = 0; j < d; ++j) CHECK(mean2.item(d + j) == 0.0);  // empty center masked to zero

  // random graph vs brute-force per-center averaging of kernel outputs
  Tensor h6 = Tensor::randn({6, d}, rng);
  RadiusGraph g6;
  g6.dim = 2;
  g6.radius = 2.0;
  g6.max_neighbors = 8;
  g6.isolated = {0, 0, 0};
  g6.edges = {{0, 1}, {0, 4}, {1, 0}, {1, 2}, {1, 5}, {2, 3}};
  for (size_t e = 0; e < g6.edges.size(); ++e) {
    g6.offsets.push_back(rng.uniform(-1, 1));
    g6.offsets.push_back(rng.uniform(-1, 1));
    double dx = g6.offsets[2 * e], dy = g6.offsets[2 * e + 1];
    g6.distances.push_back(std::sqrt(dx * dx + dy * dy));
  }
  Tensor out = local_branch(p, h6, g6, 3);
  Rows h_rows = tensor_rows(h6);
  Rows acc(3, std::vector<double>(size_t(d), 0.0));
  std::vector<int> counts(3, 0);
  for (size_t e = 0; e < g6.edges.size(); ++e) {
    std::vector<double> row = h_rows[size_t(g6.edges[e].member)];
    row.push_back(g6.offsets[2 * e]);
    row.push_back(g6.offsets[2 * e + 1]);
    row.push_back(g6.distances[e]);
    Rows one = {row};
    Rows k = mlp_ref(one, p.gno_kernel);
    ++counts[size_t(g6.edges[e].center)];
    for (int64_t j = 0; j < d; ++j) acc[size_t(g6.edges[e].center)][size_t(j)] += k[0][size_t(j)];
  }
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t j = 0; j < d; ++j)
      CHECK(out.item(c * d + j) ==
            doctest::Approx(acc[size_t(c)][size_t(j)] / counts[size_t(c)]).epsilon(1e-10));
}

TEST_CASE("gated fusion blends and saturates") {
  Tensor v_attn = Tensor::from({1, 2}, std::vector<double>{2, 0});
  Tensor v_gno = Tensor::from({1, 2}, std::vector<double>{0, 2});

  Tensor mid = gated_fuse(v_attn, v_gno, Tensor::zeros({2}));
  CHECK(mid.item(0) == doctest::Approx(1.0));
  CHECK(mid.item(1) == doctest::Approx(1.0));

  Tensor hi = gated_fuse(v_attn, v_gno, Tensor::full({2}, 20.0));
  CHECK(std::fabs(hi.item(0) - 2.0) < 1e-8);
  CHECK(std::fabs(hi.item(1) - 0.0) < 1e-8);

  Tensor lo = gated_fuse(v_attn, v_gno, Tensor::full({2}, -20.0));
  CHECK(std::fabs(lo.item(0) - 0.0) < 1e-8);
  CHECK(std::fabs(lo.item(1) - 2.0) < 1e-8);

  CHECK_THROWS_AS(gated_fuse(v_attn, Tensor::zeros({2, 2}), Tensor::zeros({2})), Error);
}

TEST_CASE("encode matches the straight-line reference") {
  Rng rng(31);
  ModelConfig cfg = small_config();
  cfg.validate();
  EncoderParams p = make_encoder(cfg, rng);
  // wake the conditioning path so the test covers modulation too
  p.blocks[0].cond = make_linear(cfg.d_e, 6 * cfg.d_h, rng, Dtype::f64);

  Array2D coords = random_cloud(rng, 8, 2);
  Array2D features = random_cloud(rng, 8, 2, 1.0);
  Tensor cond = Tensor::randn({1, cfg.d_e}, rng);
  Array2D anchors = empty_anchors(2);

  Tensor z = encode(p, cfg, {coords, features, anchors}, cond, {77, Variant::fused});
  REQUIRE(z.extent(0) == cfg.n_latent);
  REQUIRE(z.extent(1) == cfg.d_h);

  Rows ref = ref_encode(p, cfg, coords, features, cond.to_vector(), 77);
  for (int64_t i = 0; i < cfg.n_latent; ++i)
    for (int64_t j = 0; j < cfg.d_h; ++j)
      CHECK(z.item(i * cfg.d_h + j) == doctest::Approx(ref[size_t(i)][size_t(j)]).epsilon(1e-10));
}

TEST_CASE("encode is bit-invariant to node permutations") {
  Rng rng(32);
  ModelConfig cfg = small_config();
  EncoderParams p = make_encoder(cfg, rng);
  p.blocks[0].cond = make_linear(cfg.d_e, 6 * cfg.d_h, rng, Dtype::f64);
  Array2D coords = random_cloud(rng, 10, 2);
  Array2D features = random_cloud(rng, 10, 2, 1.0);
  Tensor cond = Tensor::randn({1, cfg.d_e}, rng);
  Array2D anchors = empty_anchors(2);

  Tensor base = encode(p, cfg, {coords, features, anchors}, cond, {5, Variant::fused});
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int64_t> perm(10);
    for (int64_t i = 0; i < 10; ++i) perm[size_t(i)] = i;
    rng.shuffle(perm);
    Array2D pc(10, 2), pf(10, 2);
    for (int64_t i = 0; i < 10; ++i)
      for (int64_t j = 0; j < 2; ++j) {
        pc.at(i, j) = coords.at(perm[size_t(i)], j);
        pf.at(i, j) = features.at(perm[size_t(i)], j);
      }
    Tensor out = encode(p, cfg, {pc, pf, anchors}, cond, {5, Variant::fused});
    CHECK(out.to_vector() == base.to_vector());
  }
}

TEST_CASE("encode keeps the latent shape across cloud sizes") {
  Rng rng(33);
  ModelConfig cfg = small_config();
  EncoderParams p = make_encoder(cfg, rng);
  Tensor cond = Tensor::randn({1, cfg.d_e}, rng);
  Array2D anchors = empty_anchors(2);
  for (int64_t n : {3L, 6L, 12L, 30L}) {
    Array2D coords = random_cloud(rng, n, 2);
    Array2D features = random_cloud(rng, n, 2, 1.0);
    Tensor z = encode(p, cfg, {coords, features, anchors}, cond, {1, Variant::fused});
    CHECK(z.extent(0) == cfg.n_latent);
    CHECK(z.extent(1) == cfg.d_h);
  }

  // degenerate single supernode still produces the latent array
  ModelConfig tiny = cfg;
  tiny.n_supernodes = 1;
  EncoderParams p1 = make_encoder(tiny, rng);
  Array2D coords = random_cloud(rng, 1, 2);
  Array2D features = random_cloud(rng, 1, 2, 1.0);
  Tensor z = encode(p1, tiny, {coords, features, anchors}, cond, {1, Variant::fused});
  CHECK(z.extent(0) == tiny.n_latent);
  CHECK(z.extent(1) == tiny.d_h);
}

TEST_CASE("ablation variants equal gate clamping exactly and pure branches closely") {
  Rng rng(34);
  ModelConfig cfg = small_config();
  EncoderParams p = make_encoder(cfg, rng);
  p.blocks[0].cond = make_linear(cfg.d_e, 6 * cfg.d_h, rng, Dtype::f64);
  Array2D coords = random_cloud(rng, 9, 2);
  Array2D features = random_cloud(rng, 9, 2, 1.0);
  Tensor cond = Tensor::randn({1, cfg.d_e}, rng);
  Array2D anchors = empty_anchors(2);
  CloudView cloud{coords, features, anchors};

  Tensor global_variant = encode(p, cfg, cloud, cond, {9, Variant::global_only});
  EncoderParams clamped = p;
  clamped.gate_logits = Tensor::full({cfg.d_h}, 20.0);
  Tensor fused_clamped = encode(clamped, cfg, cloud, cond, {9, Variant::fused});
  CHECK(global_variant.to_vector() == fused_clamped.to_vector());

  // against a hand-built single-branch pipeline (no gate at all)
  auto pure_branch = [&](bool global) {
    auto order = canonical_order(coords, &features);
    Array2D sc(coords.rows, 2), sf(features.rows, 2);
    for (int64_t i = 0; i < coords.rows; ++i)
      for (int64_t j = 0; j < 2; ++j) {
        sc.at(i, j) = coords.at(order[size_t(i)], j);
        sf.at(i, j) = features.at(order[size_t(i)], j);
      }
    Tensor h0 = embed_inputs(p, sc, sf, cond);
    SupernodeSet sn = sample_supernodes(sc, cfg.n_supernodes, cfg.strategy, anchors,
                                        derive_seed(9, 1));
    Tensor tokens;
    if (global) {
      tokens = global_branch(p, h0, sn.coords);
    } else {
      RadiusGraph graph = build_radius_graph(sc, sn.coords, cfg.radius, cfg.max_neighbors,
                                             derive_seed(9, 2));
      tokens = local_branch(p, h0, graph, cfg.n_supernodes);
    }
    for (const DitBlockParams& block : p.blocks) tokens = dit_block(tokens, cond, block);
    return cross_attention(p.pool_queries, tokens, p.pool_attn);
  };

  // against a gateless single-branch pipeline: the clamp residue is ~2e-9 at
  // the fusion point; downstream blocks may amplify it by one order
  Tensor pure_global = pure_branch(true);
  double max_diff = 0;
  for (int64_t i = 0; i < pure_global.numel(); ++i)
    max_diff = std::max(max_diff, std::fabs(pure_global.item(i) - global_variant.item(i)));
  CHECK(max_diff < 1e-7);

  Tensor local_variant = encode(p, cfg, cloud, cond, {9, Variant::local_only});
  Tensor pure_local = pure_branch(false);
  max_diff = 0;
  for (int64_t i = 0; i < pure_local.numel(); ++i)
    max_diff = std::max(max_diff, std::fabs(pure_local.item(i) - local_variant.item(i)));
  CHECK(max_diff < 1e-7);

  // at the fusion point itself the gap stays below the 1e-8 contract
  Tensor va = Tensor::randn({4, cfg.d_h}, rng);
  Tensor vg = Tensor::randn({4, cfg.d_h}, rng);
  Tensor clamped_fuse = gated_fuse(va, vg, Tensor::full({cfg.d_h}, 20.0));
  for (int64_t i = 0; i < va.numel(); ++i)
    CHECK(std::fabs(clamped_fuse.item(i) - va.item(i)) < 1e-8);
}
