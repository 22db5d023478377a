#include "apt/encoder.hpp"

#include <cmath>

namespace apt {

PeKind parse_pe_kind(const std::string& name) {
  if (name == "grid") return PeKind::grid;
  if (name == "sinusoidal") return PeKind::sinusoidal;
  fail(ErrorKind::config, "unknown positional encoding kind '" + name + "'");
}

const char* pe_kind_name(PeKind k) { return k == PeKind::grid ? "grid" : "sinusoidal"; }

Variant parse_variant(const std::string& name) {
  if (name == "fused") return Variant::fused;
  if (name == "global-only") return Variant::global_only;
  if (name == "local-only") return Variant::local_only;
  fail(ErrorKind::config, "unknown model variant '" + name + "'");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::fused: return "fused";
    case Variant::global_only: return "global-only";
    default: return "local-only";
  }
}

void ModelConfig::validate() const {
  if (d_h < 2 || d_e < 2) fail(ErrorKind::config, "model: d_h and d_e must be >= 2");
  if (n_heads < 1 || d_h % n_heads != 0)
    fail(ErrorKind::config, "model: d_h must be divisible by n_heads");
  if (n_supernodes < 1 || n_latent < 1)
    fail(ErrorKind::config, "model: supernode and latent token counts must be positive");
  if (radius <= 0) fail(ErrorKind::config, "model: radius must be positive");
  if (max_neighbors < 1) fail(ErrorKind::config, "model: max_neighbors must be >= 1");
  if (extent <= 0) fail(ErrorKind::config, "model: extent must be positive");
  if (pe_kind == PeKind::grid && pe_grid < 2)
    fail(ErrorKind::config, "model: pe_grid must be >= 2");
  if (pe_kind == PeKind::sinusoidal) {
    if (d_h % dim != 0 || (d_h / dim) % 2 != 0)
      fail(ErrorKind::config,
           "model: sinusoidal spatial encoding needs d_h divisible by dim with even per-axis width");
  }
  if (pe_time_dim < 2 || pe_time_dim % 2 != 0)
    fail(ErrorKind::config, "model: pe_time_dim must be even and >= 2");
  if (mlp_ratio < 1) fail(ErrorKind::config, "model: mlp_ratio must be >= 1");
  if (n_enc < 0 || n_enc_post < 0 || n_app < 0 || n_dec < 1)
    fail(ErrorKind::config, "model: block counts out of range (n_dec must be >= 1)");
  if (n_latent > n_supernodes)
    log_warn("model: n_latent (" + std::to_string(n_latent) + ") exceeds n_supernodes (" +
             std::to_string(n_supernodes) + "); pooling will upsample");
}

SpatialPe make_spatial_pe(const ModelConfig& cfg, Rng& rng) {
  SpatialPe pe;
  pe.kind = cfg.pe_kind;
  pe.grid_size = cfg.pe_grid;
  pe.extent = cfg.extent;
  pe.d_h = cfg.d_h;
  pe.dim = cfg.dim;
  pe.dtype = cfg.dtype;
  if (cfg.pe_kind == PeKind::grid) {
    int64_t rows = 1;
    for (int64_t a = 0; a < cfg.dim; ++a) rows *= cfg.pe_grid;
    pe.table = Tensor::randn({rows, cfg.d_h}, rng, 0.02, cfg.dtype);
  }
  return pe;
}

Tensor SpatialPe::encode(const Array2D& coords) const {
  if (coords.cols != dim)
    fail(ErrorKind::data, "positional encoding: coordinate dimension mismatch");
  if (kind == PeKind::grid) return grid_pe(table, coords, grid_size, extent);
  // per-axis sinusoidal ladder, concatenated to d_h (non-learnable)
  const int64_t per_axis = d_h / dim;
  Tensor out = Tensor::zeros({coords.rows, d_h}, dtype);
  for (int64_t i = 0; i < coords.rows; ++i)
    for (int64_t a = 0; a < dim; ++a) {
      auto enc = sinusoidal_pe(coords.at(i, a), per_axis);
      for (int64_t j = 0; j < per_axis; ++j)
        out.set_item(i * d_h + a * per_axis + j, enc[size_t(j)]);
    }
  return out;
}

void EncoderParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  input_proj.visit(prefix + ".input", fn);
  pe.visit(prefix + ".pe", fn);
  cond_proj.visit(prefix + ".cond_proj", fn);
  global_attn.visit(prefix + ".global", fn);
  fn(prefix + ".query_offsets", query_offsets);
  gno_kernel.visit(prefix + ".gno", fn);
  fn(prefix + ".gate_logits", gate_logits);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
  fn(prefix + ".pool_queries", pool_queries);
  pool_attn.visit(prefix + ".pool", fn);
  for (size_t i = 0; i < post_blocks.size(); ++i)
    post_blocks[i].visit(prefix + ".post_block" + std::to_string(i), fn);
}

EncoderParams make_encoder(const ModelConfig& cfg, Rng& rng) {
  EncoderParams p;
  p.input_proj = make_linear(cfg.d_a, cfg.d_h, rng, cfg.dtype, /*bias=*/false);
  p.pe = make_spatial_pe(cfg, rng);
  p.cond_proj = make_linear(cfg.d_e, cfg.d_h, rng, cfg.dtype, /*bias=*/false);
  p.global_attn = make_attention(cfg.d_h, cfg.n_heads, rng, cfg.dtype);
  p.query_offsets = Tensor::zeros({cfg.n_supernodes, cfg.d_h}, cfg.dtype);
  p.gno_kernel = make_mlp(cfg.d_h + cfg.dim + 1, cfg.d_h, cfg.d_h, rng, cfg.dtype);
  p.gate_logits = Tensor::full({cfg.d_h}, cfg.gate_init, cfg.dtype);
  for (int64_t i = 0; i < cfg.n_enc; ++i)
    p.blocks.push_back(make_dit_block(cfg.d_h, cfg.d_e, cfg.n_heads, cfg.mlp_ratio, rng, cfg.dtype));
  p.pool_queries = Tensor::randn({cfg.n_latent, cfg.d_h}, rng, 1.0 / std::sqrt(double(cfg.d_h)),
                                 cfg.dtype);
  p.pool_attn = make_attention(cfg.d_h, cfg.n_heads, rng, cfg.dtype);
  for (int64_t i = 0; i < cfg.n_enc_post; ++i)
    p.post_blocks.push_back(
        make_dit_block(cfg.d_h, cfg.d_e, cfg.n_heads, cfg.mlp_ratio, rng, cfg.dtype));
  return p;
}

Tensor embed_inputs(const EncoderParams& p, const Array2D& coords, const Array2D& features,
                    const Tensor& cond) {
  if (features.cols != p.input_proj.w.extent(0))
    fail(ErrorKind::data, "embed_inputs: feature width " + std::to_string(features.cols) +
                              " does not match the input projection (" +
                              std::to_string(p.input_proj.w.extent(0)) + ")");
  const Dtype dt = p.input_proj.w.dtype();
  Tensor feat = features.tensor(dt);
  Tensor h0 = add(p.input_proj.apply(feat), p.pe.encode(coords));
  Tensor cond_term = p.cond_proj.apply(cond);  // [1, d_h]
  return add_rowvec(h0, cond_term);
}

Tensor global_branch(const EncoderParams& p, const Tensor& h0,
                     const Array2D& supernode_coords) {
  Tensor queries = p.pe.encode(supernode_coords);
  if (supernode_coords.rows == p.query_offsets.extent(0))
    queries = add(queries, p.query_offsets);
  else
    queries = add(queries, slice_rows(p.query_offsets, 0, supernode_coords.rows));
  return cross_attention(queries, h0, p.global_attn);
}

Tensor local_branch(const EncoderParams& p, const Tensor& h0, const RadiusGraph& graph,
                    int64_t n_supernodes) {
  const Dtype dt = h0.dtype();
  const int64_t n_edges = int64_t(graph.edges.size());
  const int64_t dim = graph.dim;
  std::vector<int64_t> members(static_cast<size_t>(n_edges));
  std::vector<int64_t> centers(static_cast<size_t>(n_edges));
  for (int64_t e = 0; e < n_edges; ++e) {
    members[size_t(e)] = graph.edges[size_t(e)].member;
    centers[size_t(e)] = graph.edges[size_t(e)].center;
  }
  Tensor member_emb = gather_rows(h0, members);
  Tensor offsets = Tensor::from({n_edges, dim}, graph.offsets, dt);
  Tensor dist = Tensor::from({n_edges, 1}, graph.distances, dt);
  std::vector<Tensor> parts = {member_emb, offsets, dist};
  Tensor kernel_out = p.gno_kernel.apply(concat_cols(parts));
  auto pooled = scatter_mean(kernel_out, centers, n_supernodes);
  return pooled.means;  // isolated centers keep the zero row
}

Tensor gated_fuse(const Tensor& v_attn, const Tensor& v_gno, const Tensor& gate_logits) {
  if (v_attn.shape() != v_gno.shape())
    fail(ErrorKind::data, "gated_fuse: branch shapes differ");
  Tensor g = sigmoid(gate_logits);
  Tensor inv = add_scalar(scale(g, -1.0), 1.0);  // 1 - G
  return add(mul_rowvec(v_attn, g), mul_rowvec(v_gno, inv));
}

Tensor encode(const EncoderParams& p, const ModelConfig& cfg, const CloudView& cloud,
              const Tensor& cond, const EncodeOptions& options) {
  if (cloud.coords.rows < 1) fail(ErrorKind::data, "encode: empty cloud");
  // canonical point order: downstream arithmetic sees geometry, not storage order
  const std::vector<int64_t> order = canonical_order(cloud.coords, &cloud.features);
  Array2D coords(cloud.coords.rows, cloud.coords.cols);
  Array2D features(cloud.features.rows, cloud.features.cols);
  for (int64_t i = 0; i < coords.rows; ++i) {
    for (int64_t j = 0; j < coords.cols; ++j) coords.at(i, j) = cloud.coords.at(order[size_t(i)], j);
    for (int64_t j = 0; j < features.cols; ++j)
      features.at(i, j) = cloud.features.at(order[size_t(i)], j);
  }

  Tensor h0 = embed_inputs(p, coords, features, cond);

  SupernodeSet supernodes = sample_supernodes(coords, cfg.n_supernodes, cfg.strategy,
                                              cloud.anchors, derive_seed(options.seed, 1));
  RadiusGraph graph = build_radius_graph(coords, supernodes.coords, cfg.radius,
                                         cfg.max_neighbors, derive_seed(options.seed, 2));

  Tensor gate = p.gate_logits;
  if (options.variant != Variant::fused) {
    const double clamp = options.variant == Variant::global_only ? 20.0 : -20.0;
    gate = Tensor::full({cfg.d_h}, clamp, h0.dtype());
  }

  Tensor v_attn = global_branch(p, h0, supernodes.coords);
  Tensor v_gno = local_branch(p, h0, graph, cfg.n_supernodes);
  Tensor tokens = gated_fuse(v_attn, v_gno, gate);

  for (const DitBlockParams& block : p.blocks) tokens = dit_block(tokens, cond, block);
  Tensor pooled = cross_attention(p.pool_queries, tokens, p.pool_attn);
  for (const DitBlockParams& block : p.post_blocks) pooled = dit_block(pooled, cond, block);
  return pooled;
}

}  // namespace apt
