#pragma once

#include <optional>
#include <string>
#include <vector>

#include "apt/attention.hpp"
#include "apt/geometry.hpp"

namespace apt {

enum class PeKind : uint8_t { grid = 0, sinusoidal = 1 };
PeKind parse_pe_kind(const std::string& name);
const char* pe_kind_name(PeKind k);

// Forward-time gate handling: ablation variants clamp the fusion gate to the
// single-branch limit instead of taking a separate code path, so Table-style
// ablation rows share the full architecture.
enum class Variant : uint8_t { fused = 0, global_only = 1, local_only = 2 };
Variant parse_variant(const std::string& name);
const char* variant_name(Variant v);

struct ModelConfig {
  // schema (from the dataset)
  int64_t dim = 2;
  int64_t d_a = 2;
  int64_t d_z = 1;
  std::vector<std::string> scalar_names;

  // architecture
  int64_t d_h = 48;
  int64_t d_e = 192;
  int64_t n_heads = 3;
  int64_t n_supernodes = 256;
  int64_t n_latent = 128;
  int64_t n_enc = 4;       // DiT blocks on supernode tokens (before pooling)
  int64_t n_enc_post = 0;  // DiT blocks on latent tokens (after pooling)
  int64_t n_app = 4;
  int64_t n_dec = 4;
  double radius = 20.0;
  int64_t max_neighbors = 128;
  PeKind pe_kind = PeKind::grid;
  int64_t pe_grid = 8;
  int64_t pe_time_dim = 48;
  int64_t mlp_ratio = 4;
  double gate_init = 0.0;
  double extent = 200.0;
  SupernodeStrategy strategy = SupernodeStrategy::seeded_uniform;
  Dtype dtype = Dtype::f64;

  void validate() const;
};

// Hybrid positional encoding for spatial coordinates: a learnable vertex
// table with multilinear interpolation, or a per-axis sinusoidal ladder.
struct SpatialPe {
  PeKind kind = PeKind::grid;
  Tensor table;  // grid kind only
  int64_t grid_size = 0;
  double extent = 0.0;
  int64_t d_h = 0;
  int64_t dim = 0;
  Dtype dtype = Dtype::f64;

  Tensor encode(const Array2D& coords) const;
  void visit(const std::string& prefix, const ParamVisitor& fn) {
    if (kind == PeKind::grid) fn(prefix + ".table", table);
  }
};

SpatialPe make_spatial_pe(const ModelConfig& cfg, Rng& rng);

struct EncoderParams {
  Linear input_proj;  // W_f, no bias: h0 = W_f a(x) + p(x) + proj(e_cond)
  SpatialPe pe;
  Linear cond_proj;  // d_e -> d_h, no bias
  MultiHeadAttentionParams global_attn;
  Tensor query_offsets;  // [N_s, d_h], zero-init addition to pos(x_s)
  Mlp gno_kernel;        // [d_h + dim + 1] -> d_h -> d_h
  Tensor gate_logits;    // [d_h]
  std::vector<DitBlockParams> blocks;
  Tensor pool_queries;  // [N_lat, d_h]
  MultiHeadAttentionParams pool_attn;
  std::vector<DitBlockParams> post_blocks;

  void visit(const std::string& prefix, const ParamVisitor& fn);
};

EncoderParams make_encoder(const ModelConfig& cfg, Rng& rng);

struct EncodeOptions {
  uint64_t seed = 0;  // drives supernode sampling and neighbor-cap subsampling
  Variant variant = Variant::fused;
};

// One preprocessed instance: coordinates rescaled to [0, extent], features
// z-scored. Anchors are critical locations (wells) that must receive a
// deterministic supernode.
struct CloudView {
  const Array2D& coords;
  const Array2D& features;
  const Array2D& anchors;
};

Tensor embed_inputs(const EncoderParams& p, const Array2D& coords, const Array2D& features,
                    const Tensor& cond);
Tensor global_branch(const EncoderParams& p, const Tensor& h0, const Array2D& supernode_coords);
Tensor local_branch(const EncoderParams& p, const Tensor& h0, const RadiusGraph& graph,
                    int64_t n_supernodes);
Tensor gated_fuse(const Tensor& v_attn, const Tensor& v_gno, const Tensor& gate_logits);

// Full fused encoder: embed, run both branches over sampled supernodes, fuse,
// refine with conditioned blocks, pool to the fixed-size latent array.
// The cloud is canonically reordered internally, so the result is invariant
// to input point order bit for bit.
Tensor encode(const EncoderParams& p, const ModelConfig& cfg, const CloudView& cloud,
              const Tensor& cond, const EncodeOptions& options);

}  // namespace apt
