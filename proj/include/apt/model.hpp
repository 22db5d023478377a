#pragma once

#include "apt/encoder.hpp"

namespace apt {

// Latent dynamics: conditioned self-attention over the fixed token array, so
// the cost never depends on the input discretization.
struct ApproximatorParams {
  std::vector<DitBlockParams> blocks;

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
  }
};

// Decoder block: queries cross-attend to the latent array through an ungated
// residual (information flows from the first step), while the MLP sublayer is
// modulated and gated from the conditioning vector (zero-initialized).
struct DecoderBlockParams {
  MultiHeadAttentionParams attn;
  Mlp mlp;
  Linear cond;  // d_e -> 5*d_h: shift_a, scale_a, shift_m, scale_m, gate_m
  Tensor ln_unit, ln_zero;

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    attn.visit(prefix + ".attn", fn);
    mlp.visit(prefix + ".mlp", fn);
    cond.visit(prefix + ".cond", fn);
  }
};

DecoderBlockParams make_decoder_block(int64_t d_h, int64_t d_e, int64_t n_heads,
                                      int64_t mlp_ratio, Rng& rng, Dtype dt);
Tensor decoder_block(const Tensor& queries, const Tensor& context, const Tensor& cond,
                     const DecoderBlockParams& params);

// Cross-attention readout at arbitrary query points, followed by a linear
// output head. Every query row is computed independently of the others.
struct DecoderParams {
  SpatialPe pe;       // query-coordinate embedding
  Linear cond_proj;   // d_e -> d_h, summed into the query embedding
  std::vector<DecoderBlockParams> blocks;
  Linear head;        // d_h -> d_z

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    pe.visit(prefix + ".pe", fn);
    cond_proj.visit(prefix + ".cond_proj", fn);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
    head.visit(prefix + ".head", fn);
  }
};

struct AptModel {
  ModelConfig config;
  ConditionEmbedParams cond;
  EncoderParams encoder;
  ApproximatorParams approximator;
  DecoderParams decoder;

  void visit_params(const ParamVisitor& fn);
  int64_t param_count();
};

AptModel make_model(const ModelConfig& cfg, uint64_t seed);

Tensor approximate(const ApproximatorParams& p, const Tensor& z_enc, const Tensor& cond);
Tensor decode(const DecoderParams& p, const Tensor& z_lat, const Array2D& query_coords,
              const Tensor& cond);

struct ForwardOptions {
  uint64_t seed = 0;
  Variant variant = Variant::fused;
};

// G = D(A(E(sample, t), t), queries, t): direct one-step evaluation at any
// query set, including sets denser than the encoder input.
Tensor model_forward(const AptModel& m, const CloudView& cloud, double t_norm,
                     std::span<const double> scalars, const Array2D& query_coords,
                     const ForwardOptions& options);

}  // namespace apt
