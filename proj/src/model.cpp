#include "apt/model.hpp"

namespace apt {

void AptModel::visit_params(const ParamVisitor& fn) {
  cond.visit("cond", fn);
  encoder.visit("enc", fn);
  approximator.visit("app", fn);
  decoder.visit("dec", fn);
}

int64_t AptModel::param_count() {
  int64_t total = 0;
  visit_params([&](const std::string&, Tensor& t) { total += t.numel(); });
  return total;
}

DecoderBlockParams make_decoder_block(int64_t d_h, int64_t d_e, int64_t n_heads,
                                      int64_t mlp_ratio, Rng& rng, Dtype dt) {
  DecoderBlockParams p;
  p.attn = make_attention(d_h, n_heads, rng, dt);
  p.mlp = make_mlp(d_h, d_h * mlp_ratio, d_h, rng, dt);
  p.cond = make_zero_linear(d_e, 5 * d_h, dt);
  p.ln_unit = Tensor::full({d_h}, 1.0, dt);
  p.ln_zero = Tensor::zeros({d_h}, dt);
  return p;
}

Tensor decoder_block(const Tensor& queries, const Tensor& context, const Tensor& cond,
                     const DecoderBlockParams& params) {
  const int64_t d_h = params.attn.d_h;
  Tensor five = params.cond.apply(gelu(cond));
  Tensor shift_a = slice_cols(five, 0 * d_h, d_h);
  Tensor scale_a = slice_cols(five, 1 * d_h, d_h);
  Tensor shift_m = slice_cols(five, 2 * d_h, d_h);
  Tensor scale_m = slice_cols(five, 3 * d_h, d_h);
  Tensor gate_m = slice_cols(five, 4 * d_h, d_h);
  auto modulate = [&](const Tensor& x, const Tensor& shift, const Tensor& scale_v) {
    Tensor normed = layer_norm(x, params.ln_unit, params.ln_zero);
    return add_rowvec(mul_rowvec(normed, add_scalar(scale_v, 1.0)), shift);
  };
  Tensor h = add(queries,
                 cross_attention(modulate(queries, shift_a, scale_a), context, params.attn));
  Tensor f = params.mlp.apply(modulate(h, shift_m, scale_m));
  return add(h, mul_rowvec(f, gate_m));
}

AptModel make_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0xa97));
  AptModel m;
  m.config = cfg;
  m.cond = make_condition_embed(cfg.pe_time_dim, cfg.d_e, cfg.scalar_names, rng, cfg.dtype);
  m.encoder = make_encoder(cfg, rng);
  for (int64_t i = 0; i < cfg.n_app; ++i)
    m.approximator.blocks.push_back(
        make_dit_block(cfg.d_h, cfg.d_e, cfg.n_heads, cfg.mlp_ratio, rng, cfg.dtype));
  m.decoder.pe = make_spatial_pe(cfg, rng);
  m.decoder.cond_proj = make_linear(cfg.d_e, cfg.d_h, rng, cfg.dtype, /*bias=*/false);
  for (int64_t i = 0; i < cfg.n_dec; ++i)
    m.decoder.blocks.push_back(
        make_decoder_block(cfg.d_h, cfg.d_e, cfg.n_heads, cfg.mlp_ratio, rng, cfg.dtype));
  m.decoder.head = make_linear(cfg.d_h, cfg.d_z, rng, cfg.dtype);
  m.visit_params([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  return m;
}

Tensor approximate(const ApproximatorParams& p, const Tensor& z_enc, const Tensor& cond) {
  Tensor z = z_enc;
  for (const DitBlockParams& block : p.blocks) z = dit_block(z, cond, block);
  return z;
}

Tensor decode(const DecoderParams& p, const Tensor& z_lat, const Array2D& query_coords,
              const Tensor& cond) {
  if (query_coords.rows == 0)
    return Tensor::zeros({0, p.head.w.extent(1)}, z_lat.dtype());
  Tensor q = p.pe.encode(query_coords);
  q = add_rowvec(q, p.cond_proj.apply(cond));
  for (const DecoderBlockParams& block : p.blocks) q = decoder_block(q, z_lat, cond, block);
  return p.head.apply(q);
}

Tensor model_forward(const AptModel& m, const CloudView& cloud, double t_norm,
                     std::span<const double> scalars, const Array2D& query_coords,
                     const ForwardOptions& options) {
  Tensor cond = condition_embed(m.cond, t_norm, scalars);
  Tensor z_enc = encode(m.encoder, m.config, cloud, cond, {options.seed, options.variant});
  Tensor z_lat = approximate(m.approximator, z_enc, cond);
  return decode(m.decoder, z_lat, query_coords, cond);
}

}  // namespace apt
