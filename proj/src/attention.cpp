#include "apt/attention.hpp"

#include <cmath>

namespace apt {

Linear make_linear(int64_t in, int64_t out, Rng& rng, Dtype dt, bool bias) {
  Linear l;
  l.w = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(double(in)), dt);
  if (bias) l.b = Tensor::zeros({out}, dt);
  return l;
}

Linear make_zero_linear(int64_t in, int64_t out, Dtype dt, bool bias) {
  Linear l;
  l.w = Tensor::zeros({in, out}, dt);
  if (bias) l.b = Tensor::zeros({out}, dt);
  return l;
}

Mlp make_mlp(int64_t in, int64_t hidden, int64_t out, Rng& rng, Dtype dt) {
  return {make_linear(in, hidden, rng, dt), make_linear(hidden, out, rng, dt)};
}

MultiHeadAttentionParams make_attention(int64_t d_h, int64_t n_heads, Rng& rng, Dtype dt) {
  if (n_heads < 1 || d_h % n_heads != 0)
    fail(ErrorKind::config, "attention: d_h (" + std::to_string(d_h) +
                                ") must be divisible by n_heads (" + std::to_string(n_heads) +
                                ")");
  MultiHeadAttentionParams p;
  p.wq = make_linear(d_h, d_h, rng, dt);
  p.wk = make_linear(d_h, d_h, rng, dt);
  p.wv = make_linear(d_h, d_h, rng, dt);
  p.wo = make_linear(d_h, d_h, rng, dt);
  p.n_heads = n_heads;
  p.d_h = d_h;
  return p;
}

Tensor cross_attention(const Tensor& queries, const Tensor& keys_values,
                       const MultiHeadAttentionParams& params) {
  if (keys_values.extent(0) == 0)
    fail(ErrorKind::data, "cross_attention: empty key/value context");
  const int64_t d_head = params.d_h / params.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(d_head));

  Tensor q = params.wq.apply(queries);
  Tensor k = params.wk.apply(keys_values);
  Tensor v = params.wv.apply(keys_values);

  std::vector<Tensor> heads;
  heads.reserve(size_t(params.n_heads));
  for (int64_t h = 0; h < params.n_heads; ++h) {
    Tensor qh = slice_cols(q, h * d_head, d_head);
    Tensor kh = slice_cols(k, h * d_head, d_head);
    Tensor vh = slice_cols(v, h * d_head, d_head);
    Tensor weights = softmax(scale(matmul_nt(qh, kh), inv_sqrt), 1);
    heads.push_back(matmul(weights, vh));
  }
  Tensor merged = params.n_heads == 1 ? heads[0] : concat_cols(heads);
  return params.wo.apply(merged);
}

Tensor self_attention(const Tensor& x, const MultiHeadAttentionParams& params) {
  return cross_attention(x, x, params);
}

ConditionEmbedParams make_condition_embed(int64_t pe_dim, int64_t d_e,
                                          std::vector<std::string> scalar_names, Rng& rng,
                                          Dtype dt) {
  if (pe_dim < 2 || pe_dim % 2 != 0)
    fail(ErrorKind::config, "condition embedding: pe_dim must be even and >= 2");
  ConditionEmbedParams p;
  p.pe_dim = pe_dim;
  p.d_e = d_e;
  p.time_mlp = make_mlp(pe_dim, d_e, d_e, rng, dt);
  p.scalar_names = std::move(scalar_names);
  for (size_t k = 0; k < p.scalar_names.size(); ++k)
    p.scalar_mlps.push_back(make_mlp(pe_dim, d_e, d_e, rng, dt));
  return p;
}

Tensor condition_embed(const ConditionEmbedParams& params, double t,
                       std::span<const double> scalars) {
  if (!std::isfinite(t)) fail(ErrorKind::data, "condition_embed: non-finite time");
  if (scalars.size() != params.scalar_names.size())
    fail(ErrorKind::data, "condition_embed: expected " +
                              std::to_string(params.scalar_names.size()) +
                              " declared scalar conditions, got " +
                              std::to_string(scalars.size()));
  const Dtype dt = params.time_mlp.fc1.w.dtype();
  Tensor pe_t = Tensor::from({1, params.pe_dim},
                             sinusoidal_pe(t * kTimeEncodeScale, params.pe_dim), dt);
  Tensor e = params.time_mlp.apply(pe_t);
  for (size_t k = 0; k < params.scalar_mlps.size(); ++k) {
    Tensor pe_s =
        Tensor::from({1, params.pe_dim}, sinusoidal_pe(scalars[k], params.pe_dim), dt);
    e = add(e, params.scalar_mlps[k].apply(pe_s));
  }
  return e;  // [1, d_e]
}

DitBlockParams make_dit_block(int64_t d_h, int64_t d_e, int64_t n_heads, int64_t mlp_ratio,
                              Rng& rng, Dtype dt) {
  DitBlockParams p;
  p.attn = make_attention(d_h, n_heads, rng, dt);
  p.mlp = make_mlp(d_h, d_h * mlp_ratio, d_h, rng, dt);
  p.cond = make_zero_linear(d_e, 6 * d_h, dt);  // adaLN-zero
  p.ln_unit = Tensor::full({d_h}, 1.0, dt);
  p.ln_zero = Tensor::zeros({d_h}, dt);
  return p;
}

namespace {

struct Modulation {
  Tensor shift_a, scale_a, gate_a, shift_m, scale_m, gate_m;
};

Modulation split_modulation(const Tensor& cond, const DitBlockParams& params) {
  const int64_t d_h = params.attn.d_h;
  Tensor six = params.cond.apply(gelu(cond));  // [1, 6*d_h]
  Modulation m;
  m.shift_a = slice_cols(six, 0 * d_h, d_h);
  m.scale_a = slice_cols(six, 1 * d_h, d_h);
  m.gate_a = slice_cols(six, 2 * d_h, d_h);
  m.shift_m = slice_cols(six, 3 * d_h, d_h);
  m.scale_m = slice_cols(six, 4 * d_h, d_h);
  m.gate_m = slice_cols(six, 5 * d_h, d_h);
  return m;
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_v,
                const DitBlockParams& params) {
  Tensor normed = layer_norm(x, params.ln_unit, params.ln_zero);
  return add_rowvec(mul_rowvec(normed, add_scalar(scale_v, 1.0)), shift);
}

}  // namespace

Tensor dit_block(const Tensor& x, const Tensor& cond, const DitBlockParams& params) {
  Modulation m = split_modulation(cond, params);
  Tensor attn_out = self_attention(modulate(x, m.shift_a, m.scale_a, params), params.attn);
  Tensor h = add(x, mul_rowvec(attn_out, m.gate_a));
  Tensor f = params.mlp.apply(modulate(h, m.shift_m, m.scale_m, params));
  return add(h, mul_rowvec(f, m.gate_m));
}

}  // namespace apt
