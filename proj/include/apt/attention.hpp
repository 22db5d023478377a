#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apt/geometry.hpp"
#include "apt/tensor.hpp"

namespace apt {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

// Tokens are rows: y = x W + b with W stored [in, out].
struct Linear {
  Tensor w;
  Tensor b;

  Tensor apply(const Tensor& x) const {
    Tensor y = matmul(x, w);
    return b.defined() ? add_rowvec(y, b) : y;
  }
  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w", w);
    if (b.defined()) fn(prefix + ".b", b);
  }
};

Linear make_linear(int64_t in, int64_t out, Rng& rng, Dtype dt, bool bias = true);
Linear make_zero_linear(int64_t in, int64_t out, Dtype dt, bool bias = true);

struct Mlp {
  Linear fc1, fc2;

  Tensor apply(const Tensor& x) const { return fc2.apply(gelu(fc1.apply(x))); }
  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

Mlp make_mlp(int64_t in, int64_t hidden, int64_t out, Rng& rng, Dtype dt);

struct MultiHeadAttentionParams {
  Linear wq, wk, wv, wo;
  int64_t n_heads = 1;
  int64_t d_h = 0;

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    wq.visit(prefix + ".wq", fn);
    wk.visit(prefix + ".wk", fn);
    wv.visit(prefix + ".wv", fn);
    wo.visit(prefix + ".wo", fn);
  }
};

MultiHeadAttentionParams make_attention(int64_t d_h, int64_t n_heads, Rng& rng, Dtype dt);

// softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated, then W^O.
Tensor cross_attention(const Tensor& queries, const Tensor& keys_values,
                       const MultiHeadAttentionParams& params);
Tensor self_attention(const Tensor& x, const MultiHeadAttentionParams& params);

// Unified temporal/scalar modulation: e_cond = MLP_time(pe(t)) + sum_k MLP_k(pe(s_k)).
// Scalars arrive z-scored, in the dataset schema order.
struct ConditionEmbedParams {
  int64_t pe_dim = 0;  // sinusoidal encoding width fed to the MLPs
  int64_t d_e = 0;
  Mlp time_mlp;
  std::vector<std::string> scalar_names;
  std::vector<Mlp> scalar_mlps;

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    time_mlp.visit(prefix + ".time", fn);
    for (size_t k = 0; k < scalar_mlps.size(); ++k)
      scalar_mlps[k].visit(prefix + ".scalar." + scalar_names[k], fn);
  }
};

ConditionEmbedParams make_condition_embed(int64_t pe_dim, int64_t d_e,
                                          std::vector<std::string> scalar_names, Rng& rng,
                                          Dtype dt);

// Normalized time gets stretched before the sinusoidal ladder so that the
// high-frequency slots resolve sub-interval structure within [0,1].
inline constexpr double kTimeEncodeScale = 100.0;

Tensor condition_embed(const ConditionEmbedParams& params, double t,
                       std::span<const double> scalars);

// Transformer block whose normalization shift/scale and residual gates come
// from the conditioning vector; the conditioning projection starts at zero so
// a fresh block is the identity map.
struct DitBlockParams {
  MultiHeadAttentionParams attn;
  Mlp mlp;
  Linear cond;            // [d_e, 6*d_h], zero-initialized
  Tensor ln_unit, ln_zero;  // fixed gamma/beta of the two pre-norms

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    attn.visit(prefix + ".attn", fn);
    mlp.visit(prefix + ".mlp", fn);
    cond.visit(prefix + ".cond", fn);
  }
};

DitBlockParams make_dit_block(int64_t d_h, int64_t d_e, int64_t n_heads, int64_t mlp_ratio,
                              Rng& rng, Dtype dt);

// x -> x + gate_a * Attn(mod(LN x)) -> + gate_m * MLP(mod(LN x)); exact
// identity at initialization.
Tensor dit_block(const Tensor& x, const Tensor& cond, const DitBlockParams& params);

}  // namespace apt
