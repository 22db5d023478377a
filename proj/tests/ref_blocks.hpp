#pragma once

// Plain-loop reference implementations of the attention/MLP/DiT math used as
// compositional oracles by the encoder/approximator/decoder tests.

#include <cmath>
#include <vector>

#include "apt/attention.hpp"

namespace apt::test {

using Rows = std::vector<std::vector<double>>;

inline Rows tensor_rows(const Tensor& t) {
  Rows out(size_t(t.extent(0)), std::vector<double>(size_t(t.extent(1))));
  for (int64_t i = 0; i < t.extent(0); ++i)
    for (int64_t j = 0; j < t.extent(1); ++j)
      out[size_t(i)][size_t(j)] = t.item(i * t.extent(1) + j);
  return out;
}

inline Rows linear_ref(const Rows& x, const Linear& l) {
  const int64_t in = l.w.extent(0), out_d = l.w.extent(1);
  Rows y(x.size(), std::vector<double>(size_t(out_d), 0.0));
  for (size_t i = 0; i < x.size(); ++i)
    for (int64_t j = 0; j < out_d; ++j) {
      double acc = l.b.defined() ? l.b.item(j) : 0.0;
      for (int64_t k = 0; k < in; ++k) acc += x[i][size_t(k)] * l.w.item(k * out_d + j);
      y[i][size_t(j)] = acc;
    }
  return y;
}

inline Rows gelu_ref(Rows x) {
  for (auto& row : x)
    for (double& v : row) v = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x;
}

inline Rows mlp_ref(const Rows& x, const Mlp& m) {
  return linear_ref(gelu_ref(linear_ref(x, m.fc1)), m.fc2);
}

inline Rows attention_ref(const Rows& q_in, const Rows& kv, const MultiHeadAttentionParams& p) {
  const int64_t d = p.d_h;
  Rows q = linear_ref(q_in, p.wq), k = linear_ref(kv, p.wk), v = linear_ref(kv, p.wv);
  const int64_t n_heads = p.n_heads, d_head = d / n_heads;
  Rows ctx(q.size(), std::vector<double>(size_t(d), 0.0));
  for (int64_t h = 0; h < n_heads; ++h) {
    const int64_t off = h * d_head;
    for (size_t i = 0; i < q.size(); ++i) {
      std::vector<double> scores(k.size());
      double maxv = -1e300;
      for (size_t j = 0; j < k.size(); ++j) {
        double s = 0;
        for (int64_t c = 0; c < d_head; ++c) s += q[i][size_t(off + c)] * k[j][size_t(off + c)];
        scores[j] = s / std::sqrt(double(d_head));
        maxv = std::max(maxv, scores[j]);
      }
      double total = 0;
      for (double& s : scores) {
        s = std::exp(s - maxv);
        total += s;
      }
      for (size_t j = 0; j < k.size(); ++j)
        for (int64_t c = 0; c < d_head; ++c)
          ctx[i][size_t(off + c)] += scores[j] / total * v[j][size_t(off + c)];
    }
  }
  return linear_ref(ctx, p.wo);
}

inline Rows layer_norm_ref(const Rows& x, double eps = 1e-5) {
  Rows y = x;
  for (auto& row : y) {
    double mean = 0;
    for (double v : row) mean += v;
    mean /= double(row.size());
    double var = 0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= double(row.size());
    double inv = 1.0 / std::sqrt(var + eps);
    for (double& v : row) v = (v - mean) * inv;
  }
  return y;
}

inline Rows modulate_ref(const Rows& h, const std::vector<double>& shift,
                         const std::vector<double>& scale) {
  Rows n = layer_norm_ref(h);
  for (auto& row : n)
    for (size_t j = 0; j < row.size(); ++j) row[j] = row[j] * (1.0 + scale[j]) + shift[j];
  return n;
}

inline Rows dit_block_ref(const Rows& x, const std::vector<double>& cond_vec,
                          const DitBlockParams& block) {
  const int64_t d = block.attn.d_h;
  Rows six = linear_ref(gelu_ref(Rows{cond_vec}), block.cond);
  auto seg = [&](int64_t s) {
    return std::vector<double>(six[0].begin() + s * d, six[0].begin() + (s + 1) * d);
  };
  auto shift_a = seg(0), scale_a = seg(1), gate_a = seg(2);
  auto shift_m = seg(3), scale_m = seg(4), gate_m = seg(5);
  Rows moded = modulate_ref(x, shift_a, scale_a);
  Rows attn_out = attention_ref(moded, moded, block.attn);
  Rows h = x;
  for (size_t i = 0; i < h.size(); ++i)
    for (size_t j = 0; j < h[i].size(); ++j) h[i][j] += gate_a[j] * attn_out[i][j];
  Rows mlp_out = mlp_ref(modulate_ref(h, shift_m, scale_m), block.mlp);
  for (size_t i = 0; i < h.size(); ++i)
    for (size_t j = 0; j < h[i].size(); ++j) h[i][j] += gate_m[j] * mlp_out[i][j];
  return h;
}

// forward declaration matching apt/model.hpp
}  // namespace apt::test

#include "apt/model.hpp"

namespace apt::test {

inline Rows decoder_block_ref(const Rows& q, const Rows& context,
                              const std::vector<double>& cond_vec,
                              const DecoderBlockParams& block) {
  const int64_t d = block.attn.d_h;
  Rows five = linear_ref(gelu_ref(Rows{cond_vec}), block.cond);
  auto seg = [&](int64_t s) {
    return std::vector<double>(five[0].begin() + s * d, five[0].begin() + (s + 1) * d);
  };
  auto shift_a = seg(0), scale_a = seg(1), shift_m = seg(2), scale_m = seg(3), gate_m = seg(4);
  Rows attn_out = attention_ref(modulate_ref(q, shift_a, scale_a), context, block.attn);
  Rows h = q;
  for (size_t i = 0; i < h.size(); ++i)
    for (size_t j = 0; j < h[i].size(); ++j) h[i][j] += attn_out[i][j];
  Rows mlp_out = mlp_ref(modulate_ref(h, shift_m, scale_m), block.mlp);
  for (size_t i = 0; i < h.size(); ++i)
    for (size_t j = 0; j < h[i].size(); ++j) h[i][j] += gate_m[j] * mlp_out[i][j];
  return h;
}

}  // namespace apt::test
