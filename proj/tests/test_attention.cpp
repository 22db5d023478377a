#include <doctest.h>

#include <cmath>
#include <vector>

#include "apt/attention.hpp"
#include "fd_check.hpp"

using namespace apt;

namespace {

Linear identity_linear(int64_t d) {
  Linear l;
  l.w = Tensor::zeros({d, d});
  for (int64_t i = 0; i < d; ++i) l.w.set_item(i * d + i, 1.0);
  l.b = Tensor::zeros({d});
  return l;
}

// dense single-head scaled dot-product attention, plain loops
std::vector<double> ref_attention(const Tensor& q_in, const Tensor& kv,
                                  const MultiHeadAttentionParams& p) {
  const int64_t nq = q_in.extent(0), nk = kv.extent(0), d = p.d_h;
  auto lin = [&](const Tensor& x, const Linear& l, int64_t rows) {
    std::vector<double> out(size_t(rows * d), 0.0);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < d; ++j) {
        double acc = l.b.item(j);
        for (int64_t k = 0; k < d; ++k) acc += x.item(i * d + k) * l.w.item(k * d + j);
        out[size_t(i * d + j)] = acc;
      }
    return out;
  };
  auto q = lin(q_in, p.wq, nq);
  auto k = lin(kv, p.wk, nk);
  auto v = lin(kv, p.wv, nk);
  std::vector<double> ctx(size_t(nq * d), 0.0);
  for (int64_t i = 0; i < nq; ++i) {
    std::vector<double> scores(static_cast<size_t>(nk));
    double maxv = -1e300;
    for (int64_t j = 0; j < nk; ++j) {
      double s = 0;
      for (int64_t c = 0; c < d; ++c) s += q[size_t(i * d + c)] * k[size_t(j * d + c)];
      scores[size_t(j)] = s / std::sqrt(double(d));
      maxv = std::max(maxv, scores[size_t(j)]);
    }
    double total = 0;
    for (double& s : scores) {
      s = std::exp(s - maxv);
      total += s;
    }
    for (int64_t j = 0; j < nk; ++j)
      for (int64_t c = 0; c < d; ++c)
        ctx[size_t(i * d + c)] += scores[size_t(j)] / total * v[size_t(j * d + c)];
  }
  std::vector<double> out(size_t(nq * d), 0.0);
  for (int64_t i = 0; i < nq; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double acc = p.wo.b.item(j);
      for (int64_t c = 0; c < d; ++c) acc += ctx[size_t(i * d + c)] * p.wo.w.item(c * d + j);
      out[size_t(i * d + j)] = acc;
    }
  return out;
}

}  // namespace

TEST_CASE("cross_attention with a single key returns its value row") {
  Rng rng(3);
  MultiHeadAttentionParams p = make_attention(6, 2, rng, Dtype::f64);
  p.wo = identity_linear(6);  // expose the pre-projection output
  Tensor kv = Tensor::randn({1, 6}, rng);
  Tensor queries = Tensor::randn({4, 6}, rng);
  Tensor out = cross_attention(queries, kv, p);
  Tensor value = p.wv.apply(kv);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 6; ++j)
      CHECK(out.item(i * 6 + j) == doctest::Approx(value.item(j)).epsilon(1e-12));
}

TEST_CASE("zero query projection gives uniform weights over values") {
  Rng rng(4);
  MultiHeadAttentionParams p = make_attention(4, 1, rng, Dtype::f64);
  p.wq = make_zero_linear(4, 4, Dtype::f64);
  p.wo = identity_linear(4);
  Tensor kv = Tensor::randn({5, 4}, rng);
  Tensor queries = Tensor::randn({2, 4}, rng);
  Tensor out = cross_attention(queries, kv, p);
  Tensor values = p.wv.apply(kv);
  for (int64_t j = 0; j < 4; ++j) {
    double mean = 0;
    for (int64_t r = 0; r < 5; ++r) mean += values.item(r * 4 + j);
    mean /= 5.0;
    for (int64_t i = 0; i < 2; ++i)
      CHECK(out.item(i * 4 + j) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("cross_attention matches the dense reference") {
  Rng rng(5);
  MultiHeadAttentionParams p = make_attention(3, 1, rng, Dtype::f64);
  Tensor queries = Tensor::randn({2, 3}, rng, 0.5);
  Tensor kv = Tensor::randn({3, 3}, rng, 0.5);
  Tensor out = cross_attention(queries, kv, p);
  auto ref = ref_attention(queries, kv, p);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.item(i) == doctest::Approx(ref[size_t(i)]).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(cross_attention(queries, Tensor::zeros({0, 3}), p),
                       doctest::Contains("empty"), Error);
}

TEST_CASE("self_attention basics") {
  Rng rng(6);
  MultiHeadAttentionParams p = make_attention(4, 2, rng, Dtype::f64);

  {
    MultiHeadAttentionParams probe = p;
    probe.wo = identity_linear(4);
    Tensor x = Tensor::randn({1, 4}, rng);
    Tensor out = self_attention(x, probe);
    Tensor value = probe.wv.apply(x);
    for (int64_t j = 0; j < 4; ++j)
      CHECK(out.item(j) == doctest::Approx(value.item(j)).epsilon(1e-12));
  }

  // permutation equivariance
  Tensor x = Tensor::randn({5, 4}, rng);
  Tensor base = self_attention(x, p);
  std::vector<int64_t> perm = {3, 0, 4, 2, 1};
  Tensor xp = gather_rows(x, perm);
  Tensor pout = self_attention(xp, p);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 4; ++j)
      CHECK(pout.item(i * 4 + j) ==
            doctest::Approx(base.item(perm[size_t(i)] * 4 + j)).epsilon(1e-12));

  // dense oracle at N=3
  MultiHeadAttentionParams single = make_attention(3, 1, rng, Dtype::f64);
  Tensor y = Tensor::randn({3, 3}, rng, 0.7);
  Tensor out = self_attention(y, single);
  auto ref = ref_attention(y, y, single);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.item(i) == doctest::Approx(ref[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("condition_embed determinism and structure") {
  Rng rng(7);
  ConditionEmbedParams p = make_condition_embed(8, 8, {"rate"}, rng, Dtype::f64);
  std::vector<double> scalars = {0.4};
  Tensor a = condition_embed(p, 0.3, scalars);
  Tensor b = condition_embed(p, 0.3, scalars);
  CHECK(a.to_vector() == b.to_vector());

  ConditionEmbedParams no_scalars = make_condition_embed(8, 8, {}, rng, Dtype::f64);
  Tensor e = condition_embed(no_scalars, 0.25, {});
  Tensor pe = Tensor::from({1, 8}, sinusoidal_pe(0.25 * kTimeEncodeScale, 8));
  Tensor expect = no_scalars.time_mlp.apply(pe);
  CHECK(e.to_vector() == expect.to_vector());

  CHECK_THROWS_WITH_AS(condition_embed(p, 0.1, {}), doctest::Contains("scalar"), Error);
}

TEST_CASE("condition_embed with identity-like MLPs sums the encodings") {
  // gelu(x + 30) == x + 30 exactly in f64, so [I,+30] then [I,-30] composes
  // to (numerically) the identity and the output reduces to the PE sum.
  const int64_t d = 8;
  Rng rng(8);
  ConditionEmbedParams p = make_condition_embed(d, d, {"a", "b"}, rng, Dtype::f64);
  auto make_identity_like = [&](Mlp& mlp) {
    mlp.fc1 = identity_linear(d);
    mlp.fc2 = identity_linear(d);
    for (int64_t i = 0; i < d; ++i) {
      mlp.fc1.b.set_item(i, 30.0);
      mlp.fc2.b.set_item(i, -30.0);
    }
  };
  make_identity_like(p.time_mlp);
  make_identity_like(p.scalar_mlps[0]);
  make_identity_like(p.scalar_mlps[1]);

  const double t = 0.37;
  std::vector<double> scalars = {1.25, -0.75};
  Tensor e = condition_embed(p, t, scalars);
  auto pe_t = sinusoidal_pe(t * kTimeEncodeScale, d);
  auto pe_a = sinusoidal_pe(1.25, d);
  auto pe_b = sinusoidal_pe(-0.75, d);
  for (int64_t j = 0; j < d; ++j) {
    double expect = pe_t[size_t(j)] + pe_a[size_t(j)] + pe_b[size_t(j)];
    CHECK(e.item(j) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("dit_block is the identity at initialization") {
  Rng rng(9);
  DitBlockParams block = make_dit_block(6, 4, 2, 4, rng, Dtype::f64);
  ConditionEmbedParams ce = make_condition_embed(4, 4, {}, rng, Dtype::f64);
  Tensor cond = condition_embed(ce, 0.8, {});
  Tensor x = Tensor::randn({5, 6}, rng);
  Tensor out = dit_block(x, cond, block);
  CHECK(out.to_vector() == x.to_vector());  // bit-equal under adaLN-zero
}

TEST_CASE("dit_block reacts to conditioning once gates are nonzero") {
  Rng rng(10);
  DitBlockParams block = make_dit_block(6, 4, 2, 4, rng, Dtype::f64);
  block.cond = make_linear(4, 36, rng, Dtype::f64);  // perturbed conditioning projection
  ConditionEmbedParams ce = make_condition_embed(4, 4, {}, rng, Dtype::f64);
  Tensor x = Tensor::randn({5, 6}, rng);
  Tensor out1 = dit_block(x, condition_embed(ce, 0.1, {}), block);
  Tensor out2 = dit_block(x, condition_embed(ce, 0.9, {}), block);
  double diff = 0;
  for (int64_t i = 0; i < out1.numel(); ++i)
    diff = std::max(diff, std::fabs(out1.item(i) - out2.item(i)));
  CHECK(diff > 1e-8);
}

TEST_CASE("dit_block gradients pass the finite-difference check") {
  Rng rng(11);
  DitBlockParams block = make_dit_block(4, 4, 2, 2, rng, Dtype::f64);
  block.cond = make_linear(4, 24, rng, Dtype::f64);
  ConditionEmbedParams ce = make_condition_embed(4, 4, {"q"}, rng, Dtype::f64);
  Tensor x = Tensor::randn({3, 4}, rng);

  std::vector<Tensor> params;
  block.visit("block", [&](const std::string&, Tensor& t) { params.push_back(t); });
  ce.visit("cond", [&](const std::string&, Tensor& t) { params.push_back(t); });
  std::vector<double> scalars = {0.5};
  auto loss = [&]() {
    Tensor cond = condition_embed(ce, 0.35, scalars);
    Tensor y = dit_block(x, cond, block);
    return sum(mul(y, y));
  };
  auto r = test::grad_check(params, loss, 1e-5);
  CHECK(r.max_rel_err < 1e-4);
}
