// Numeric core: reference-checked forward passes, finite-difference gradient
// checks for every differentiable op, optimizer and schedule oracles, and
// random-stream properties.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "support/testutil.hpp"
#include "varc/nn.hpp"
#include "varc/rng.hpp"

using namespace varc;
using testutil::fd_check;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, float scale = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = (rng.uniform_float() * 2.0f - 1.0f) * scale;
  return t;
}

// Weighted sum of a tensor: a smooth scalar head for gradient checks.
double weighted_sum(const Tensor& t, const Tensor& w) {
  double s = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) s += static_cast<double>(t.data[i]) * w.data[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Reference implementations in double precision
// ---------------------------------------------------------------------------

TEST(Matmul, MatchesNaiveDoubleReference) {
  Rng rng(1);
  const int m = 7, k = 5, n = 6;
  const Tensor a = random_tensor(rng, {m, k});
  const Tensor b = random_tensor(rng, {k, n});
  Tensor c({m, n});
  matmul_nn(a.ptr(), b.ptr(), c.ptr(), m, k, n);
  std::vector<double> ref(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk)
        ref[static_cast<std::size_t>(i) * n + j] +=
            static_cast<double>(a.data[i * k + kk]) * b.data[kk * n + j];
  EXPECT_LT(testutil::max_rel_diff(c.data, ref), 1e-5);

  // A^T path: c2 = a2^T (k x m) @ b -> compare against transposing manually.
  const Tensor a2 = random_tensor(rng, {k, m});
  Tensor c2({m, n});
  matmul_tn(a2.ptr(), b.ptr(), c2.ptr(), m, k, n);
  std::fill(ref.begin(), ref.end(), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk)
        ref[static_cast<std::size_t>(i) * n + j] +=
            static_cast<double>(a2.data[kk * m + i]) * b.data[kk * n + j];
  EXPECT_LT(testutil::max_rel_diff(c2.data, ref), 1e-5);

  // B^T path: c3 = a @ b2^T where b2 is [n, k].
  const Tensor b2 = random_tensor(rng, {n, k});
  Tensor c3({m, n});
  matmul_nt(a.ptr(), b2.ptr(), c3.ptr(), m, k, n);
  std::fill(ref.begin(), ref.end(), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk)
        ref[static_cast<std::size_t>(i) * n + j] +=
            static_cast<double>(a.data[i * k + kk]) * b2.data[j * k + kk];
  EXPECT_LT(testutil::max_rel_diff(c3.data, ref), 1e-5);
}

TEST(Linear, ForwardAndBackwardMatchDoubleReference) {
  Rng rng(2);
  const int m = 9, din = 7, dout = 5;
  const Tensor x = random_tensor(rng, {m, din});
  const Tensor w = random_tensor(rng, {din, dout});
  const Tensor b = random_tensor(rng, {dout});
  Tensor out({m, dout});
  linear_forward(x, w, &b, out);

  std::vector<double> ref(static_cast<std::size_t>(m) * dout);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < dout; ++j) {
      double s = b.data[j];
      for (int kk = 0; kk < din; ++kk)
        s += static_cast<double>(x.data[i * din + kk]) * w.data[kk * dout + j];
      ref[static_cast<std::size_t>(i) * dout + j] = s;
    }
  }
  EXPECT_LT(testutil::max_rel_diff(out.data, ref), 1e-4);

  const Tensor dout_t = random_tensor(rng, {m, dout});
  Tensor dx({m, din}), dw({din, dout}), db({dout});
  linear_backward(x, w, dout_t, &dx, dw, &db);

  std::vector<double> rdx(static_cast<std::size_t>(m) * din, 0.0);
  std::vector<double> rdw(static_cast<std::size_t>(din) * dout, 0.0);
  std::vector<double> rdb(dout, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < dout; ++j) {
      const double g = dout_t.data[i * dout + j];
      rdb[static_cast<std::size_t>(j)] += g;
      for (int kk = 0; kk < din; ++kk) {
        rdx[static_cast<std::size_t>(i) * din + kk] += g * w.data[kk * dout + j];
        rdw[static_cast<std::size_t>(kk) * dout + j] += g * x.data[i * din + kk];
      }
    }
  }
  EXPECT_LT(testutil::max_rel_diff(dx.data, rdx, 1e-4), 1e-4);
  EXPECT_LT(testutil::max_rel_diff(dw.data, rdw, 1e-4), 1e-4);
  EXPECT_LT(testutil::max_rel_diff(db.data, rdb, 1e-4), 1e-4);
}

TEST(LayerNorm, ForwardAndBackwardMatchDoubleReference) {
  Rng rng(3);
  const int m = 11, d = 13;
  const float eps = 1e-5f;
  const Tensor x = random_tensor(rng, {m, d}, 2.0f);
  const Tensor gamma = random_tensor(rng, {d});
  const Tensor beta = random_tensor(rng, {d});
  Tensor out({m, d}), mean({m}), rstd({m});
  layer_norm_forward(x, gamma, beta, eps, out, mean, rstd);

  std::vector<double> ref(static_cast<std::size_t>(m) * d);
  std::vector<double> rmu(m), rrs(m);
  for (int r = 0; r < m; ++r) {
    double mu = 0.0;
    for (int c = 0; c < d; ++c) mu += x.data[r * d + c];
    mu /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      const double diff = x.data[r * d + c] - mu;
      var += diff * diff;
    }
    var /= d;
    const double rs = 1.0 / std::sqrt(var + eps);
    rmu[static_cast<std::size_t>(r)] = mu;
    rrs[static_cast<std::size_t>(r)] = rs;
    for (int c = 0; c < d; ++c) {
      ref[static_cast<std::size_t>(r) * d + c] =
          (x.data[r * d + c] - mu) * rs * gamma.data[c] + beta.data[c];
    }
  }
  EXPECT_LT(testutil::max_rel_diff(out.data, ref, 1e-4), 1e-4);
  EXPECT_LT(testutil::max_rel_diff(mean.data, rmu, 1e-4), 1e-4);
  EXPECT_LT(testutil::max_rel_diff(rstd.data, rrs, 1e-4), 1e-4);

  const Tensor g = random_tensor(rng, {m, d});
  Tensor dx({m, d}), dgamma({d}), dbeta({d});
  layer_norm_backward(x, gamma, mean, rstd, g, dx, dgamma, dbeta);

  // Double-precision backward from the closed form.
  std::vector<double> rdx(static_cast<std::size_t>(m) * d, 0.0);
  std::vector<double> rdg(d, 0.0), rdb(d, 0.0);
  for (int r = 0; r < m; ++r) {
    const double mu = rmu[static_cast<std::size_t>(r)];
    const double rs = rrs[static_cast<std::size_t>(r)];
    double sum_dnorm = 0.0, sum_dnorm_norm = 0.0;
    for (int c = 0; c < d; ++c) {
      const double norm = (x.data[r * d + c] - mu) * rs;
      const double dnorm = static_cast<double>(g.data[r * d + c]) * gamma.data[c];
      sum_dnorm += dnorm;
      sum_dnorm_norm += dnorm * norm;
      rdg[static_cast<std::size_t>(c)] += g.data[r * d + c] * norm;
      rdb[static_cast<std::size_t>(c)] += g.data[r * d + c];
    }
    sum_dnorm /= d;
    sum_dnorm_norm /= d;
    for (int c = 0; c < d; ++c) {
      const double norm = (x.data[r * d + c] - mu) * rs;
      const double dnorm = static_cast<double>(g.data[r * d + c]) * gamma.data[c];
      rdx[static_cast<std::size_t>(r) * d + c] = (dnorm - sum_dnorm - norm * sum_dnorm_norm) * rs;
    }
  }
  EXPECT_LT(testutil::max_rel_diff(dx.data, rdx, 1e-4), 1e-4);
  EXPECT_LT(testutil::max_rel_diff(dgamma.data, rdg, 1e-4), 1e-4);
  EXPECT_LT(testutil::max_rel_diff(dbeta.data, rdb, 1e-4), 1e-4);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks (f32, rel < 1e-2)
// ---------------------------------------------------------------------------

TEST(GradCheck, Linear) {
  Rng rng(4);
  Tensor x = random_tensor(rng, {6, 5});
  Tensor w = random_tensor(rng, {5, 4});
  Tensor b = random_tensor(rng, {4});
  const Tensor head = random_tensor(rng, {6, 4});
  Tensor out({6, 4});
  const auto loss = [&] {
    linear_forward(x, w, &b, out);
    return weighted_sum(out, head);
  };
  loss();
  Tensor dx({6, 5}), dw({5, 4}), db({4});
  linear_backward(x, w, head, &dx, dw, &db);
  EXPECT_LT(fd_check(x, dx, loss).max_rel, 1e-2);
  EXPECT_LT(fd_check(w, dw, loss).max_rel, 1e-2);
  EXPECT_LT(fd_check(b, db, loss).max_rel, 1e-2);
}

TEST(GradCheck, LayerNorm) {
  Rng rng(5);
  Tensor x = random_tensor(rng, {4, 8}, 2.0f);
  Tensor gamma = random_tensor(rng, {8});
  Tensor beta = random_tensor(rng, {8});
  const Tensor head = random_tensor(rng, {4, 8});
  Tensor out({4, 8}), mean({4}), rstd({4});
  const auto loss = [&] {
    layer_norm_forward(x, gamma, beta, 1e-5f, out, mean, rstd);
    return weighted_sum(out, head);
  };
  loss();
  Tensor dx({4, 8}), dgamma({8}), dbeta({8});
  layer_norm_backward(x, gamma, mean, rstd, head, dx, dgamma, dbeta);
  EXPECT_LT(fd_check(x, dx, loss, 1e-2, 1e-3).max_rel, 1e-2);
  EXPECT_LT(fd_check(gamma, dgamma, loss).max_rel, 1e-2);
  EXPECT_LT(fd_check(beta, dbeta, loss).max_rel, 1e-2);
}

TEST(GradCheck, Gelu) {
  Rng rng(6);
  Tensor x = random_tensor(rng, {40}, 3.0f);
  const Tensor head = random_tensor(rng, {40});
  Tensor out({40});
  const auto loss = [&] {
    gelu_forward(x, out);
    return weighted_sum(out, head);
  };
  loss();
  Tensor dx({40});
  gelu_backward(x, head, dx);
  EXPECT_LT(fd_check(x, dx, loss).max_rel, 1e-2);
}

TEST(GradCheck, CrossEntropyMasked) {
  Rng rng(7);
  const int n = 12, c = kNumSymbols;
  Tensor logits = random_tensor(rng, {n, c}, 2.0f);
  std::vector<std::uint8_t> target(n), mask(n);
  for (int i = 0; i < n; ++i) {
    target[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(rng.uniform_int(0, c - 1));
    mask[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i % 3 != 0);
  }
  const auto loss = [&] {
    return cross_entropy_masked(logits, target.data(), mask.data(), n, nullptr);
  };
  Tensor dlogits({n, c});
  cross_entropy_masked(logits, target.data(), mask.data(), n, &dlogits);
  EXPECT_LT(fd_check(logits, dlogits, loss, 1e-3, 1e-4).max_rel, 1e-2);
  // Unmasked rows contribute nothing.
  for (int i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)]) continue;
    for (int s = 0; s < c; ++s) EXPECT_EQ(dlogits.data[i * c + s], 0.0f);
  }
  // Each masked row's gradient sums to ~zero (softmax minus one-hot).
  for (int i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    float s = 0.0f;
    for (int sym = 0; sym < c; ++sym) s += dlogits.data[i * c + sym];
    EXPECT_NEAR(s, 0.0f, 1e-5f);
  }
}

TEST(GradCheck, AttentionPlain) {
  Rng rng(8);
  const int B = 2, T = 5, D = 8, H = 2;
  Tensor q = random_tensor(rng, {B, T, D});
  Tensor k = random_tensor(rng, {B, T, D});
  Tensor v = random_tensor(rng, {B, T, D});
  const Tensor head = random_tensor(rng, {B, T, D});
  Tensor out({B, T, D});
  AttnScratch ws;
  const auto loss = [&] {
    attention_forward(q, k, v, H, nullptr, nullptr, false, out, ws);
    return weighted_sum(out, head);
  };
  loss();
  Tensor dq({B, T, D}), dk({B, T, D}), dv({B, T, D});
  attention_backward(q, k, v, H, nullptr, false, head, ws, dq, dk, dv);
  EXPECT_LT(fd_check(q, dq, loss, 1e-2, 1e-3).max_rel, 1e-2);
  EXPECT_LT(fd_check(k, dk, loss, 1e-2, 1e-3).max_rel, 1e-2);
  EXPECT_LT(fd_check(v, dv, loss, 1e-2, 1e-3).max_rel, 1e-2);
}

TEST(GradCheck, AttentionWithRopeMaskAndExemptToken) {
  Rng rng(9);
  const int B = 2, T = 7, D = 8, H = 2, hd = D / H;
  const RopeTable rope = build_rope2d(2, 3, hd, 10000.0f, /*leading_pad=*/1);
  ASSERT_EQ(rope.tokens(), T);
  Tensor q = random_tensor(rng, {B, T, D});
  Tensor k = random_tensor(rng, {B, T, D});
  Tensor v = random_tensor(rng, {B, T, D});
  std::vector<std::uint8_t> key_mask(static_cast<std::size_t>(B) * T, 0);
  key_mask[3] = 1;               // batch 0, token 3 suppressed
  key_mask[static_cast<std::size_t>(T) + 5] = 1;  // batch 1, token 5
  const Tensor head = random_tensor(rng, {B, T, D});
  Tensor out({B, T, D});
  AttnScratch ws;
  const auto loss = [&] {
    attention_forward(q, k, v, H, key_mask.data(), &rope, true, out, ws);
    return weighted_sum(out, head);
  };
  loss();
  // Masked keys receive exactly zero attention.
  for (int h = 0; h < H; ++h) {
    for (int i = 0; i < T; ++i) {
      EXPECT_EQ(ws.probs.data[((0 * H + h) * T + i) * T + 3], 0.0f);
      EXPECT_EQ(ws.probs.data[((1 * H + h) * T + i) * T + 5], 0.0f);
    }
  }
  Tensor dq({B, T, D}), dk({B, T, D}), dv({B, T, D});
  attention_backward(q, k, v, H, &rope, true, head, ws, dq, dk, dv);
  EXPECT_LT(fd_check(q, dq, loss, 1e-2, 1e-3).max_rel, 1e-2);
  EXPECT_LT(fd_check(k, dk, loss, 1e-2, 1e-3).max_rel, 1e-2);
  EXPECT_LT(fd_check(v, dv, loss, 1e-2, 1e-3).max_rel, 1e-2);
}

TEST(GradCheck, EmbeddingBackwardAccumulatesPerRow) {
  Rng rng(10);
  Tensor table = random_tensor(rng, {5, 3});
  const std::int32_t idx[4] = {1, 3, 1, 0};
  Tensor out({4, 3});
  embedding_forward(table, idx, 4, out);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(out.data[i * 3 + c], table.data[idx[i] * 3 + c]);

  Tensor dout({4, 3});
  for (auto& g : dout.data) g = 1.0f;
  Tensor dtable({5, 3});
  embedding_backward(idx, 4, dout, dtable);
  // Row 1 referenced twice, rows 0 and 3 once, rows 2 and 4 never.
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(dtable.data[0 * 3 + c], 1.0f);
    EXPECT_EQ(dtable.data[1 * 3 + c], 2.0f);
    EXPECT_EQ(dtable.data[2 * 3 + c], 0.0f);
    EXPECT_EQ(dtable.data[3 * 3 + c], 1.0f);
    EXPECT_EQ(dtable.data[4 * 3 + c], 0.0f);
  }
  const std::int32_t bad[1] = {5};
  Tensor tiny({1, 3});
  EXPECT_THROW(embedding_forward(table, bad, 1, tiny), Error);
}

// ---------------------------------------------------------------------------
// Pointwise op semantics
// ---------------------------------------------------------------------------

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  Tensor x = random_tensor(rng, {6, 9}, 4.0f);
  Tensor out({6, 9});
  softmax_forward(x, out);
  for (int r = 0; r < 6; ++r) {
    float s = 0.0f;
    for (int c = 0; c < 9; ++c) s += out.data[r * 9 + c];
    EXPECT_NEAR(s, 1.0f, 1e-5f);
  }
  Tensor shifted = x;
  for (auto& v : shifted.data) v += 100.0f;
  Tensor out2({6, 9});
  softmax_forward(shifted, out2);
  for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.data[i], out2.data[i], 1e-6f);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Tensor logits({4, kNumSymbols});
  std::vector<std::uint8_t> target(4, 3), mask(4, 1);
  const double loss = cross_entropy_masked(logits, target.data(), mask.data(), 4, nullptr);
  EXPECT_NEAR(loss, std::log(static_cast<double>(kNumSymbols)), 1e-6);
  mask.assign(4, 0);
  EXPECT_THROW(cross_entropy_masked(logits, target.data(), mask.data(), 4, nullptr), Error);
}

TEST(Dropout, SemanticsAndScaling) {
  Rng rng(12);
  Tensor x = random_tensor(rng, {5000});
  Tensor out({5000}), mask({5000});
  // Inference mode and rate zero are identities.
  dropout_forward(x, 0.5f, false, rng, out, mask);
  EXPECT_EQ(out.data, x.data);
  dropout_forward(x, 0.0f, true, rng, out, mask);
  EXPECT_EQ(out.data, x.data);

  const float rate = 0.3f;
  dropout_forward(x, rate, true, rng, out, mask);
  int kept = 0;
  const float scale = 1.0f / (1.0f - rate);
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    ASSERT_TRUE(mask.data[i] == 0.0f || mask.data[i] == scale);
    EXPECT_EQ(out.data[i], x.data[i] * mask.data[i]);
    kept += mask.data[i] != 0.0f;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 5000.0, 1.0 - rate, 0.03);

  Tensor dout({5000});
  for (auto& g : dout.data) g = 2.0f;
  Tensor dx({5000});
  dropout_backward(dout, mask, dx);
  for (std::int64_t i = 0; i < dx.numel(); ++i) EXPECT_EQ(dx.data[i], 2.0f * mask.data[i]);
}

// ---------------------------------------------------------------------------
// Rotary tables
// ---------------------------------------------------------------------------

TEST(Rope, RotationPreservesNormAndPadRowsAreIdentity) {
  Rng rng(13);
  const int hd = 8;
  const RopeTable t = build_rope2d(3, 4, hd, 10000.0f, /*leading_pad=*/1);
  ASSERT_EQ(t.tokens(), 13);
  std::vector<float> v(hd), out(hd);
  for (auto& x : v) x = rng.uniform_float() * 2 - 1;
  for (std::int64_t tok = 0; tok < t.tokens(); ++tok) {
    rope_rotate(v.data(), t.cos_t.ptr() + tok * hd / 2, t.sin_t.ptr() + tok * hd / 2, hd, false,
                out.data());
    double n1 = 0, n2 = 0;
    for (int i = 0; i < hd; ++i) {
      n1 += static_cast<double>(v[i]) * v[i];
      n2 += static_cast<double>(out[i]) * out[i];
    }
    EXPECT_NEAR(n1, n2, 1e-4);
  }
  // The pad row rotates by angle zero.
  rope_rotate(v.data(), t.cos_t.ptr(), t.sin_t.ptr(), hd, false, out.data());
  for (int i = 0; i < hd; ++i) EXPECT_FLOAT_EQ(out[i], v[i]);
  // Inverse rotation undoes the forward one.
  std::vector<float> back(hd);
  const std::int64_t tok = 7;
  rope_rotate(v.data(), t.cos_t.ptr() + tok * hd / 2, t.sin_t.ptr() + tok * hd / 2, hd, false,
              out.data());
  rope_rotate(out.data(), t.cos_t.ptr() + tok * hd / 2, t.sin_t.ptr() + tok * hd / 2, hd, true,
              back.data());
  for (int i = 0; i < hd; ++i) EXPECT_NEAR(back[i], v[i], 1e-5f);
}

TEST(Rope, SeparableAxesRespondToTheirOwnCoordinate) {
  Rng rng(14);
  const int hd = 8;
  Tensor x = random_tensor(rng, {1, hd});
  const Tensor same = x;
  // Moving only the row must leave the column half (first head_dim/2
  // channels) untouched, and vice versa.
  const Tensor a = rope2d_apply(same, {{2, 5}});
  const Tensor b = rope2d_apply(same, {{9, 5}});
  for (int i = 0; i < hd / 2; ++i) EXPECT_FLOAT_EQ(a.data[i], b.data[i]) << i;
  bool row_half_differs = false;
  for (int i = hd / 2; i < hd; ++i) row_half_differs |= a.data[i] != b.data[i];
  EXPECT_TRUE(row_half_differs);

  const Tensor c = rope2d_apply(same, {{2, 8}});
  for (int i = hd / 2; i < hd; ++i) EXPECT_FLOAT_EQ(a.data[i], c.data[i]) << i;
  bool col_half_differs = false;
  for (int i = 0; i < hd / 2; ++i) col_half_differs |= a.data[i] != c.data[i];
  EXPECT_TRUE(col_half_differs);
}

TEST(Rope, AttentionScoresDependOnlyOnRelativeOffsets) {
  Rng rng(15);
  const int hd = 8;
  Tensor q = random_tensor(rng, {1, hd});
  Tensor k = random_tensor(rng, {1, hd});
  const auto score = [&](int qr, int qc, int kr, int kc) {
    const Tensor qrot = rope2d_apply(q, {{qr, qc}});
    const Tensor krot = rope2d_apply(k, {{kr, kc}});
    double s = 0.0;
    for (int i = 0; i < hd; ++i) s += static_cast<double>(qrot.data[i]) * krot.data[i];
    return s;
  };
  // Translating query and key together anywhere on the lattice keeps the
  // score; moving only one changes it.
  const double base = score(3, 4, 6, 2);
  EXPECT_NEAR(score(13, 24, 16, 22), base, 1e-4);
  EXPECT_NEAR(score(0, 0, 3, -2), base, 1e-4);
  EXPECT_GT(std::abs(score(3, 4, 6, 3) - base), 1e-4);
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

TEST(Adam, MatchesDoubleReferenceOverSteps) {
  Rng rng(16);
  std::vector<Parameter> params;
  params.emplace_back("p", std::vector<std::int64_t>{10});
  params[0].value = random_tensor(rng, {10});
  std::vector<double> ref(params[0].value.data.begin(), params[0].value.data.end());
  std::vector<double> m(10, 0.0), v(10, 0.0);
  AdamState state;
  const AdamConfig cfg;
  const float lr = 1e-2f;
  for (int step = 1; step <= 5; ++step) {
    for (int i = 0; i < 10; ++i) {
      params[0].grad.data[static_cast<std::size_t>(i)] =
          static_cast<float>(0.1 * (i + 1) * step);
    }
    adam_step(params, state, lr, cfg);
    for (int i = 0; i < 10; ++i) {
      const double g = 0.1 * (i + 1) * step;
      m[static_cast<std::size_t>(i)] = cfg.beta1 * m[static_cast<std::size_t>(i)] + (1 - cfg.beta1) * g;
      v[static_cast<std::size_t>(i)] = cfg.beta2 * v[static_cast<std::size_t>(i)] + (1 - cfg.beta2) * g * g;
      const double mhat = m[static_cast<std::size_t>(i)] / (1 - std::pow(cfg.beta1, step));
      const double vhat = v[static_cast<std::size_t>(i)] / (1 - std::pow(cfg.beta2, step));
      ref[static_cast<std::size_t>(i)] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  EXPECT_LT(testutil::max_rel_diff(params[0].value.data, ref, 1e-5), 1e-4);
  EXPECT_EQ(state.t, 5);
}

TEST(Adam, SubsetFreezesEverythingElse) {
  Rng rng(17);
  std::vector<Parameter> params;
  params.emplace_back("a", std::vector<std::int64_t>{4});
  params.emplace_back("b", std::vector<std::int64_t>{4});
  params[0].value = random_tensor(rng, {4});
  params[1].value = random_tensor(rng, {4});
  for (auto& p : params)
    for (auto& g : p.grad.data) g = 1.0f;
  const Tensor before_a = params[0].value;
  const Tensor before_b = params[1].value;
  AdamState state;
  const std::vector<int> only_b{1};
  adam_step(params, state, 1e-2f, {}, &only_b);
  EXPECT_EQ(params[0].value.data, before_a.data);
  EXPECT_NE(params[1].value.data, before_b.data);
}

TEST(Schedule, ClosedFormOracle) {
  const LRSchedule s{1e-3, 10, 100, 7};
  const std::int64_t warmup = 10 * 7, total = 100 * 7;
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.0);
  EXPECT_NEAR(lr_at(s, warmup / 2), 0.5e-3, 1e-12);
  EXPECT_NEAR(lr_at(s, warmup), 1e-3, 1e-12);  // cosine starts at the peak
  const std::int64_t mid = warmup + (total - warmup) / 2;
  EXPECT_NEAR(lr_at(s, mid), 0.5e-3, 1e-9);
  EXPECT_NEAR(lr_at(s, total), 0.0, 1e-12);
  // Monotone decay after warmup.
  double prev = lr_at(s, warmup);
  for (std::int64_t t = warmup + 1; t <= total; ++t) {
    const double cur = lr_at(s, t);
    EXPECT_LE(cur, prev + 1e-15);
    prev = cur;
  }
  EXPECT_THROW(lr_at(s, total + 1), Error);
  EXPECT_THROW(lr_at(s, -1), Error);
  EXPECT_THROW(lr_at(LRSchedule{1e-3, 10, 10, 1}, 0), Error);
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

TEST(RngStream, DeterministicAndSplittable) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform_int(0, 1000), b.uniform_int(0, 1000));

  // split() is a pure function of the parent seed and tag.
  Rng parent(7);
  Rng c1 = parent.split(1);
  Rng c2 = parent.split(1);
  Rng c3 = parent.split(2);
  bool same13 = true;
  for (int i = 0; i < 50; ++i) {
    const int x1 = c1.uniform_int(0, 1 << 20);
    EXPECT_EQ(x1, c2.uniform_int(0, 1 << 20));
    same13 &= x1 == c3.uniform_int(0, 1 << 20);
  }
  EXPECT_FALSE(same13);

  // Drawing from the parent does not change what a child produces.
  Rng p1(9), p2(9);
  (void)p1.uniform_int(0, 100);
  (void)p1.uniform_int(0, 100);
  Rng d1 = p1.split(5);
  Rng d2 = p2.split(5);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(d1.uniform_int(0, 1000), d2.uniform_int(0, 1000));
}

TEST(RngStream, UniformBoundsAndShuffle) {
  Rng rng(18);
  for (int i = 0; i < 2000; ++i) {
    const int v = rng.uniform_int(3, 9);
    EXPECT_GE(v, 3);
    EXPECT_LE(v, 9);
    const float f = rng.uniform_float();
    EXPECT_GE(f, 0.0f);
    EXPECT_LT(f, 1.0f);
  }
  std::vector<std::uint8_t> v(20);
  std::iota(v.begin(), v.end(), 0);
  auto sorted = v;
  rng.shuffle(v);
  auto resorted = v;
  std::sort(resorted.begin(), resorted.end());
  EXPECT_EQ(resorted, sorted);  // still a permutation
}
