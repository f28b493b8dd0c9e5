#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "varc/common.hpp"
#include "varc/rng.hpp"
#include "varc/tensor.hpp"

namespace varc {

// ---------------------------------------------------------------------------
// Matrix multiply kernels (Eigen maps over raw row-major buffers)
// ---------------------------------------------------------------------------

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

// c[M,N] = a[M,K] * b[K,N], accumulating when add is set.
inline void matmul_nn(const float* a, const float* b, float* c, int m, int k, int n,
                      bool add = false) {
  detail::CMapMat A(a, m, k), B(b, k, n);
  detail::MapMat C(c, m, n);
  if (add)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// c[M,N] = a[M,K] * b[N,K]^T
inline void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n,
                      bool add = false) {
  detail::CMapMat A(a, m, k), B(b, n, k);
  detail::MapMat C(c, m, n);
  if (add)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// c[M,N] = a[K,M]^T * b[K,N]
inline void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n,
                      bool add = false) {
  detail::CMapMat A(a, k, m), B(b, k, n);
  detail::MapMat C(c, m, n);
  if (add)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

namespace detail {
inline std::int64_t leading_rows(const Tensor& x, std::int64_t last_dim, const char* who) {
  check(!x.shape.empty() && x.shape.back() == last_dim, Errc::ShapeMismatch,
        std::string(who) + ": trailing dimension mismatch");
  return x.numel() / last_dim;
}
}  // namespace detail

// out[.., Dout] = x[.., Din] @ w[Din, Dout] + b
inline void linear_forward(const Tensor& x, const Tensor& w, const Tensor* b, Tensor& out) {
  check(w.shape.size() == 2, Errc::ShapeMismatch, "linear: weight must be rank 2");
  const std::int64_t din = w.shape[0], dout = w.shape[1];
  const std::int64_t m = detail::leading_rows(x, din, "linear");
  check(out.numel() == m * dout, Errc::ShapeMismatch, "linear: output buffer size");
  matmul_nn(x.ptr(), w.ptr(), out.ptr(), static_cast<int>(m), static_cast<int>(din),
            static_cast<int>(dout));
  if (b) {
    check(b->numel() == dout, Errc::ShapeMismatch, "linear: bias size");
    for (std::int64_t r = 0; r < m; ++r) {
      float* row = out.ptr() + r * dout;
      for (std::int64_t c = 0; c < dout; ++c) row[c] += b->data[c];
    }
  }
}

// Accumulates gradients: dx += dout @ w^T; dw += x^T @ dout; db += colsum(dout).
inline void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dout, Tensor* dx,
                            Tensor& dw, Tensor* db) {
  const std::int64_t din = w.shape[0], dout_dim = w.shape[1];
  const std::int64_t m = detail::leading_rows(x, din, "linear_backward");
  check(dout.numel() == m * dout_dim, Errc::ShapeMismatch, "linear_backward: dout size");
  if (dx) {
    matmul_nt(dout.ptr(), w.ptr(), dx->ptr(), static_cast<int>(m), static_cast<int>(dout_dim),
              static_cast<int>(din), /*add=*/true);
  }
  matmul_tn(x.ptr(), dout.ptr(), dw.ptr(), static_cast<int>(din), static_cast<int>(m),
            static_cast<int>(dout_dim), /*add=*/true);
  if (db) {
    for (std::int64_t r = 0; r < m; ++r) {
      const float* row = dout.ptr() + r * dout_dim;
      for (std::int64_t c = 0; c < dout_dim; ++c) db->data[c] += row[c];
    }
  }
}

// ---------------------------------------------------------------------------
// Layer norm (over the trailing dimension)
// ---------------------------------------------------------------------------

inline void layer_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                               float eps, Tensor& out, Tensor& mean, Tensor& rstd) {
  const std::int64_t d = gamma.numel();
  const std::int64_t m = detail::leading_rows(x, d, "layer_norm");
  check(beta.numel() == d, Errc::ShapeMismatch, "layer_norm: beta size");
  check(mean.numel() == m && rstd.numel() == m, Errc::ShapeMismatch, "layer_norm: stat buffers");
  for (std::int64_t r = 0; r < m; ++r) {
    const float* xr = x.ptr() + r * d;
    float mu = 0.0f;
    for (std::int64_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (std::int64_t c = 0; c < d; ++c) {
      const float diff = xr[c] - mu;
      var += diff * diff;
    }
    var /= static_cast<float>(d);
    const float rs = 1.0f / std::sqrt(var + eps);
    mean.data[r] = mu;
    rstd.data[r] = rs;
    float* outr = out.ptr() + r * d;
    for (std::int64_t c = 0; c < d; ++c) {
      outr[c] = (xr[c] - mu) * rs * gamma.data[c] + beta.data[c];
    }
  }
}

inline void layer_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& mean,
                                const Tensor& rstd, const Tensor& dout, Tensor& dx,
                                Tensor& dgamma, Tensor& dbeta) {
  const std::int64_t d = gamma.numel();
  const std::int64_t m = detail::leading_rows(x, d, "layer_norm_backward");
  for (std::int64_t r = 0; r < m; ++r) {
    const float* xr = x.ptr() + r * d;
    const float* doutr = dout.ptr() + r * d;
    float* dxr = dx.ptr() + r * d;
    const float mu = mean.data[r];
    const float rs = rstd.data[r];
    // Two reductions shared by every element of the row.
    float sum_dnorm = 0.0f, sum_dnorm_norm = 0.0f;
    for (std::int64_t c = 0; c < d; ++c) {
      const float norm = (xr[c] - mu) * rs;
      const float dnorm = doutr[c] * gamma.data[c];
      sum_dnorm += dnorm;
      sum_dnorm_norm += dnorm * norm;
    }
    sum_dnorm /= static_cast<float>(d);
    sum_dnorm_norm /= static_cast<float>(d);
    for (std::int64_t c = 0; c < d; ++c) {
      const float norm = (xr[c] - mu) * rs;
      const float dnorm = doutr[c] * gamma.data[c];
      dxr[c] += (dnorm - sum_dnorm - norm * sum_dnorm_norm) * rs;
      dgamma.data[c] += doutr[c] * norm;
      dbeta.data[c] += doutr[c];
    }
  }
}

// ---------------------------------------------------------------------------
// Softmax (over the trailing dimension; in-place allowed)
// ---------------------------------------------------------------------------

inline void softmax_forward(const float* x, float* out, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* outr = out + r * cols;
    float maxv = xr[0];
    for (std::int64_t c = 1; c < cols; ++c) maxv = std::max(maxv, xr[c]);
    float sum = 0.0f;
    for (std::int64_t c = 0; c < cols; ++c) {
      outr[c] = std::exp(xr[c] - maxv);
      sum += outr[c];
    }
    const float inv = 1.0f / sum;
    for (std::int64_t c = 0; c < cols; ++c) outr[c] *= inv;
  }
}

inline void softmax_forward(const Tensor& x, Tensor& out) {
  check(!x.shape.empty() && x.same_shape(out), Errc::ShapeMismatch, "softmax: shape");
  const std::int64_t cols = x.shape.back();
  softmax_forward(x.ptr(), out.ptr(), x.numel() / cols, cols);
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

inline void gelu_forward(const Tensor& x, Tensor& out) {
  constexpr float kScale = 0.7978845608028654f;  // sqrt(2/pi)
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const float v = x.data[i];
    const float cube = 0.044715f * v * v * v;
    out.data[i] = 0.5f * v * (1.0f + std::tanh(kScale * (v + cube)));
  }
}

inline void gelu_backward(const Tensor& x, const Tensor& dout, Tensor& dx) {
  constexpr float kScale = 0.7978845608028654f;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const float v = x.data[i];
    const float cube = 0.044715f * v * v * v;
    const float t = std::tanh(kScale * (v + cube));
    const float sech2 = 1.0f - t * t;
    const float local = 0.5f * (1.0f + t) +
                        0.5f * v * sech2 * kScale * (1.0f + 3.0f * 0.044715f * v * v);
    dx.data[i] += dout.data[i] * local;
  }
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity at rate 0 or in inference mode)
// ---------------------------------------------------------------------------

inline void dropout_forward(const Tensor& x, float rate, bool train, Rng& rng, Tensor& out,
                            Tensor& mask) {
  check(rate >= 0.0f && rate < 1.0f, Errc::BadConfig, "dropout rate must be in [0, 1)");
  if (!train || rate == 0.0f) {
    std::fill(mask.data.begin(), mask.data.end(), 1.0f);
    out.data = x.data;
    return;
  }
  const float keep = 1.0f - rate;
  const float scale = 1.0f / keep;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    mask.data[i] = rng.uniform_float() < keep ? scale : 0.0f;
    out.data[i] = x.data[i] * mask.data[i];
  }
}

inline void dropout_backward(const Tensor& dout, const Tensor& mask, Tensor& dx) {
  for (std::int64_t i = 0; i < dout.numel(); ++i) dx.data[i] += dout.data[i] * mask.data[i];
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

inline void embedding_forward(const Tensor& table, const std::int32_t* idx, std::int64_t n,
                              Tensor& out) {
  const std::int64_t d = table.shape[1];
  for (std::int64_t i = 0; i < n; ++i) {
    check(idx[i] >= 0 && idx[i] < table.shape[0], Errc::TaskIndexOutOfRange,
          "embedding index " + std::to_string(idx[i]) + " out of range");
    const float* src = table.ptr() + static_cast<std::int64_t>(idx[i]) * d;
    std::copy(src, src + d, out.ptr() + i * d);
  }
}

inline void embedding_backward(const std::int32_t* idx, std::int64_t n, const Tensor& dout,
                               Tensor& dtable) {
  const std::int64_t d = dtable.shape[1];
  for (std::int64_t i = 0; i < n; ++i) {
    float* dst = dtable.ptr() + static_cast<std::int64_t>(idx[i]) * d;
    const float* src = dout.ptr() + i * d;
    for (std::int64_t c = 0; c < d; ++c) dst[c] += src[c];
  }
}

// ---------------------------------------------------------------------------
// Rotary position encoding
// ---------------------------------------------------------------------------

/// Per-token rotation angles, stored as cos/sin per channel pair: shape
// [T, head_dim/2]. Frequencies are shared across heads.
struct RopeTable {
  int head_dim = 0;
  Tensor cos_t;
  Tensor sin_t;

  std::int64_t tokens() const { return cos_t.shape.empty() ? 0 : cos_t.shape[0]; }
};

// Separable 2D table: the first half of each head's channels rotates by
// angles proportional to the column, the second half by the row. Positions
// are row-major over an n_rows x n_cols patch lattice; leading_pad extra
// rows at angle zero come first (used for tokens without coordinates).
inline RopeTable build_rope2d(int n_rows, int n_cols, int head_dim, float base = 10000.0f,
                              int leading_pad = 0) {
  check(head_dim % 4 == 0, Errc::BadConfig, "rope2d needs head_dim divisible by 4");
  RopeTable t;
  t.head_dim = head_dim;
  const int pairs = head_dim / 2;
  const int half_pairs = head_dim / 4;
  const std::int64_t tokens = leading_pad + static_cast<std::int64_t>(n_rows) * n_cols;
  t.cos_t = Tensor({tokens, pairs});
  t.sin_t = Tensor({tokens, pairs});
  const float d = static_cast<float>(head_dim / 2);
  for (std::int64_t tok = 0; tok < tokens; ++tok) {
    const bool pad = tok < leading_pad;
    const std::int64_t pos = pad ? 0 : tok - leading_pad;
    const float row = static_cast<float>(pos / n_cols);
    const float col = static_cast<float>(pos % n_cols);
    for (int p = 0; p < pairs; ++p) {
      const int freq_index = p < half_pairs ? p : p - half_pairs;
      const float theta = std::pow(base, -2.0f * static_cast<float>(freq_index) / d);
      const float coord = p < half_pairs ? col : row;
      const float angle = pad ? 0.0f : theta * coord;
      t.cos_t.data[tok * pairs + p] = std::cos(angle);
      t.sin_t.data[tok * pairs + p] = std::sin(angle);
    }
  }
  return t;
}

// Standard 1D table over flattened token positions.
inline RopeTable build_rope1d(std::int64_t n_tokens, int head_dim, float base = 10000.0f,
                              int leading_pad = 0) {
  check(head_dim % 2 == 0, Errc::BadConfig, "rope1d needs head_dim divisible by 2");
  RopeTable t;
  t.head_dim = head_dim;
  const int pairs = head_dim / 2;
  const std::int64_t tokens = leading_pad + n_tokens;
  t.cos_t = Tensor({tokens, pairs});
  t.sin_t = Tensor({tokens, pairs});
  const float d = static_cast<float>(head_dim);
  for (std::int64_t tok = 0; tok < tokens; ++tok) {
    const bool pad = tok < leading_pad;
    const float pos = pad ? 0.0f : static_cast<float>(tok - leading_pad);
    for (int p = 0; p < pairs; ++p) {
      const float theta = std::pow(base, -2.0f * static_cast<float>(p) / d);
      const float angle = theta * pos;
      t.cos_t.data[tok * pairs + p] = std::cos(angle);
      t.sin_t.data[tok * pairs + p] = std::sin(angle);
    }
  }
  return t;
}

// Rotate one head vector by the table row; invert = rotate by the negated
// angle (used for the backward pass, since rotations are orthonormal).
inline void rope_rotate(const float* x, const float* cos_row, const float* sin_row, int head_dim,
                        bool invert, float* out) {
  const int pairs = head_dim / 2;
  for (int p = 0; p < pairs; ++p) {
    const float c = cos_row[p];
    const float s = invert ? -sin_row[p] : sin_row[p];
    const float x0 = x[2 * p];
    const float x1 = x[2 * p + 1];
    out[2 * p] = x0 * c - x1 * s;
    out[2 * p + 1] = x0 * s + x1 * c;
  }
}

// Rotate a [T, head_dim] tensor given explicit (row, col) coordinates per
// token: the separable-2D rotation as a standalone transform.
inline Tensor rope2d_apply(const Tensor& x, const std::vector<std::pair<int, int>>& coords,
                           float base = 10000.0f) {
  check(x.shape.size() == 2, Errc::ShapeMismatch, "rope2d_apply expects [T, head_dim]");
  const std::int64_t t_count = x.shape[0];
  const int head_dim = static_cast<int>(x.shape[1]);
  check(head_dim % 4 == 0, Errc::ShapeMismatch, "rope2d needs head_dim divisible by 4");
  check(static_cast<std::int64_t>(coords.size()) == t_count, Errc::ShapeMismatch,
        "rope2d_apply: one coordinate pair per token");
  const int pairs = head_dim / 2;
  const int half_pairs = head_dim / 4;
  const float d = static_cast<float>(head_dim / 2);
  Tensor out(x.shape);
  std::vector<float> cos_row(pairs), sin_row(pairs);
  for (std::int64_t tok = 0; tok < t_count; ++tok) {
    for (int p = 0; p < pairs; ++p) {
      const int freq_index = p < half_pairs ? p : p - half_pairs;
      const float theta = std::pow(base, -2.0f * static_cast<float>(freq_index) / d);
      const float coord = p < half_pairs ? static_cast<float>(coords[tok].second)
                                         : static_cast<float>(coords[tok].first);
      cos_row[p] = std::cos(theta * coord);
      sin_row[p] = std::sin(theta * coord);
    }
    rope_rotate(x.ptr() + tok * head_dim, cos_row.data(), sin_row.data(), head_dim, false,
                out.ptr() + tok * head_dim);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

// Workspace reused across steps; buffers grow on demand and are kept between
// calls. probs / qr / kr persist from forward to backward.
struct AttnScratch {
  Tensor qr, kr;          // [B, T, D] rotated queries/keys
  Tensor probs;           // [B, H, T, T] attention weights
  Tensor qh, kh, vh;      // [T, hd] per-head gathers
  Tensor outh;            // [T, hd]
  Tensor scores;          // [T, T]
  Tensor row_scores;      // [T, T] gradient temp
  Tensor douth;           // [T, hd]
  Tensor dqh, dkh, dvh;   // [T, hd]

  // Inspection hook: when set, the forward pass keeps every head's
  // pre-softmax score matrix (after scaling, exemption and masking) in
  // scores_all with shape [B, H, T, T].
  bool capture_scores = false;
  Tensor scores_all;

  static void ensure(Tensor& t, std::vector<std::int64_t> shape) {
    if (t.shape != shape) t = Tensor(std::move(shape));
  }
};

namespace detail {

inline void gather_head(const Tensor& src, std::int64_t b, int h, std::int64_t t_count, int d,
                        int hd, Tensor& dst) {
  const float* base = src.ptr() + b * t_count * d + static_cast<std::int64_t>(h) * hd;
  for (std::int64_t t = 0; t < t_count; ++t) {
    std::copy(base + t * d, base + t * d + hd, dst.ptr() + t * hd);
  }
}

inline void scatter_head_add(const Tensor& src, std::int64_t b, int h, std::int64_t t_count,
                             int d, int hd, Tensor& dst) {
  float* base = dst.ptr() + b * t_count * d + static_cast<std::int64_t>(h) * hd;
  for (std::int64_t t = 0; t < t_count; ++t) {
    const float* row = src.ptr() + t * hd;
    for (int c = 0; c < hd; ++c) base[t * d + c] += row[c];
  }
}

inline void scatter_head_set(const Tensor& src, std::int64_t b, int h, std::int64_t t_count,
                             int d, int hd, Tensor& dst) {
  float* base = dst.ptr() + b * t_count * d + static_cast<std::int64_t>(h) * hd;
  for (std::int64_t t = 0; t < t_count; ++t) {
    std::copy(src.ptr() + t * hd, src.ptr() + t * hd + hd, base + t * d);
  }
}

}  // namespace detail

constexpr float kAttnMaskValue = -1e9f;

// Scaled dot-product attention over [B, T, D] with optional rotary tables
// and key masking. key_mask is [B*T] with nonzero = suppress that key
// (masked logits get -1e9 before softmax, so their weights underflow to
// exactly zero). When exempt_token0 is set, token 0 of every sequence is a
// coordinate-free extra token: its query row and key column are computed
// from the unrotated vectors, and it is never maskable. Callers must pass
// the same flags to the matching backward call.
inline void attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                              const std::uint8_t* key_mask, const RopeTable* rope,
                              bool exempt_token0, Tensor& out, AttnScratch& ws) {
  check(q.shape.size() == 3 && q.same_shape(k) && q.same_shape(v), Errc::ShapeMismatch,
        "attention expects matching [B, T, D] inputs");
  const std::int64_t b_count = q.shape[0];
  const std::int64_t t_count = q.shape[1];
  const int d = static_cast<int>(q.shape[2]);
  check(d % heads == 0, Errc::ShapeMismatch, "attention: hidden dim not divisible by heads");
  const int hd = d / heads;
  check(!rope || (rope->head_dim == hd && rope->tokens() == t_count), Errc::ShapeMismatch,
        "attention: rope table does not match sequence");
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

  if (rope) {
    AttnScratch::ensure(ws.qr, {b_count, t_count, d});
    AttnScratch::ensure(ws.kr, {b_count, t_count, d});
    for (std::int64_t bb = 0; bb < b_count; ++bb) {
      for (std::int64_t t = 0; t < t_count; ++t) {
        const float* cos_row = rope->cos_t.ptr() + t * (hd / 2);
        const float* sin_row = rope->sin_t.ptr() + t * (hd / 2);
        const std::int64_t off = (bb * t_count + t) * d;
        for (int h = 0; h < heads; ++h) {
          if (exempt_token0 && t == 0) {
            std::copy(q.ptr() + off + h * hd, q.ptr() + off + (h + 1) * hd,
                      ws.qr.ptr() + off + h * hd);
            std::copy(k.ptr() + off + h * hd, k.ptr() + off + (h + 1) * hd,
                      ws.kr.ptr() + off + h * hd);
          } else {
            rope_rotate(q.ptr() + off + h * hd, cos_row, sin_row, hd, false,
                        ws.qr.ptr() + off + h * hd);
            rope_rotate(k.ptr() + off + h * hd, cos_row, sin_row, hd, false,
                        ws.kr.ptr() + off + h * hd);
          }
        }
      }
    }
  }
  const Tensor& qeff = rope ? ws.qr : q;
  const Tensor& keff = rope ? ws.kr : k;

  AttnScratch::ensure(ws.probs, {b_count, heads, t_count, t_count});
  AttnScratch::ensure(ws.qh, {t_count, hd});
  AttnScratch::ensure(ws.kh, {t_count, hd});
  AttnScratch::ensure(ws.vh, {t_count, hd});
  AttnScratch::ensure(ws.outh, {t_count, hd});
  AttnScratch::ensure(ws.scores, {t_count, t_count});

  for (std::int64_t bb = 0; bb < b_count; ++bb) {
    for (int h = 0; h < heads; ++h) {
      detail::gather_head(qeff, bb, h, t_count, d, hd, ws.qh);
      detail::gather_head(keff, bb, h, t_count, d, hd, ws.kh);
      detail::gather_head(v, bb, h, t_count, d, hd, ws.vh);
      matmul_nt(ws.qh.ptr(), ws.kh.ptr(), ws.scores.ptr(), static_cast<int>(t_count), hd,
                static_cast<int>(t_count));

      if (rope && exempt_token0) {
        // Token 0 carries no coordinates: its interactions use raw q/k so
        // the remaining scores stay purely relative.
        const float* q0 = q.ptr() + bb * t_count * d + h * hd;
        const float* k0 = k.ptr() + bb * t_count * d + h * hd;
        for (std::int64_t t = 0; t < t_count; ++t) {
          const float* kt = k.ptr() + (bb * t_count + t) * d + h * hd;
          const float* qt = q.ptr() + (bb * t_count + t) * d + h * hd;
          float dot_q0k = 0.0f, dot_qk0 = 0.0f;
          for (int c = 0; c < hd; ++c) {
            dot_q0k += q0[c] * kt[c];
            dot_qk0 += qt[c] * k0[c];
          }
          ws.scores.data[t] = dot_q0k;                  // row 0
          ws.scores.data[t * t_count] = dot_qk0;        // column 0
        }
      }

      for (std::int64_t i = 0; i < t_count * t_count; ++i) ws.scores.data[i] *= inv_sqrt;

      if (key_mask) {
        for (std::int64_t j = 0; j < t_count; ++j) {
          if (!key_mask[bb * t_count + j]) continue;
          if (exempt_token0 && j == 0) continue;
          for (std::int64_t i = 0; i < t_count; ++i) {
            ws.scores.data[i * t_count + j] += kAttnMaskValue;
          }
        }
      }

      if (ws.capture_scores) {
        AttnScratch::ensure(ws.scores_all, {b_count, heads, t_count, t_count});
        std::copy(ws.scores.data.begin(), ws.scores.data.end(),
                  ws.scores_all.ptr() + ((bb * heads + h) * t_count) * t_count);
      }
      float* probs = ws.probs.ptr() + ((bb * heads + h) * t_count) * t_count;
      softmax_forward(ws.scores.ptr(), probs, t_count, t_count);
      matmul_nn(probs, ws.vh.ptr(), ws.outh.ptr(), static_cast<int>(t_count),
                static_cast<int>(t_count), hd);
      detail::scatter_head_set(ws.outh, bb, h, t_count, d, hd, out);
    }
  }
}

// Gradients accumulate into dq/dk/dv. Requires the scratch from the matching
// forward call (probs, and qr/kr when rope was used).
inline void attention_backward(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                               const RopeTable* rope, bool exempt_token0, const Tensor& dout,
                               AttnScratch& ws, Tensor& dq, Tensor& dk, Tensor& dv) {
  const std::int64_t b_count = q.shape[0];
  const std::int64_t t_count = q.shape[1];
  const int d = static_cast<int>(q.shape[2]);
  const int hd = d / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  const Tensor& qeff = rope ? ws.qr : q;
  const Tensor& keff = rope ? ws.kr : k;

  AttnScratch::ensure(ws.douth, {t_count, hd});
  AttnScratch::ensure(ws.dqh, {t_count, hd});
  AttnScratch::ensure(ws.dkh, {t_count, hd});
  AttnScratch::ensure(ws.dvh, {t_count, hd});
  AttnScratch::ensure(ws.scores, {t_count, t_count});
  AttnScratch::ensure(ws.row_scores, {t_count, t_count});

  for (std::int64_t bb = 0; bb < b_count; ++bb) {
    for (int h = 0; h < heads; ++h) {
      detail::gather_head(dout, bb, h, t_count, d, hd, ws.douth);
      detail::gather_head(v, bb, h, t_count, d, hd, ws.vh);
      const float* probs = ws.probs.ptr() + ((bb * heads + h) * t_count) * t_count;

      // d_probs = dout @ v^T ; d_v = probs^T @ dout
      matmul_nt(ws.douth.ptr(), ws.vh.ptr(), ws.scores.ptr(), static_cast<int>(t_count), hd,
                static_cast<int>(t_count));
      matmul_tn(probs, ws.douth.ptr(), ws.dvh.ptr(), static_cast<int>(t_count),
                static_cast<int>(t_count), hd);
      detail::scatter_head_add(ws.dvh, bb, h, t_count, d, hd, dv);

      // Softmax backward into ds (stored in row_scores), then rescale.
      for (std::int64_t i = 0; i < t_count; ++i) {
        const float* pr = probs + i * t_count;
        const float* dpr = ws.scores.ptr() + i * t_count;
        float dot = 0.0f;
        for (std::int64_t j = 0; j < t_count; ++j) dot += pr[j] * dpr[j];
        float* dsr = ws.row_scores.ptr() + i * t_count;
        for (std::int64_t j = 0; j < t_count; ++j) {
          dsr[j] = pr[j] * (dpr[j] - dot) * inv_sqrt;
        }
      }

      detail::gather_head(qeff, bb, h, t_count, d, hd, ws.qh);
      detail::gather_head(keff, bb, h, t_count, d, hd, ws.kh);

      const bool fixup = rope && exempt_token0;
      if (fixup) {
        // Route the raw-score row/column gradients directly to q/k, then
        // zero them so the rotated path only sees interior scores.
        float* dq_base = dq.ptr() + bb * t_count * d + h * hd;
        float* dk_base = dk.ptr() + bb * t_count * d + h * hd;
        const float* q_base = q.ptr() + bb * t_count * d + h * hd;
        const float* k_base = k.ptr() + bb * t_count * d + h * hd;
        // Row 0: scores[0][j] = q0 . kj (all j, including j = 0).
        for (std::int64_t j = 0; j < t_count; ++j) {
          const float g = ws.row_scores.data[j];
          if (g == 0.0f) continue;
          for (int c = 0; c < hd; ++c) {
            dq_base[c] += g * k_base[j * d + c];
            dk_base[j * d + c] += g * q_base[c];
          }
        }
        // Column 0, rows i >= 1: scores[i][0] = qi . k0.
        for (std::int64_t i = 1; i < t_count; ++i) {
          const float g = ws.row_scores.data[i * t_count];
          if (g == 0.0f) continue;
          for (int c = 0; c < hd; ++c) {
            dq_base[i * d + c] += g * k_base[c];
            dk_base[c] += g * q_base[i * d + c];
          }
        }
        for (std::int64_t j = 0; j < t_count; ++j) ws.row_scores.data[j] = 0.0f;
        for (std::int64_t i = 1; i < t_count; ++i) ws.row_scores.data[i * t_count] = 0.0f;
      }

      // dq_rot = ds @ k_rot ; dk_rot = ds^T @ q_rot
      matmul_nn(ws.row_scores.ptr(), ws.kh.ptr(), ws.dqh.ptr(), static_cast<int>(t_count),
                static_cast<int>(t_count), hd);
      matmul_tn(ws.row_scores.ptr(), ws.qh.ptr(), ws.dkh.ptr(), static_cast<int>(t_count),
                static_cast<int>(t_count), hd);

      if (rope) {
        // Undo the rotation on the gradients (inverse = negative angle).
        float* dq_base = dq.ptr() + bb * t_count * d + h * hd;
        float* dk_base = dk.ptr() + bb * t_count * d + h * hd;
        std::vector<float> tmp(hd);
        const std::int64_t start = exempt_token0 ? 1 : 0;
        for (std::int64_t t = start; t < t_count; ++t) {
          const float* cos_row = rope->cos_t.ptr() + t * (hd / 2);
          const float* sin_row = rope->sin_t.ptr() + t * (hd / 2);
          rope_rotate(ws.dqh.ptr() + t * hd, cos_row, sin_row, hd, true, tmp.data());
          for (int c = 0; c < hd; ++c) dq_base[t * d + c] += tmp[c];
          rope_rotate(ws.dkh.ptr() + t * hd, cos_row, sin_row, hd, true, tmp.data());
          for (int c = 0; c < hd; ++c) dk_base[t * d + c] += tmp[c];
        }
        // With exempt_token0, token 0 was handled entirely by the raw-score
        // fixup above, so its (zeroed) interior gradient rows are skipped.
      } else {
        detail::scatter_head_add(ws.dqh, bb, h, t_count, d, hd, dq);
        detail::scatter_head_add(ws.dkh, bb, h, t_count, d, hd, dk);
      }
    }
  }
}

// Single-sequence convenience wrapper: plain attention over [T, D].
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                   const std::vector<std::uint8_t>& key_mask,
                                   const RopeTable* rope = nullptr) {
  check(q.shape.size() == 2, Errc::ShapeMismatch, "multi_head_attention expects [T, D]");
  check(key_mask.empty() || static_cast<std::int64_t>(key_mask.size()) == q.shape[0],
        Errc::ShapeMismatch, "multi_head_attention: key mask length");
  Tensor q3({1, q.shape[0], q.shape[1]}), k3(q3.shape), v3(q3.shape);
  q3.data = q.data;
  k3.data = k.data;
  v3.data = v.data;
  Tensor out3(q3.shape);
  AttnScratch ws;
  attention_forward(q3, k3, v3, heads, key_mask.empty() ? nullptr : key_mask.data(), rope,
                    /*exempt_token0=*/false, out3, ws);
  Tensor out(q.shape);
  out.data = std::move(out3.data);
  return out;
}

// ---------------------------------------------------------------------------
// Masked cross-entropy
// ---------------------------------------------------------------------------

// logits [N, C]; target and mask are length N. Returns the mean negative
// log-likelihood over masked cells; when dlogits is given, accumulates
// grad_scale * (softmax - onehot) into the masked rows (grad_scale < 0
// means 1/masked_count, i.e., the gradient of the returned mean).
inline double cross_entropy_masked(const Tensor& logits, const std::uint8_t* target,
                                   const std::uint8_t* mask, std::int64_t n, Tensor* dlogits,
                                   double grad_scale = -1.0) {
  check(logits.shape.size() >= 1 && logits.numel() % n == 0, Errc::ShapeMismatch,
        "cross_entropy: logits do not factor into n rows");
  const std::int64_t c_count = logits.numel() / n;
  std::int64_t masked = 0;
  for (std::int64_t i = 0; i < n; ++i) masked += mask[i] ? 1 : 0;
  check(masked > 0, Errc::EmptyMask, "cross_entropy: mask selects no cells");
  const double scale = grad_scale < 0 ? 1.0 / static_cast<double>(masked) : grad_scale;

  double loss = 0.0;
  std::vector<float> probs(c_count);
  for (std::int64_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const float* row = logits.ptr() + i * c_count;
    softmax_forward(row, probs.data(), 1, c_count);
    const std::uint8_t t = target[i];
    check(t < c_count, Errc::ShapeMismatch, "cross_entropy: target symbol out of range");
    loss += -std::log(std::max(static_cast<double>(probs[t]), 1e-30));
    if (dlogits) {
      float* drow = dlogits->ptr() + i * c_count;
      for (std::int64_t s = 0; s < c_count; ++s) {
        drow[s] += static_cast<float>(scale * (probs[s] - (s == t ? 1.0f : 0.0f)));
      }
    }
  }
  return loss / static_cast<double>(masked);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// One moment pair per parameter, plus the shared step counter.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t t = 0;

  void reset(const std::vector<Parameter>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.value.shape);
      v.emplace_back(p.value.shape);
    }
    t = 0;
  }
};

// Updates every parameter, or only the listed indices when `subset` is given
// (the others stay frozen; their moments are kept but untouched).
inline void adam_step(std::vector<Parameter>& params, AdamState& state, float lr,
                      const AdamConfig& cfg = {}, const std::vector<int>* subset = nullptr) {
  if (state.m.size() != params.size()) state.reset(params);
  state.t += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.t));
  std::vector<int> all;
  if (!subset) {
    all.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) all[i] = static_cast<int>(i);
  }
  for (int pi : subset ? *subset : all) {
    const auto p = static_cast<std::size_t>(pi);
    Tensor& value = params[p].value;
    const Tensor& grad = params[p].grad;
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    for (std::int64_t i = 0; i < value.numel(); ++i) {
      const float g = grad.data[i];
      m.data[i] = cfg.beta1 * m.data[i] + (1.0f - cfg.beta1) * g;
      v.data[i] = cfg.beta2 * v.data[i] + (1.0f - cfg.beta2) * g * g;
      const float mhat = static_cast<float>(m.data[i] / bc1);
      const float vhat = static_cast<float>(v.data[i] / bc2);
      value.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup to base, then cosine decay to zero.
// ---------------------------------------------------------------------------

struct LRSchedule {
  double base_lr = 3e-4;
  std::int64_t warmup_epochs = 10;
  std::int64_t total_epochs = 100;
  std::int64_t steps_per_epoch = 1;
};

inline double lr_at(const LRSchedule& s, std::int64_t global_step) {
  check(s.warmup_epochs > 0 && s.warmup_epochs < s.total_epochs && s.steps_per_epoch > 0,
        Errc::BadConfig, "schedule requires 0 < warmup_epochs < total_epochs");
  const std::int64_t warmup = s.warmup_epochs * s.steps_per_epoch;
  const std::int64_t total = s.total_epochs * s.steps_per_epoch;
  check(global_step >= 0 && global_step <= total, Errc::StepOutOfRange,
        "step " + std::to_string(global_step) + " outside schedule of " + std::to_string(total));
  if (global_step < warmup) {
    return s.base_lr * static_cast<double>(global_step) / static_cast<double>(warmup);
  }
  const double progress =
      static_cast<double>(global_step - warmup) / static_cast<double>(total - warmup);
  return s.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

// Central differences on every element of x against the provided analytic
// gradient. eval() must recompute the scalar loss from the current contents
// of x. Elements where both gradients are below `floor` are skipped (there
// the finite difference is dominated by rounding noise).
inline double grad_check(const std::function<double()>& eval, Tensor& x, const Tensor& analytic,
                         double h = 1e-3, double floor = 1e-4) {
  check(x.same_shape(analytic), Errc::ShapeMismatch, "grad_check: shape mismatch");
  double max_rel = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const float orig = x.data[i];
    x.data[i] = static_cast<float>(orig + h);
    const double fp = eval();
    x.data[i] = static_cast<float>(orig - h);
    const double fm = eval();
    x.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double a = static_cast<double>(analytic.data[i]);
    const double denom = std::max(std::abs(a), std::abs(fd));
    if (denom < floor) continue;
    max_rel = std::max(max_rel, std::abs(a - fd) / denom);
  }
  return max_rel;
}

}  // namespace varc
