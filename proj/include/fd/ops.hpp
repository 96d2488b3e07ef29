#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "fd/rng.hpp"
#include "fd/tensor.hpp"

namespace fd {

enum class Mode { Train, Eval };

namespace kernels {

// c[M,N] += a[M,K] @ b[K,N]
template <typename S>
void gemm_nn_acc(const S* a, const S* b, S* c, i64 M, i64 K, i64 N) {
  for (i64 m = 0; m < M; ++m) {
    const S* arow = a + m * K;
    S* crow = c + m * N;
    for (i64 k = 0; k < K; ++k) {
      const S av = arow[k];
      const S* brow = b + k * N;
      for (i64 n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// c[M,P] += a[M,K] @ b[P,K]^T
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, i64 M, i64 K, i64 P) {
  for (i64 m = 0; m < M; ++m) {
    const S* arow = a + m * K;
    S* crow = c + m * P;
    for (i64 p = 0; p < P; ++p) {
      const S* brow = b + p * K;
      S acc = S(0);
      for (i64 k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[p] += acc;
    }
  }
}

// c[K,N] += a[M,K]^T @ d[M,N]
template <typename S>
void gemm_tn_acc(const S* a, const S* d, S* c, i64 M, i64 K, i64 N) {
  for (i64 m = 0; m < M; ++m) {
    const S* arow = a + m * K;
    const S* drow = d + m * N;
    for (i64 k = 0; k < K; ++k) {
      const S av = arow[k];
      S* crow = c + k * N;
      for (i64 n = 0; n < N; ++n) crow[n] += av * drow[n];
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  FD_CHECK(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = TensorT<S>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  out.attach({a, b}, [an, bn, on] {
    on->ensure_grad();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  FD_CHECK(a.shape() == b.shape(), "sub: shape mismatch");
  auto out = TensorT<S>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  out.attach({a, b}, [an, bn, on] {
    on->ensure_grad();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  FD_CHECK(a.shape() == b.shape(), "mul: shape mismatch");
  auto out = TensorT<S>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  out.attach({a, b}, [an, bn, on] {
    on->ensure_grad();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, double s) {
  auto out = TensorT<S>::zeros(x.shape());
  const auto& xv = x.value();
  auto& ov = out.value();
  const S sv = static_cast<S>(s);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * sv;
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, sv] {
    on->ensure_grad();
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * sv;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  FD_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul: incompatible shapes");
  const i64 M = a.dim(0), K = a.dim(1), N = b.dim(1);
  auto out = TensorT<S>::zeros({M, N});
  kernels::gemm_nn_acc(a.value().data(), b.value().data(), out.value().data(), M, K, N);
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  out.attach({a, b}, [an, bn, on, M, K, N] {
    on->ensure_grad();
    if (an->requires_grad) {
      an->ensure_grad();
      kernels::gemm_nt_acc(on->grad.data(), bn->value.data(), an->grad.data(), M, N, K);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      kernels::gemm_tn_acc(an->value.data(), on->grad.data(), bn->grad.data(), M, K, N);
    }
  });
  return out;
}

// y[..., Out] = x[..., In] @ w[In, Out] + b[Out], applied per leading row.
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  FD_CHECK(x.rank() >= 1 && w.rank() == 2, "linear: bad ranks");
  const i64 in = w.dim(0), out_dim = w.dim(1);
  FD_CHECK(x.dim(x.rank() - 1) == in, "linear: input width " + std::to_string(x.dim(x.rank() - 1)) +
                                          " does not match weight rows " + std::to_string(in));
  FD_CHECK(b.rank() == 1 && b.dim(0) == out_dim, "linear: bias width mismatch");
  const i64 rows = x.size() / in;
  Shape oshape = x.shape();
  oshape.back() = out_dim;
  auto out = TensorT<S>::zeros(oshape);
  kernels::gemm_nn_acc(x.value().data(), w.value().data(), out.value().data(), rows, in, out_dim);
  {
    auto& ov = out.value();
    const auto& bv = b.value();
    for (i64 r = 0; r < rows; ++r)
      for (i64 o = 0; o < out_dim; ++o) ov[static_cast<size_t>(r * out_dim + o)] += bv[static_cast<size_t>(o)];
  }
  auto *xn = x.node(), *wn = w.node(), *bn = b.node(), *on = out.node();
  out.attach({x, w, b}, [xn, wn, bn, on, rows, in, out_dim] {
    on->ensure_grad();
    if (xn->requires_grad) {
      xn->ensure_grad();
      kernels::gemm_nt_acc(on->grad.data(), wn->value.data(), xn->grad.data(), rows, out_dim, in);
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      kernels::gemm_tn_acc(xn->value.data(), on->grad.data(), wn->grad.data(), rows, in, out_dim);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (i64 r = 0; r < rows; ++r)
        for (i64 o = 0; o < out_dim; ++o) bn->grad[static_cast<size_t>(o)] += on->grad[static_cast<size_t>(r * out_dim + o)];
    }
  });
  return out;
}

// c[n] = a[n] @ b[n] over a batch of matrices.
template <typename S>
TensorT<S> bmm_nn(const TensorT<S>& a, const TensorT<S>& b) {
  FD_CHECK(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
           "bmm_nn: incompatible shapes");
  const i64 NB = a.dim(0), M = a.dim(1), K = a.dim(2), P = b.dim(2);
  auto out = TensorT<S>::zeros({NB, M, P});
  for (i64 i = 0; i < NB; ++i)
    kernels::gemm_nn_acc(a.value().data() + i * M * K, b.value().data() + i * K * P,
                         out.value().data() + i * M * P, M, K, P);
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  out.attach({a, b}, [an, bn, on, NB, M, K, P] {
    on->ensure_grad();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (i64 i = 0; i < NB; ++i) {
      const S* dc = on->grad.data() + i * M * P;
      if (an->requires_grad)
        kernels::gemm_nt_acc(dc, bn->value.data() + i * K * P, an->grad.data() + i * M * K, M, P, K);
      if (bn->requires_grad)
        kernels::gemm_tn_acc(an->value.data() + i * M * K, dc, bn->grad.data() + i * K * P, M, K, P);
    }
  });
  return out;
}

// c[n] = a[n] @ b[n]^T (shared trailing width), the q @ k^T form.
template <typename S>
TensorT<S> bmm_nt(const TensorT<S>& a, const TensorT<S>& b) {
  FD_CHECK(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
           "bmm_nt: incompatible shapes");
  const i64 NB = a.dim(0), M = a.dim(1), K = a.dim(2), P = b.dim(1);
  auto out = TensorT<S>::zeros({NB, M, P});
  for (i64 i = 0; i < NB; ++i)
    kernels::gemm_nt_acc(a.value().data() + i * M * K, b.value().data() + i * P * K,
                         out.value().data() + i * M * P, M, K, P);
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  out.attach({a, b}, [an, bn, on, NB, M, K, P] {
    on->ensure_grad();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (i64 i = 0; i < NB; ++i) {
      const S* dc = on->grad.data() + i * M * P;
      if (an->requires_grad)
        kernels::gemm_nn_acc(dc, bn->value.data() + i * P * K, an->grad.data() + i * M * K, M, P, K);
      if (bn->requires_grad)
        kernels::gemm_tn_acc(dc, an->value.data() + i * M * K, bn->grad.data() + i * P * K, M, P, K);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  FD_CHECK(numel(shape) == x.size(), "reshape: element count mismatch");
  auto out = TensorT<S>::from_data(std::move(shape), x.value());
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on] {
    on->ensure_grad();
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
  });
  return out;
}

// [A,B,C,D] -> [A,C,B,D]; its own inverse, used for head split/merge.
template <typename S>
TensorT<S> transpose_0213(const TensorT<S>& x) {
  FD_CHECK(x.rank() == 4, "transpose_0213: rank-4 input required");
  const i64 A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  auto out = TensorT<S>::zeros({A, C, B, D});
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 a = 0; a < A; ++a)
    for (i64 b = 0; b < B; ++b)
      for (i64 c = 0; c < C; ++c) {
        const S* src = xv.data() + ((a * B + b) * C + c) * D;
        S* dst = ov.data() + ((a * C + c) * B + b) * D;
        for (i64 d = 0; d < D; ++d) dst[d] = src[d];
      }
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, A, B, C, D] {
    on->ensure_grad();
    xn->ensure_grad();
    for (i64 a = 0; a < A; ++a)
      for (i64 b = 0; b < B; ++b)
        for (i64 c = 0; c < C; ++c) {
          const S* src = on->grad.data() + ((a * C + c) * B + b) * D;
          S* dst = xn->grad.data() + ((a * B + b) * C + c) * D;
          for (i64 d = 0; d < D; ++d) dst[d] += src[d];
        }
  });
  return out;
}

// Slice [start, start+len) of the last axis.
template <typename S>
TensorT<S> slice_last(const TensorT<S>& x, i64 start, i64 len) {
  FD_CHECK(x.rank() >= 1, "slice_last: rank >= 1 required");
  const i64 C = x.dim(x.rank() - 1);
  FD_CHECK(start >= 0 && len >= 1 && start + len <= C, "slice_last: range out of bounds");
  const i64 rows = x.size() / C;
  Shape oshape = x.shape();
  oshape.back() = len;
  auto out = TensorT<S>::zeros(oshape);
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 r = 0; r < rows; ++r)
    for (i64 c = 0; c < len; ++c) ov[static_cast<size_t>(r * len + c)] = xv[static_cast<size_t>(r * C + start + c)];
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, rows, C, start, len] {
    on->ensure_grad();
    xn->ensure_grad();
    for (i64 r = 0; r < rows; ++r)
      for (i64 c = 0; c < len; ++c) xn->grad[static_cast<size_t>(r * C + start + c)] += on->grad[static_cast<size_t>(r * len + c)];
  });
  return out;
}

// Slice [start, start+len) of axis 1 of a rank-3 tensor (token axis).
template <typename S>
TensorT<S> slice_axis1(const TensorT<S>& x, i64 start, i64 len) {
  FD_CHECK(x.rank() == 3, "slice_axis1: rank-3 input required");
  const i64 B = x.dim(0), T = x.dim(1), D = x.dim(2);
  FD_CHECK(start >= 0 && len >= 1 && start + len <= T, "slice_axis1: range out of bounds");
  auto out = TensorT<S>::zeros({B, len, D});
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 b = 0; b < B; ++b)
    for (i64 t = 0; t < len; ++t) {
      const S* src = xv.data() + (b * T + start + t) * D;
      S* dst = ov.data() + (b * len + t) * D;
      for (i64 d = 0; d < D; ++d) dst[d] = src[d];
    }
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, B, T, D, start, len] {
    on->ensure_grad();
    xn->ensure_grad();
    for (i64 b = 0; b < B; ++b)
      for (i64 t = 0; t < len; ++t) {
        const S* src = on->grad.data() + (b * len + t) * D;
        S* dst = xn->grad.data() + (b * T + start + t) * D;
        for (i64 d = 0; d < D; ++d) dst[d] += src[d];
      }
  });
  return out;
}

// Prepend a learned token, broadcast over the batch: [D] + [B,N,D] -> [B,N+1,D].
template <typename S>
TensorT<S> concat_cls(const TensorT<S>& cls, const TensorT<S>& x) {
  FD_CHECK(cls.rank() == 1 && x.rank() == 3 && cls.dim(0) == x.dim(2), "concat_cls: shape mismatch");
  const i64 B = x.dim(0), N = x.dim(1), D = x.dim(2);
  auto out = TensorT<S>::zeros({B, N + 1, D});
  const auto& cv = cls.value();
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 b = 0; b < B; ++b) {
    S* dst = ov.data() + b * (N + 1) * D;
    for (i64 d = 0; d < D; ++d) dst[d] = cv[static_cast<size_t>(d)];
    for (i64 n = 0; n < N; ++n) {
      const S* src = xv.data() + (b * N + n) * D;
      S* row = dst + (n + 1) * D;
      for (i64 d = 0; d < D; ++d) row[d] = src[d];
    }
  }
  auto *cn = cls.node(), *xn = x.node(), *on = out.node();
  out.attach({cls, x}, [cn, xn, on, B, N, D] {
    on->ensure_grad();
    if (cn->requires_grad) cn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    for (i64 b = 0; b < B; ++b) {
      const S* g = on->grad.data() + b * (N + 1) * D;
      if (cn->requires_grad)
        for (i64 d = 0; d < D; ++d) cn->grad[static_cast<size_t>(d)] += g[d];
      if (xn->requires_grad)
        for (i64 n = 0; n < N; ++n) {
          const S* src = g + (n + 1) * D;
          S* dst = xn->grad.data() + (b * N + n) * D;
          for (i64 d = 0; d < D; ++d) dst[d] += src[d];
        }
    }
  });
  return out;
}

// x[B,T,D] + table[T,D] broadcast over the batch (learned position table).
template <typename S>
TensorT<S> add_tokenwise(const TensorT<S>& x, const TensorT<S>& table) {
  FD_CHECK(x.rank() == 3 && table.rank() == 2 && x.dim(1) == table.dim(0) && x.dim(2) == table.dim(1),
           "add_tokenwise: shape mismatch");
  const i64 B = x.dim(0), T = x.dim(1), D = x.dim(2);
  auto out = TensorT<S>::zeros(x.shape());
  const auto& xv = x.value();
  const auto& tv = table.value();
  auto& ov = out.value();
  for (i64 b = 0; b < B; ++b)
    for (i64 i = 0; i < T * D; ++i) ov[static_cast<size_t>(b * T * D + i)] = xv[static_cast<size_t>(b * T * D + i)] + tv[static_cast<size_t>(i)];
  auto *xn = x.node(), *tn = table.node(), *on = out.node();
  out.attach({x, table}, [xn, tn, on, B, T, D] {
    on->ensure_grad();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    }
    if (tn->requires_grad) {
      tn->ensure_grad();
      for (i64 b = 0; b < B; ++b)
        for (i64 i = 0; i < T * D; ++i) tn->grad[static_cast<size_t>(i)] += on->grad[static_cast<size_t>(b * T * D + i)];
    }
  });
  return out;
}

// Non-overlapping patch flattening: [B,C,H,W] -> [B, (H/ps)*(W/ps), C*ps*ps].
// Tokens run in raster order; within a token the layout is (channel, dy, dx).
template <typename S>
TensorT<S> extract_patches(const TensorT<S>& images, i64 ps) {
  FD_CHECK(images.rank() == 4, "extract_patches: [B,C,H,W] input required");
  const i64 B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  FD_CHECK(ps >= 1 && H % ps == 0 && W % ps == 0, "extract_patches: image size not divisible by patch size");
  const i64 GH = H / ps, GW = W / ps, NP = GH * GW, F = C * ps * ps;
  auto out = TensorT<S>::zeros({B, NP, F});
  const auto& xv = images.value();
  auto& ov = out.value();
  for (i64 b = 0; b < B; ++b)
    for (i64 py = 0; py < GH; ++py)
      for (i64 px = 0; px < GW; ++px) {
        S* dst = ov.data() + (b * NP + py * GW + px) * F;
        for (i64 c = 0; c < C; ++c)
          for (i64 dy = 0; dy < ps; ++dy)
            for (i64 dx = 0; dx < ps; ++dx)
              dst[(c * ps + dy) * ps + dx] = xv[static_cast<size_t>(((b * C + c) * H + py * ps + dy) * W + px * ps + dx)];
      }
  auto *xn = images.node(), *on = out.node();
  out.attach({images}, [xn, on, B, C, H, W, ps] {
    on->ensure_grad();
    xn->ensure_grad();
    const i64 GH = H / ps, GW = W / ps, NP = GH * GW, F = C * ps * ps;
    for (i64 b = 0; b < B; ++b)
      for (i64 py = 0; py < GH; ++py)
        for (i64 px = 0; px < GW; ++px) {
          const S* src = on->grad.data() + (b * NP + py * GW + px) * F;
          for (i64 c = 0; c < C; ++c)
            for (i64 dy = 0; dy < ps; ++dy)
              for (i64 dx = 0; dx < ps; ++dx)
                xn->grad[static_cast<size_t>(((b * C + c) * H + py * ps + dy) * W + px * ps + dx)] += src[(c * ps + dy) * ps + dx];
        }
  });
  return out;
}

// Mean over the token axis: [B,N,D] -> [B,D].
template <typename S>
TensorT<S> mean_tokens(const TensorT<S>& x) {
  FD_CHECK(x.rank() == 3 && x.dim(1) >= 1, "mean_tokens: [B,N,D] with N >= 1 required");
  const i64 B = x.dim(0), N = x.dim(1), D = x.dim(2);
  auto out = TensorT<S>::zeros({B, D});
  const auto& xv = x.value();
  auto& ov = out.value();
  const S inv = S(1) / static_cast<S>(N);
  for (i64 b = 0; b < B; ++b)
    for (i64 n = 0; n < N; ++n)
      for (i64 d = 0; d < D; ++d) ov[static_cast<size_t>(b * D + d)] += xv[static_cast<size_t>((b * N + n) * D + d)] * inv;
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, B, N, D, inv] {
    on->ensure_grad();
    xn->ensure_grad();
    for (i64 b = 0; b < B; ++b)
      for (i64 n = 0; n < N; ++n)
        for (i64 d = 0; d < D; ++d) xn->grad[static_cast<size_t>((b * N + n) * D + d)] += on->grad[static_cast<size_t>(b * D + d)] * inv;
  });
  return out;
}

// Mean over every element, as a rank-0 scalar.
template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
  FD_CHECK(x.size() >= 1, "mean_all: empty tensor");
  auto out = TensorT<S>::zeros({});
  const auto& xv = x.value();
  double acc = 0.0;
  for (S v : xv) acc += static_cast<double>(v);
  out.value()[0] = static_cast<S>(acc / static_cast<double>(xv.size()));
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on] {
    on->ensure_grad();
    xn->ensure_grad();
    const S g = on->grad[0] / static_cast<S>(xn->value.size());
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Neural-net primitives
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-6;

namespace detail {

// Shared layer-norm core; gamma/beta may be null for the plain whitening form.
template <typename S>
TensorT<S> layer_norm_impl(const TensorT<S>& x, const TensorT<S>* gamma, const TensorT<S>* beta, double eps) {
  FD_CHECK(x.rank() >= 1, "layer_norm: rank >= 1 required");
  FD_CHECK(eps > 0.0, "layer_norm: eps must be positive");
  const i64 C = x.dim(x.rank() - 1);
  FD_CHECK(C >= 1, "layer_norm: last axis must be nonempty");
  const bool affine = gamma != nullptr;
  if (affine) {
    FD_CHECK(beta != nullptr, "layer_norm: gamma without beta");
    FD_CHECK(gamma->rank() == 1 && gamma->dim(0) == C && beta->rank() == 1 && beta->dim(0) == C,
             "layer_norm: affine parameters must be length-" + std::to_string(C) + " vectors");
  }
  const i64 rows = x.size() / C;
  auto out = TensorT<S>::zeros(x.shape());
  std::vector<S> xhat(static_cast<size_t>(x.size()));
  std::vector<S> inv_sigma(static_cast<size_t>(rows));
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * C;
    double mu = 0.0;
    for (i64 c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (i64 c = 0; c < C; ++c) {
      const double d = row[c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(r)] = static_cast<S>(inv);
    for (i64 c = 0; c < C; ++c) {
      const S xh = static_cast<S>((row[c] - mu) * inv);
      xhat[static_cast<size_t>(r * C + c)] = xh;
      ov[static_cast<size_t>(r * C + c)] =
          affine ? xh * gamma->value()[static_cast<size_t>(c)] + beta->value()[static_cast<size_t>(c)] : xh;
    }
  }
  auto *xn = x.node(), *on = out.node();
  fd::detail::Node<S>* gn = affine ? gamma->node() : nullptr;
  fd::detail::Node<S>* bn = affine ? beta->node() : nullptr;
  auto backprop = [xn, on, gn, bn, rows, C, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)] {
    on->ensure_grad();
    if (gn && gn->requires_grad) gn->ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    std::vector<S> dxhat(static_cast<size_t>(C));
    for (i64 r = 0; r < rows; ++r) {
      const S* dy = on->grad.data() + r * C;
      const S* xh = xhat.data() + r * C;
      if (gn && gn->requires_grad)
        for (i64 c = 0; c < C; ++c) gn->grad[static_cast<size_t>(c)] += dy[c] * xh[c];
      if (bn && bn->requires_grad)
        for (i64 c = 0; c < C; ++c) bn->grad[static_cast<size_t>(c)] += dy[c];
      if (!xn->requires_grad) continue;
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (i64 c = 0; c < C; ++c) {
        const S dxh = gn ? dy[c] * gn->value[static_cast<size_t>(c)] : dy[c];
        dxhat[static_cast<size_t>(c)] = dxh;
        mean_dxhat += dxh;
        mean_dxhat_xhat += static_cast<double>(dxh) * xh[c];
      }
      mean_dxhat /= static_cast<double>(C);
      mean_dxhat_xhat /= static_cast<double>(C);
      const S inv = inv_sigma[static_cast<size_t>(r)];
      S* dx = xn->grad.data() + r * C;
      for (i64 c = 0; c < C; ++c)
        dx[c] += static_cast<S>(inv * (dxhat[static_cast<size_t>(c)] - mean_dxhat - xh[c] * mean_dxhat_xhat));
    }
  };
  if (affine)
    out.attach({x, *gamma, *beta}, std::move(backprop));
  else
    out.attach({x}, std::move(backprop));
  return out;
}

}  // namespace detail

// Non-parametric form: zero mean, unit population variance per last-axis slice.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, double eps = kLayerNormEps) {
  return detail::layer_norm_impl<S>(x, nullptr, nullptr, eps);
}

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      double eps = kLayerNormEps) {
  return detail::layer_norm_impl<S>(x, &gamma, &beta, eps);
}

// Softmax over the last axis; rows are shifted by their max for stability.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
  FD_CHECK(x.rank() >= 1 && x.dim(x.rank() - 1) >= 1, "softmax_rows: nonempty last axis required");
  const i64 C = x.dim(x.rank() - 1);
  const i64 rows = x.size() / C;
  auto out = TensorT<S>::zeros(x.shape());
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * C;
    S* orow = ov.data() + r * C;
    S mx = row[0];
    for (i64 c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (i64 c = 0; c < C; ++c) {
      const double e = std::exp(static_cast<double>(row[c] - mx));
      orow[c] = static_cast<S>(e);
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (i64 c = 0; c < C; ++c) orow[c] = static_cast<S>(orow[c] * inv);
  }
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, rows, C] {
    on->ensure_grad();
    xn->ensure_grad();
    for (i64 r = 0; r < rows; ++r) {
      const S* y = on->value.data() + r * C;
      const S* dy = on->grad.data() + r * C;
      double dot = 0.0;
      for (i64 c = 0; c < C; ++c) dot += static_cast<double>(dy[c]) * y[c];
      S* dx = xn->grad.data() + r * C;
      for (i64 c = 0; c < C; ++c) dx[c] += static_cast<S>(y[c] * (dy[c] - dot));
    }
  });
  return out;
}

// Exact-erf form x * Phi(x).
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  auto out = TensorT<S>::zeros(x.shape());
  const auto& xv = x.value();
  auto& ov = out.value();
  for (size_t i = 0; i < ov.size(); ++i) {
    const double v = xv[i];
    ov[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5)));
  }
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on] {
    on->ensure_grad();
    xn->ensure_grad();
    constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
    for (size_t i = 0; i < on->grad.size(); ++i) {
      const double v = xn->value[i];
      const double phi_cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
      const double phi_pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      xn->grad[i] += static_cast<S>(static_cast<double>(on->grad[i]) * (phi_cdf + v * phi_pdf));
    }
  });
  return out;
}

// Stochastic depth over axis 0: each sample's residual branch is zeroed with
// probability p and kept samples are scaled by 1/(1-p). Identity in eval mode.
template <typename S>
TensorT<S> drop_path(const TensorT<S>& x, double p, Mode mode, Rng* rng) {
  FD_CHECK(p >= 0.0 && p < 1.0, "drop_path: rate must be in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  FD_CHECK(x.rank() >= 1, "drop_path: rank >= 1 required");
  FD_CHECK(rng != nullptr, "drop_path: train mode requires an rng");
  const i64 B = x.dim(0);
  const i64 stride = x.size() / std::max<i64>(B, 1);
  std::vector<S> keep_scale(static_cast<size_t>(B));
  const S inv_keep = static_cast<S>(1.0 / (1.0 - p));
  for (i64 b = 0; b < B; ++b) keep_scale[static_cast<size_t>(b)] = rng->bernoulli(p) ? S(0) : inv_keep;
  auto out = TensorT<S>::zeros(x.shape());
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 b = 0; b < B; ++b) {
    const S s = keep_scale[static_cast<size_t>(b)];
    for (i64 i = 0; i < stride; ++i) ov[static_cast<size_t>(b * stride + i)] = xv[static_cast<size_t>(b * stride + i)] * s;
  }
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, B, stride, keep_scale = std::move(keep_scale)] {
    on->ensure_grad();
    xn->ensure_grad();
    for (i64 b = 0; b < B; ++b) {
      const S s = keep_scale[static_cast<size_t>(b)];
      for (i64 i = 0; i < stride; ++i) xn->grad[static_cast<size_t>(b * stride + i)] += on->grad[static_cast<size_t>(b * stride + i)] * s;
    }
  });
  return out;
}

// Token-wise scaling to unit L2 norm (plus a small guard so zero stays zero).
template <typename S>
TensorT<S> l2_normalize(const TensorT<S>& x, double eps = 1e-12) {
  FD_CHECK(x.rank() >= 1 && x.dim(x.rank() - 1) >= 1, "l2_normalize: nonempty last axis required");
  const i64 C = x.dim(x.rank() - 1);
  const i64 rows = x.size() / C;
  auto out = TensorT<S>::zeros(x.shape());
  std::vector<double> norms(static_cast<size_t>(rows));
  const auto& xv = x.value();
  auto& ov = out.value();
  for (i64 r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * C;
    double n2 = 0.0;
    for (i64 c = 0; c < C; ++c) n2 += static_cast<double>(row[c]) * row[c];
    const double n = std::sqrt(n2);
    norms[static_cast<size_t>(r)] = n;
    const double inv = 1.0 / (n + eps);
    S* orow = ov.data() + r * C;
    for (i64 c = 0; c < C; ++c) orow[c] = static_cast<S>(row[c] * inv);
  }
  auto *xn = x.node(), *on = out.node();
  out.attach({x}, [xn, on, rows, C, eps, norms = std::move(norms)] {
    on->ensure_grad();
    xn->ensure_grad();
    for (i64 r = 0; r < rows; ++r) {
      const double n = norms[static_cast<size_t>(r)];
      const double inv = 1.0 / (n + eps);
      const S* row = xn->value.data() + r * C;
      const S* dy = on->grad.data() + r * C;
      S* dx = xn->grad.data() + r * C;
      double dot = 0.0;
      for (i64 c = 0; c < C; ++c) dot += static_cast<double>(dy[c]) * row[c];
      const double coef = n > 0.0 ? dot / (n * (n + eps) * (n + eps)) : 0.0;
      for (i64 c = 0; c < C; ++c) dx[c] += static_cast<S>(dy[c] * inv - row[c] * coef);
    }
  });
  return out;
}

// Huber-style loss, quadratic within beta of zero and linear outside, averaged
// over every element.
template <typename S>
TensorT<S> smooth_l1(const TensorT<S>& pred, const TensorT<S>& target, double beta) {
  FD_CHECK(beta > 0.0, "smooth_l1: beta must be positive");
  FD_CHECK(pred.shape() == target.shape(),
           "smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const i64 n = pred.size();
  FD_CHECK(n >= 1, "smooth_l1: empty input");
  auto out = TensorT<S>::zeros({});
  const auto& pv = pred.value();
  const auto& tv = target.value();
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const double d = static_cast<double>(pv[static_cast<size_t>(i)]) - tv[static_cast<size_t>(i)];
    const double a = std::abs(d);
    acc += a <= beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  out.value()[0] = static_cast<S>(acc / static_cast<double>(n));
  auto *pn = pred.node(), *tn = target.node(), *on = out.node();
  out.attach({pred, target}, [pn, tn, on, n, beta] {
    on->ensure_grad();
    if (pn->requires_grad) pn->ensure_grad();
    if (tn->requires_grad) tn->ensure_grad();
    const double go = on->grad[0] / static_cast<double>(n);
    for (i64 i = 0; i < n; ++i) {
      const double d = static_cast<double>(pn->value[static_cast<size_t>(i)]) - tn->value[static_cast<size_t>(i)];
      const double slope = std::clamp(d / beta, -1.0, 1.0);
      if (pn->requires_grad) pn->grad[static_cast<size_t>(i)] += static_cast<S>(go * slope);
      if (tn->requires_grad) tn->grad[static_cast<size_t>(i)] -= static_cast<S>(go * slope);
    }
  });
  return out;
}

// Cross entropy against a smoothed target: (1-eps) one-hot plus eps/K uniform,
// averaged over the batch.
template <typename S>
TensorT<S> smoothed_cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels, double eps) {
  FD_CHECK(logits.rank() == 2, "smoothed_cross_entropy: [B,K] logits required");
  const i64 B = logits.dim(0), K = logits.dim(1);
  FD_CHECK(K >= 2, "smoothed_cross_entropy: at least two classes required");
  FD_CHECK(eps >= 0.0 && eps < 1.0, "smoothed_cross_entropy: eps must be in [0, 1)");
  FD_CHECK(static_cast<i64>(labels.size()) == B, "smoothed_cross_entropy: label count mismatch");
  for (int y : labels)
    FD_CHECK(y >= 0 && y < K, "smoothed_cross_entropy: label " + std::to_string(y) + " out of range");
  auto out = TensorT<S>::zeros({});
  const auto& xv = logits.value();
  std::vector<S> probs(static_cast<size_t>(B * K));
  const double off = eps / static_cast<double>(K);
  const double on_label = 1.0 - eps + off;
  double acc = 0.0;
  for (i64 b = 0; b < B; ++b) {
    const S* row = xv.data() + b * K;
    double mx = row[0];
    for (i64 k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double denom = 0.0;
    for (i64 k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k]) - mx);
    const double lse = mx + std::log(denom);
    for (i64 k = 0; k < K; ++k) {
      const double logp = static_cast<double>(row[k]) - lse;
      probs[static_cast<size_t>(b * K + k)] = static_cast<S>(std::exp(logp));
      const double q = k == labels[static_cast<size_t>(b)] ? on_label : off;
      acc -= q * logp;
    }
  }
  out.value()[0] = static_cast<S>(acc / static_cast<double>(B));
  auto *xn = logits.node(), *on = out.node();
  out.attach({logits}, [xn, on, B, K, labels, off, on_label, probs = std::move(probs)] {
    on->ensure_grad();
    xn->ensure_grad();
    const double go = on->grad[0] / static_cast<double>(B);
    for (i64 b = 0; b < B; ++b)
      for (i64 k = 0; k < K; ++k) {
        const double q = k == labels[static_cast<size_t>(b)] ? on_label : off;
        xn->grad[static_cast<size_t>(b * K + k)] += static_cast<S>(go * (probs[static_cast<size_t>(b * K + k)] - q));
      }
  });
  return out;
}

// Adds a learned relative-position bias to pre-softmax attention logits.
// Token 0 is the CLS token: patch-patch cells read the table through the
// relative-displacement index; the CLS row and column get per-head scalars
// (cls_query for q=0 towards patch keys, cls_key for patch queries towards
// k=0) and the CLS-CLS cell stays unbiased.
template <typename S>
TensorT<S> add_attn_bias(const TensorT<S>& att, const TensorT<S>& table, const std::vector<std::int32_t>& index,
                         const TensorT<S>& cls_query, const TensorT<S>& cls_key) {
  FD_CHECK(att.rank() == 4 && att.dim(2) == att.dim(3), "add_attn_bias: [B,H,T,T] logits required");
  const i64 B = att.dim(0), H = att.dim(1), T = att.dim(2), NP = T - 1;
  FD_CHECK(NP >= 1, "add_attn_bias: need at least one patch token");
  FD_CHECK(static_cast<i64>(index.size()) == NP * NP, "add_attn_bias: index size mismatch");
  FD_CHECK(table.rank() == 2 && table.dim(0) == H, "add_attn_bias: table must be [heads, entries]");
  const i64 TS = table.dim(1);
  for (std::int32_t v : index) FD_CHECK(v >= 0 && v < TS, "add_attn_bias: index entry out of table range");
  FD_CHECK(cls_query.rank() == 1 && cls_query.dim(0) == H && cls_key.rank() == 1 && cls_key.dim(0) == H,
           "add_attn_bias: cls scalars must be per-head vectors");
  auto out = TensorT<S>::zeros(att.shape());
  const auto& av = att.value();
  const auto& tv = table.value();
  const auto& cqv = cls_query.value();
  const auto& ckv = cls_key.value();
  auto& ov = out.value();
  for (i64 b = 0; b < B; ++b)
    for (i64 h = 0; h < H; ++h) {
      const i64 base = (b * H + h) * T * T;
      const S* trow = tv.data() + h * TS;
      ov[static_cast<size_t>(base)] = av[static_cast<size_t>(base)];  // CLS-CLS
      for (i64 k = 1; k < T; ++k) ov[static_cast<size_t>(base + k)] = av[static_cast<size_t>(base + k)] + cqv[static_cast<size_t>(h)];
      for (i64 q = 1; q < T; ++q) {
        const i64 row = base + q * T;
        ov[static_cast<size_t>(row)] = av[static_cast<size_t>(row)] + ckv[static_cast<size_t>(h)];
        const std::int32_t* irow = index.data() + (q - 1) * NP;
        for (i64 k = 1; k < T; ++k) ov[static_cast<size_t>(row + k)] = av[static_cast<size_t>(row + k)] + trow[irow[k - 1]];
      }
    }
  auto *an = att.node(), *tn = table.node(), *cqn = cls_query.node(), *ckn = cls_key.node(), *on = out.node();
  out.attach({att, table, cls_query, cls_key}, [an, tn, cqn, ckn, on, B, H, T, NP, TS, index] {
    on->ensure_grad();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (tn->requires_grad) tn->ensure_grad();
    if (cqn->requires_grad) cqn->ensure_grad();
    if (ckn->requires_grad) ckn->ensure_grad();
    for (i64 b = 0; b < B; ++b)
      for (i64 h = 0; h < H; ++h) {
        const i64 base = (b * H + h) * T * T;
        if (cqn->requires_grad)
          for (i64 k = 1; k < T; ++k) cqn->grad[static_cast<size_t>(h)] += on->grad[static_cast<size_t>(base + k)];
        for (i64 q = 1; q < T; ++q) {
          const i64 row = base + q * T;
          if (ckn->requires_grad) ckn->grad[static_cast<size_t>(h)] += on->grad[static_cast<size_t>(row)];
          if (tn->requires_grad) {
            const std::int32_t* irow = index.data() + (q - 1) * NP;
            for (i64 k = 1; k < T; ++k) tn->grad[static_cast<size_t>(h * TS + irow[k - 1])] += on->grad[static_cast<size_t>(row + k)];
          }
        }
      }
  });
  return out;
}

}  // namespace fd
