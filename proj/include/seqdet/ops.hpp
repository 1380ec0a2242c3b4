#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "seqdet/tensor.hpp"

// Differentiable op library. Every op computes its output eagerly and, when a
// tape is active and an input needs gradients, records a closure that
// accumulates into input gradients. Accumulation orders are fixed so repeated
// runs are bit-identical; no op depends on unordered reductions.
//
// Reductions (sums, means, normalization statistics, losses) accumulate in
// double regardless of the scalar type. Matrix and convolution inner products
// accumulate in the scalar type itself with a fixed lane-split order, which
// keeps the hot loops vectorizable without value-changing compiler flags.

namespace seqdet {

namespace detail {

template <typename T>
bool grad_needed(const NodePtr<T>& n) {
  return n->requires_grad || n->tracked;
}

// Fixed-order dot product: eight interleaved lanes folded pairwise, then the
// tail. Deterministic and auto-vectorizable.
template <typename T>
T dot_lanes(const T* __restrict x, const T* __restrict y, std::size_t k) {
  constexpr std::size_t L = 8;
  T lanes[L] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  std::size_t p = 0;
  for (; p + L <= k; p += L)
    for (std::size_t l = 0; l < L; ++l) lanes[l] += x[p + l] * y[p + l];
  T tail = T(0);
  for (; p < k; ++p) tail += x[p] * y[p];
  return (((lanes[0] + lanes[4]) + (lanes[2] + lanes[6])) +
          ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))) +
         tail;
}

// Fixed-width variant of the axpy kernel below: with N known at compile time
// the output row lives in registers across the whole k loop instead of being
// reloaded per step. Accumulation order matches the generic kernel exactly.
template <typename T, std::size_t N>
void mm_nn_acc_fixed(const T* __restrict a, const T* __restrict b,
                     T* __restrict c, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * N;
    T acc[N];
    for (std::size_t j = 0; j < N; ++j) acc[j] = crow[j];
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * N;
      for (std::size_t j = 0; j < N; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < N; ++j) crow[j] = acc[j];
  }
}

// c[m,n] += a[m,k] b[k,n]
template <typename T>
void mm_nn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
               std::size_t m, std::size_t k, std::size_t n) {
  // Only widths where register blocking beats the auto-vectorized generic
  // loop are dispatched; narrower rows lose to it (the small constant trip
  // count gets fully unrolled into scalar code instead of vectorized).
  switch (n) {
    case 32: return mm_nn_acc_fixed<T, 32>(a, b, c, m, k);
    case 64: return mm_nn_acc_fixed<T, 64>(a, b, c, m, k);
    default: break;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Grow-only per-thread scratch for kernel-internal transposes.
template <typename T>
T* mm_scratch(std::size_t n) {
  static thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// dst[c,r] = src[r,c], tiled for cache locality on wide matrices.
template <typename T>
void transpose_into(const T* __restrict src, T* __restrict dst, std::size_t r,
                    std::size_t c) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < r; i0 += B)
    for (std::size_t j0 = 0; j0 < c; j0 += B) {
      const std::size_t i1 = std::min(r, i0 + B), j1 = std::min(c, j0 + B);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * r + i] = src[i * c + j];
    }
}

// c[m,n] += a[m,k] b[n,k]^T. Short rows go through a transposed copy of b so
// the inner loop runs contiguously at mm_nn_acc speed; long rows amortize a
// per-element dot and skip the copy. The branch depends only on the shapes,
// so each call site accumulates in one fixed order.
template <typename T>
void mm_nt_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
               std::size_t m, std::size_t k, std::size_t n) {
  if (k >= 96) {
    // Blocks of a rows stay cache-resident while each b row streams once per
    // block. Every output element is still one fixed-order dot.
    constexpr std::size_t BI = 8;
    for (std::size_t i0 = 0; i0 < m; i0 += BI) {
      const std::size_t i1 = std::min(m, i0 + BI);
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        for (std::size_t i = i0; i < i1; ++i)
          c[i * n + j] += dot_lanes(a + i * k, brow, k);
      }
    }
    return;
  }
  T* bt = mm_scratch<T>(k * n);
  transpose_into(b, bt, n, k);
  mm_nn_acc(a, bt, c, m, k, n);
}

// c[ka,kb] += a[m,ka]^T b[m,kb]. Transposing a lets the axpy kernel keep
// each output row hot instead of re-streaming all of c for every input row.
template <typename T>
void mm_tn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
               std::size_t m, std::size_t ka, std::size_t kb) {
  T* at = mm_scratch<T>(m * ka);
  transpose_into(a, at, m, ka);
  mm_nn_acc(at, b, c, ka, m, kb);
}

// Patch extraction for tap-based convolutions. Row (ci*ntaps + t) of the
// output holds input plane ci shifted by tap t, zero-filled where the shift
// leaves the image. Output is [ci*ntaps, h*w] row-major, which lines up with
// weight matrices flattened as [Co, Ci*ntaps] so convolution becomes mm_nn.
template <typename T>
void im2col_taps(const T* __restrict x, std::size_t ci, std::size_t h,
                 std::size_t w, const int (*taps)[2], std::size_t ntaps,
                 T* __restrict out) {
  const long lh = long(h), lw = long(w);
  for (std::size_t c = 0; c < ci; ++c) {
    const T* plane = x + c * h * w;
    for (std::size_t t = 0; t < ntaps; ++t) {
      const int dy = taps[t][0], dx = taps[t][1];
      T* orow = out + (c * ntaps + t) * h * w;
      const long ilo = dy < 0 ? -long(dy) : 0, ihi = std::min(lh, lh - dy);
      const long jlo = dx < 0 ? -long(dx) : 0, jhi = std::min(lw, lw - dx);
      if (ilo > 0) std::fill(orow, orow + ilo * lw, T(0));
      if (ihi < lh) std::fill(orow + ihi * lw, orow + lh * lw, T(0));
      for (long i = ilo; i < ihi; ++i) {
        T* dst = orow + i * lw;
        const T* src = plane + (i + dy) * lw + dx;
        if (jlo > 0) std::fill(dst, dst + jlo, T(0));
        if (jhi < lw) std::fill(dst + jhi, dst + lw, T(0));
        for (long j = jlo; j < jhi; ++j) dst[j] = src[j];
      }
    }
  }
}

// Scatter-add transpose of im2col_taps: folds patch-space gradients back
// onto the input gradient.
template <typename T>
void col2im_taps(const T* __restrict cols, std::size_t ci, std::size_t h,
                 std::size_t w, const int (*taps)[2], std::size_t ntaps,
                 T* __restrict dx) {
  const long lh = long(h), lw = long(w);
  for (std::size_t c = 0; c < ci; ++c) {
    T* plane = dx + c * h * w;
    for (std::size_t t = 0; t < ntaps; ++t) {
      const int dy = taps[t][0], dx_ = taps[t][1];
      const T* crow = cols + (c * ntaps + t) * h * w;
      const long ilo = dy < 0 ? -long(dy) : 0, ihi = std::min(lh, lh - dy);
      const long jlo = dx_ < 0 ? -long(dx_) : 0, jhi = std::min(lw, lw - dx_);
      for (long i = ilo; i < ihi; ++i) {
        T* dst = plane + (i + dy) * lw + dx_;
        const T* src = crow + i * lw;
        for (long j = jlo; j < jhi; ++j) dst[j] += src[j];
      }
    }
  }
}

// 3x3 grid taps in (ky*3+kx) order, matching a [Co,Ci,3,3] weight flatten.
inline constexpr int kGridTaps3x3[9][2] = {{-1, -1}, {-1, 0}, {-1, 1},
                                           {0, -1},  {0, 0},  {0, 1},
                                           {1, -1},  {1, 0},  {1, 1}};

template <typename T>
Tensor<T> new_output(Shape shape) {
  return Tensor<T>::zeros(std::move(shape));
}

template <typename T, typename F>
void record_op(Tape<T>* tape, bool track, Tensor<T>& out, F&& fn) {
  if (!track) return;
  out.node()->tracked = true;
  tape->record(std::forward<F>(fn));
}

[[noreturn]] inline void check_fail(const std::string& msg) {
  throw ShapeError(msg);
}

}  // namespace detail

// Contract check whose message expression is only evaluated on failure, so
// the success path never pays for string formatting.
#define SEQDET_CHECK(cond, msg)                    \
  do {                                             \
    if (!(cond)) ::seqdet::detail::check_fail(msg); \
  } while (0)

// ==================== elementwise binary ====================

// Shapes must match exactly, except that either side may be a single-element
// tensor, which broadcasts against the other.
enum class BinKind { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinKind kind) {
  const bool sa = a.numel() == 1, sb = b.numel() == 1;
  SEQDET_CHECK(sa || sb || a.shape() == b.shape(),
                "elementwise op on shapes " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  const Shape& oshape = sa && !sb ? b.shape() : a.shape();
  auto out = detail::new_output<T>(oshape);
  const std::size_t n = out.numel();
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    T x = av[sa ? 0 : i], y = bv[sb ? 0 : i];
    switch (kind) {
      case BinKind::Add: ov[i] = x + y; break;
      case BinKind::Sub: ov[i] = x - y; break;
      case BinKind::Mul: ov[i] = x * y; break;
      case BinKind::Div: ov[i] = x / y; break;
    }
  }
  auto* tape = Tape<T>::current();
  bool na = detail::grad_needed(a.node()), nb = detail::grad_needed(b.node());
  bool track = tape && (na || nb);
  detail::record_op(tape, track, out,
                    [an = a.node(), bn = b.node(), on = out.node(), kind, sa,
                     sb, na, nb]() {
    if (on->grad.empty()) return;
    const std::size_t n = on->value.size();
    if (na) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T g = on->grad[i];
        switch (kind) {
          case BinKind::Add:
          case BinKind::Sub: break;
          case BinKind::Mul: g *= bn->value[sb ? 0 : i]; break;
          case BinKind::Div: g /= bn->value[sb ? 0 : i]; break;
        }
        an->grad[sa ? 0 : i] += g;
      }
    }
    if (nb) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T g = on->grad[i];
        T y = bn->value[sb ? 0 : i];
        switch (kind) {
          case BinKind::Add: break;
          case BinKind::Sub: g = -g; break;
          case BinKind::Mul: g *= an->value[sa ? 0 : i]; break;
          case BinKind::Div: g = -g * on->value[i] / y; break;
        }
        bn->grad[sb ? 0 : i] += g;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::Add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::Sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::Mul);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::Div);
}

// ==================== elementwise unary ====================

template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const Tensor<T>& a, FwdF fwd, BwdF bwd) {
  auto out = detail::new_output<T>(a.shape());
  const std::size_t n = a.numel();
  auto& ov = out.mutable_data();
  const auto& av = a.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(av[i]);
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(), bwd]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    const std::size_t n = on->value.size();
    // bwd(x, y) is dy/dx evaluated from input and output values
    for (std::size_t i = 0; i < n; ++i)
      an->grad[i] += on->grad[i] * bwd(an->value[i], on->value[i]);
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  T tc = static_cast<T>(c);
  return unary_op(a, [tc](T x) { return x * tc; },
                  [tc](T, T) { return tc; });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, double c) {
  T tc = static_cast<T>(c);
  return unary_op(a, [tc](T x) { return x + tc; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a,
      [](T x) { return static_cast<T>(1.0 / (1.0 + std::exp(-double(x)))); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(a,
                  [](T x) { return static_cast<T>(std::exp(double(x))); },
                  [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(a,
                  [](T x) { return static_cast<T>(std::log(double(x))); },
                  [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary_op(a,
                  [](T x) { return static_cast<T>(std::sqrt(double(x))); },
                  [](T, T y) { return T(1) / (T(2) * y); });
}

// max(x, lo); the subgradient at the clamp point is taken as zero.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, double lo) {
  T tl = static_cast<T>(lo);
  return unary_op(a, [tl](T x) { return x > tl ? x : tl; },
                  [tl](T x, T) { return x > tl ? T(1) : T(0); });
}

// ==================== matmul ====================

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  SEQDET_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                "matmul on shapes " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::new_output<T>({m, n});
  detail::mm_nn_acc(a.data().data(), b.data().data(),
                    out.mutable_data().data(), m, k, n);
  auto* tape = Tape<T>::current();
  bool na = detail::grad_needed(a.node()), nb = detail::grad_needed(b.node());
  detail::record_op(tape, tape && (na || nb), out,
                    [an = a.node(), bn = b.node(), on = out.node(), m, k, n,
                     na, nb]() {
    if (on->grad.empty()) return;
    if (na) {
      an->ensure_grad();
      detail::mm_nt_acc(on->grad.data(), bn->value.data(), an->grad.data(), m,
                        n, k);
    }
    if (nb) {
      bn->ensure_grad();
      detail::mm_tn_acc(an->value.data(), on->grad.data(), bn->grad.data(), m,
                        k, n);
    }
  });
  return out;
}

// a [m,k] times b[n,k] transposed -> [m,n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  SEQDET_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                "matmul_nt on shapes " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto out = detail::new_output<T>({m, n});
  detail::mm_nt_acc(a.data().data(), b.data().data(),
                    out.mutable_data().data(), m, k, n);
  auto* tape = Tape<T>::current();
  bool na = detail::grad_needed(a.node()), nb = detail::grad_needed(b.node());
  detail::record_op(tape, tape && (na || nb), out,
                    [an = a.node(), bn = b.node(), on = out.node(), m, k, n,
                     na, nb]() {
    if (on->grad.empty()) return;
    if (na) {
      an->ensure_grad();
      detail::mm_nn_acc(on->grad.data(), bn->value.data(), an->grad.data(), m,
                        n, k);
    }
    if (nb) {
      bn->ensure_grad();
      detail::mm_tn_acc(on->grad.data(), an->value.data(), bn->grad.data(), m,
                        n, k);
    }
  });
  return out;
}

// Attention scores for every head in one op. q [lq, d] and k [lk, d] carry
// all heads side by side (d = heads*dh, head h owns column block h); the
// result [heads*lq, lk] keeps head h's scores in row block h, each score a
// dh-length dot scaled by scale_v.
template <typename T>
Tensor<T> heads_scores(const Tensor<T>& q, const Tensor<T>& k,
                       std::size_t heads, double scale_v) {
  SEQDET_CHECK(q.ndim() == 2 && k.ndim() == 2 && q.dim(1) == k.dim(1) &&
                    heads > 0 && q.dim(1) % heads == 0,
                "heads_scores on shapes " + shape_str(q.shape()) + " vs " +
                    shape_str(k.shape()) + " with " + std::to_string(heads) +
                    " heads");
  const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1), dh = d / heads;
  auto out = detail::new_output<T>({heads * lq, lk});
  {
    const T* qd = q.data().data();
    const T* kd = k.data().data();
    T* od = out.mutable_data().data();
    const T sc = T(scale_v);
    // A transposed copy of k keeps the j loops contiguous and vectorizable.
    T* kt = detail::mm_scratch<T>(d * lk);
    detail::transpose_into(kd, kt, lk, d);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < lq; ++i) {
        const T* qr = qd + i * d + h * dh;
        T* orow = od + (h * lq + i) * lk;
        for (std::size_t t = 0; t < dh; ++t) {
          const T qv = qr[t];
          const T* krow = kt + (h * dh + t) * lk;
          for (std::size_t j = 0; j < lk; ++j) orow[j] += qv * krow[j];
        }
        for (std::size_t j = 0; j < lk; ++j) orow[j] *= sc;
      }
  }
  auto* tape = Tape<T>::current();
  bool nq = detail::grad_needed(q.node()), nk = detail::grad_needed(k.node());
  detail::record_op(tape, tape && (nq || nk), out,
                    [qn = q.node(), kn = k.node(), on = out.node(), heads, lq,
                     lk, d, dh, sc = T(scale_v), nq, nk]() {
    if (on->grad.empty()) return;
    const T* gd = on->grad.data();
    T* scr = detail::mm_scratch<T>(d * lk + d * lq + lq * lk);
    T* kt = scr;
    T* qt = scr + d * lk;
    T* gt = qt + d * lq;
    if (nq) {
      qn->ensure_grad();
      detail::transpose_into(kn->value.data(), kt, lk, d);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < lq; ++i) {
          const T* grow = gd + (h * lq + i) * lk;
          T* qg = qn->grad.data() + i * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t)
            qg[t] += sc * detail::dot_lanes(grow, kt + (h * dh + t) * lk, lk);
        }
    }
    if (nk) {
      kn->ensure_grad();
      detail::transpose_into(qn->value.data(), qt, lq, d);
      for (std::size_t h = 0; h < heads; ++h) {
        detail::transpose_into(gd + h * lq * lk, gt, lq, lk);
        for (std::size_t j = 0; j < lk; ++j) {
          T* kg = kn->grad.data() + j * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t)
            kg[t] +=
                sc * detail::dot_lanes(gt + j * lq, qt + (h * dh + t) * lq, lq);
        }
      }
    }
  });
  return out;
}

// Applies per-head attention weights to values in one op: p [heads*lq, lk]
// holds head h's weights in row block h, v [lk, d] all heads side by side;
// out [lq, d] with out[i, h*dh+t] = sum_j p[h*lq+i, j] * v[j, h*dh+t],
// accumulated in j order.
template <typename T>
Tensor<T> heads_mix(const Tensor<T>& p, const Tensor<T>& v,
                    std::size_t heads) {
  SEQDET_CHECK(p.ndim() == 2 && v.ndim() == 2 && heads > 0 &&
                    p.dim(0) % heads == 0 && v.dim(1) % heads == 0 &&
                    p.dim(1) == v.dim(0),
                "heads_mix on shapes " + shape_str(p.shape()) + " vs " +
                    shape_str(v.shape()) + " with " + std::to_string(heads) +
                    " heads");
  const std::size_t lq = p.dim(0) / heads, lk = v.dim(0), d = v.dim(1),
                    dh = d / heads;
  auto out = detail::new_output<T>({lq, d});
  {
    const T* pd = p.data().data();
    const T* vd = v.data().data();
    T* od = out.mutable_data().data();
    // A transposed copy of v turns each output element into one contiguous
    // dot over the key axis.
    T* vt = detail::mm_scratch<T>(d * lk);
    detail::transpose_into(vd, vt, lk, d);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < lq; ++i) {
        const T* pr = pd + (h * lq + i) * lk;
        T* orow = od + i * d + h * dh;
        for (std::size_t t = 0; t < dh; ++t)
          orow[t] += detail::dot_lanes(pr, vt + (h * dh + t) * lk, lk);
      }
  }
  auto* tape = Tape<T>::current();
  bool np = detail::grad_needed(p.node()), nv = detail::grad_needed(v.node());
  detail::record_op(tape, tape && (np || nv), out,
                    [pn = p.node(), vn = v.node(), on = out.node(), heads, lq,
                     lk, d, dh, np, nv]() {
    if (on->grad.empty()) return;
    const T* gd = on->grad.data();
    T* scr = detail::mm_scratch<T>(d * lk + d * lq + lq * lk);
    T* vt = scr;
    T* gt = scr + d * lk;
    T* pt = gt + d * lq;
    if (np) {
      pn->ensure_grad();
      detail::transpose_into(vn->value.data(), vt, lk, d);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < lq; ++i) {
          T* pg = pn->grad.data() + (h * lq + i) * lk;
          const T* orow = gd + i * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t) {
            const T dv = orow[t];
            const T* vrow = vt + (h * dh + t) * lk;
            for (std::size_t j = 0; j < lk; ++j) pg[j] += dv * vrow[j];
          }
        }
    }
    if (nv) {
      vn->ensure_grad();
      detail::transpose_into(gd, gt, lq, d);
      for (std::size_t h = 0; h < heads; ++h) {
        detail::transpose_into(pn->value.data() + h * lq * lk, pt, lq, lk);
        for (std::size_t j = 0; j < lk; ++j) {
          T* vg = vn->grad.data() + j * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t)
            vg[t] +=
                detail::dot_lanes(pt + j * lq, gt + (h * dh + t) * lq, lq);
        }
      }
    }
  });
  return out;
}

// ==================== reductions ====================

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += double(v);
  auto out = Tensor<T>::from({1}, {static_cast<T>(acc)});
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out, [an = a.node(), on = out.node()]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    T g = on->grad[0];
    for (auto& gv : an->grad) gv += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (T v : a.data()) acc += double(v);
  auto out = Tensor<T>::from({1}, {static_cast<T>(acc / double(n))});
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out, [an = a.node(), on = out.node(), n]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    T g = static_cast<T>(double(on->grad[0]) / double(n));
    for (auto& gv : an->grad) gv += g;
  });
  return out;
}

// Column means of a [m,n] matrix -> [n].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  SEQDET_CHECK(a.ndim() == 2, "mean_rows expects 2-d, got " +
                                   shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto out = detail::new_output<T>({n});
  std::vector<double> acc(n, 0.0);
  const auto& av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) acc[j] += double(av[i * n + j]);
  for (std::size_t j = 0; j < n; ++j)
    out.mutable_data()[j] = static_cast<T>(acc[j] / double(m));
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(), m, n]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        an->grad[i * n + j] += static_cast<T>(double(on->grad[j]) / double(m));
  });
  return out;
}

// Spatial mean per channel of a [C,H,W] map -> [C].
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& a) {
  SEQDET_CHECK(a.ndim() == 3, "channel_mean expects 3-d, got " +
                                   shape_str(a.shape()));
  const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
  auto out = detail::new_output<T>({c});
  const auto& av = a.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += double(av[ch * hw + i]);
    out.mutable_data()[ch] = static_cast<T>(acc / double(hw));
  }
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(), c, hw]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch) {
      T g = static_cast<T>(double(on->grad[ch]) / double(hw));
      for (std::size_t i = 0; i < hw; ++i) an->grad[ch * hw + i] += g;
    }
  });
  return out;
}

// ==================== softmax / layer norm ====================

// Softmax along the last axis of a [n] or [m,n] tensor. Statistics in double.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  SEQDET_CHECK(a.ndim() == 1 || a.ndim() == 2,
                "softmax expects 1-d or 2-d, got " + shape_str(a.shape()));
  const std::size_t m = a.ndim() == 2 ? a.dim(0) : 1;
  const std::size_t n = a.ndim() == 2 ? a.dim(1) : a.dim(0);
  auto out = detail::new_output<T>(a.shape());
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = av.data() + i * n;
    T* orow = ov.data() + i * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    for (std::size_t j = 0; j < n; ++j) orow[j] = std::exp(row[j] - mx);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) z += orow[j];
    const T inv = T(1) / z;
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(), m, n]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const T* y = on->value.data() + i * n;
      const T* dy = on->grad.data() + i * n;
      T* dx = an->grad.data() + i * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
  return out;
}

// Row-wise layer normalization with affine parameters. Population variance,
// statistics accumulated in double.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5) {
  SEQDET_CHECK(x.ndim() == 1 || x.ndim() == 2,
                "layer_norm expects 1-d or 2-d, got " + shape_str(x.shape()));
  const std::size_t m = x.ndim() == 2 ? x.dim(0) : 1;
  const std::size_t n = x.ndim() == 2 ? x.dim(1) : x.dim(0);
  SEQDET_CHECK(gamma.numel() == n && beta.numel() == n,
                "layer_norm affine params must have size " +
                    std::to_string(n));
  auto out = detail::new_output<T>(x.shape());
  // xhat retained for backward
  auto xhat = std::make_shared<std::vector<T>>(m * n);
  auto inv_std = std::make_shared<std::vector<T>>(m);
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += double(row[j]);
    mu /= double(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = double(row[j]) - mu;
      var += d * d;
    }
    var /= double(n);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = static_cast<T>(is);
    for (std::size_t j = 0; j < n; ++j) {
      T xh = static_cast<T>((double(row[j]) - mu) * is);
      (*xhat)[i * n + j] = xh;
      ov[i * n + j] = gv[j] * xh + bv[j];
    }
  }
  auto* tape = Tape<T>::current();
  bool nx = detail::grad_needed(x.node()),
       ng = detail::grad_needed(gamma.node()),
       nb = detail::grad_needed(beta.node());
  detail::record_op(tape, tape && (nx || ng || nb), out,
                    [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                     on = out.node(), xhat, inv_std, m, n, nx, ng, nb]() {
    if (on->grad.empty()) return;
    if (ng) gn->ensure_grad();
    if (nb) bn->ensure_grad();
    if (nx) xn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const T* dy = on->grad.data() + i * n;
      const T* xh = xhat->data() + i * n;
      if (ng)
        for (std::size_t j = 0; j < n; ++j) gn->grad[j] += dy[j] * xh[j];
      if (nb)
        for (std::size_t j = 0; j < n; ++j) bn->grad[j] += dy[j];
      if (nx) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double dxh = double(dy[j]) * double(gn->value[j]);
          s1 += dxh;
          s2 += dxh * double(xh[j]);
        }
        s1 /= double(n);
        s2 /= double(n);
        double is = double((*inv_std)[i]);
        T* dx = xn->grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          double dxh = double(dy[j]) * double(gn->value[j]);
          dx[j] += static_cast<T>((dxh - s1 - double(xh[j]) * s2) * is);
        }
      }
    }
  });
  return out;
}

// ==================== losses ====================

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  SEQDET_CHECK(a.shape() == b.shape(), "mse on shapes " +
                                            shape_str(a.shape()) + " vs " +
                                            shape_str(b.shape()));
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = double(a.data()[i]) - double(b.data()[i]);
    acc += d * d;
  }
  auto out = Tensor<T>::from({1}, {static_cast<T>(acc / double(n))});
  auto* tape = Tape<T>::current();
  bool na = detail::grad_needed(a.node()), nb = detail::grad_needed(b.node());
  detail::record_op(tape, tape && (na || nb), out,
                    [an = a.node(), bn = b.node(), on = out.node(), n, na,
                     nb]() {
    if (on->grad.empty()) return;
    double g = 2.0 * double(on->grad[0]) / double(n);
    if (na) an->ensure_grad();
    if (nb) bn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      T d = static_cast<T>(g * (double(an->value[i]) - double(bn->value[i])));
      if (na) an->grad[i] += d;
      if (nb) bn->grad[i] -= d;
    }
  });
  return out;
}

// Mean cross entropy over rows of [m,v] logits against integer targets.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits,
                             const std::vector<int>& targets) {
  SEQDET_CHECK(logits.ndim() == 2, "cross_entropy_rows expects 2-d logits");
  const std::size_t m = logits.dim(0), v = logits.dim(1);
  SEQDET_CHECK(targets.size() == m,
                "cross_entropy_rows: " + std::to_string(targets.size()) +
                    " targets for " + std::to_string(m) + " rows");
  for (int t : targets)
    SEQDET_CHECK(t >= 0 && std::size_t(t) < v,
                  "cross_entropy_rows: target id out of range");
  double acc = 0.0;
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = lv.data() + i * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - mx);
    acc += mx + std::log(z) - double(row[targets[i]]);
  }
  auto out = Tensor<T>::from({1}, {static_cast<T>(acc / double(m))});
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(logits.node());
  detail::record_op(tape, track, out,
                    [ln = logits.node(), on = out.node(), targets, m, v]() {
    if (on->grad.empty()) return;
    ln->ensure_grad();
    double g = double(on->grad[0]) / double(m);
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = ln->value.data() + i * v;
      T* drow = ln->grad.data() + i * v;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(row[j]));
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - mx);
      for (std::size_t j = 0; j < v; ++j) {
        double p = std::exp(double(row[j]) - mx) / z;
        drow[j] += static_cast<T>(g * (p - (int(j) == targets[i] ? 1.0 : 0.0)));
      }
    }
  });
  return out;
}

// ==================== shape and layout ====================

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  SEQDET_CHECK(shape_numel(shape) == a.numel(),
                "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                    " changes element count");
  auto out = Tensor<T>::from(std::move(shape), a.data());
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out, [an = a.node(), on = out.node()]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      an->grad[i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  SEQDET_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                "concat_rows on shapes " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  const std::size_t ma = a.dim(0), mb = b.dim(0), n = a.dim(1);
  auto out = detail::new_output<T>({ma + mb, n});
  auto& ov = out.mutable_data();
  std::copy(a.data().begin(), a.data().end(), ov.begin());
  std::copy(b.data().begin(), b.data().end(), ov.begin() + ma * n);
  auto* tape = Tape<T>::current();
  bool na = detail::grad_needed(a.node()), nb = detail::grad_needed(b.node());
  detail::record_op(tape, tape && (na || nb), out,
                    [an = a.node(), bn = b.node(), on = out.node(), ma, mb, n,
                     na, nb]() {
    if (on->grad.empty()) return;
    if (na) {
      an->ensure_grad();
      for (std::size_t i = 0; i < ma * n; ++i) an->grad[i] += on->grad[i];
    }
    if (nb) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < mb * n; ++i)
        bn->grad[i] += on->grad[ma * n + i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  SEQDET_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0),
                "concat_cols on shapes " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  const std::size_t m = a.dim(0), na_ = a.dim(1), nb_ = b.dim(1);
  auto out = detail::new_output<T>({m, na_ + nb_});
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().begin() + i * na_, na_,
                ov.begin() + i * (na_ + nb_));
    std::copy_n(b.data().begin() + i * nb_, nb_,
                ov.begin() + i * (na_ + nb_) + na_);
  }
  auto* tape = Tape<T>::current();
  bool na = detail::grad_needed(a.node()), nb = detail::grad_needed(b.node());
  detail::record_op(tape, tape && (na || nb), out,
                    [an = a.node(), bn = b.node(), on = out.node(), m, na_,
                     nb_, na, nb]() {
    if (on->grad.empty()) return;
    const std::size_t n = na_ + nb_;
    if (na) an->ensure_grad();
    if (nb) bn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      if (na)
        for (std::size_t j = 0; j < na_; ++j)
          an->grad[i * na_ + j] += on->grad[i * n + j];
      if (nb)
        for (std::size_t j = 0; j < nb_; ++j)
          bn->grad[i * nb_ + j] += on->grad[i * n + na_ + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1) {
  SEQDET_CHECK(a.ndim() == 2 && r0 < r1 && r1 <= a.dim(0),
                "slice_rows [" + std::to_string(r0) + "," +
                    std::to_string(r1) + ") on shape " +
                    shape_str(a.shape()));
  const std::size_t n = a.dim(1);
  auto out = detail::new_output<T>({r1 - r0, n});
  std::copy_n(a.data().begin() + r0 * n, (r1 - r0) * n,
              out.mutable_data().begin());
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(), r0, n]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      an->grad[r0 * n + i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> row(const Tensor<T>& a, std::size_t i) {
  return slice_rows(a, i, i + 1);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  SEQDET_CHECK(a.ndim() == 2 && c0 < c1 && c1 <= a.dim(1),
                "slice_cols [" + std::to_string(c0) + "," +
                    std::to_string(c1) + ") on shape " +
                    shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1), w = c1 - c0;
  auto out = detail::new_output<T>({m, w});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().begin() + i * n + c0, w,
                out.mutable_data().begin() + i * w);
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(), m, n, c0, w]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        an->grad[i * n + c0 + j] += on->grad[i * w + j];
  });
  return out;
}

// Stacks 1-d [n] or single-row [1,n] tensors into [m,n].
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  SEQDET_CHECK(!rows.empty(), "stack_rows on empty list");
  const std::size_t n = rows[0].numel();
  for (const auto& r : rows)
    SEQDET_CHECK(r.numel() == n && r.ndim() <= 2,
                  "stack_rows: inconsistent row sizes");
  const std::size_t m = rows.size();
  auto out = detail::new_output<T>({m, n});
  for (std::size_t i = 0; i < m; ++i)
    std::copy(rows[i].data().begin(), rows[i].data().end(),
              out.mutable_data().begin() + i * n);
  auto* tape = Tape<T>::current();
  bool any = false;
  std::vector<NodePtr<T>> nodes(m);
  std::vector<char> needs(m);
  for (std::size_t i = 0; i < m; ++i) {
    nodes[i] = rows[i].node();
    needs[i] = detail::grad_needed(nodes[i]);
    any = any || needs[i];
  }
  detail::record_op(tape, tape && any, out,
                    [nodes = std::move(nodes), needs = std::move(needs),
                     on = out.node(), m, n]() {
    if (on->grad.empty()) return;
    for (std::size_t i = 0; i < m; ++i) {
      if (!needs[i]) continue;
      nodes[i]->ensure_grad();
      for (std::size_t j = 0; j < n; ++j)
        nodes[i]->grad[j] += on->grad[i * n + j];
    }
  });
  return out;
}

// [C,H,W] -> [H*W, C], token index i*W+j.
template <typename T>
Tensor<T> spatial_to_tokens(const Tensor<T>& x) {
  SEQDET_CHECK(x.ndim() == 3, "spatial_to_tokens expects 3-d, got " +
                                   shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto out = detail::new_output<T>({h * w, c});
  const auto& xv = x.data();
  auto& ov = out.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) ov[p * c + ch] = xv[ch * h * w + p];
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(x.node());
  detail::record_op(tape, track, out,
                    [xn = x.node(), on = out.node(), c, hw = h * w]() {
    if (on->grad.empty()) return;
    xn->ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        xn->grad[ch * hw + p] += on->grad[p * c + ch];
  });
  return out;
}

// [H*W, C] -> [C,H,W], inverse of spatial_to_tokens.
template <typename T>
Tensor<T> tokens_to_spatial(const Tensor<T>& t, std::size_t h, std::size_t w) {
  SEQDET_CHECK(t.ndim() == 2 && t.dim(0) == h * w,
                "tokens_to_spatial: " + shape_str(t.shape()) +
                    " does not cover " + std::to_string(h) + "x" +
                    std::to_string(w));
  const std::size_t c = t.dim(1);
  auto out = detail::new_output<T>({c, h, w});
  const auto& tv = t.data();
  auto& ov = out.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) ov[ch * h * w + p] = tv[p * c + ch];
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(t.node());
  detail::record_op(tape, track, out,
                    [tn = t.node(), on = out.node(), c, hw = h * w]() {
    if (on->grad.empty()) return;
    tn->ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        tn->grad[p * c + ch] += on->grad[ch * hw + p];
  });
  return out;
}

// ==================== bias adds / embedding ====================

template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& b) {
  SEQDET_CHECK(x.ndim() == 2 && b.numel() == x.dim(1),
                "add_row_bias: bias size must equal column count");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto out = detail::new_output<T>(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.mutable_data()[i * n + j] = x.data()[i * n + j] + b.data()[j];
  auto* tape = Tape<T>::current();
  bool nx = detail::grad_needed(x.node()), nb = detail::grad_needed(b.node());
  detail::record_op(tape, tape && (nx || nb), out,
                    [xn = x.node(), bn = b.node(), on = out.node(), m, n, nx,
                     nb]() {
    if (on->grad.empty()) return;
    if (nx) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += on->grad[i];
    }
    if (nb) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          bn->grad[j] += on->grad[i * n + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  SEQDET_CHECK(x.ndim() == 3 && b.numel() == x.dim(0),
                "add_channel_bias: bias size must equal channel count");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto out = detail::new_output<T>(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p)
      out.mutable_data()[ch * hw + p] = x.data()[ch * hw + p] + b.data()[ch];
  auto* tape = Tape<T>::current();
  bool nx = detail::grad_needed(x.node()), nb = detail::grad_needed(b.node());
  detail::record_op(tape, tape && (nx || nb), out,
                    [xn = x.node(), bn = b.node(), on = out.node(), c, hw, nx,
                     nb]() {
    if (on->grad.empty()) return;
    if (nx) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < c * hw; ++i) xn->grad[i] += on->grad[i];
    }
    if (nb) {
      bn->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p)
          bn->grad[ch] += on->grad[ch * hw + p];
    }
  });
  return out;
}

// Gathers rows of table [V,d] by id -> [L,d].
template <typename T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<int>& ids) {
  SEQDET_CHECK(table.ndim() == 2, "embedding_rows expects 2-d table");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    SEQDET_CHECK(id >= 0 && std::size_t(id) < v,
                  "embedding_rows: id " + std::to_string(id) +
                      " out of range for table with " + std::to_string(v) +
                      " rows");
  auto out = detail::new_output<T>({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().begin() + std::size_t(ids[i]) * d, d,
                out.mutable_data().begin() + i * d);
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(table.node());
  detail::record_op(tape, track, out,
                    [tn = table.node(), on = out.node(), ids, d]() {
    if (on->grad.empty()) return;
    tn->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        tn->grad[std::size_t(ids[i]) * d + j] += on->grad[i * d + j];
  });
  return out;
}

// ==================== convolution / pooling ====================

// 3x3 convolution, stride 1, zero padding 1. x [Ci,H,W], w [Co,Ci,3,3].
// Runs as a matmul over extracted patches; the patch matrix is cheap to
// rebuild, so the backward pass reconstructs it instead of retaining it.
template <typename T>
Tensor<T> conv2d_3x3(const Tensor<T>& x, const Tensor<T>& w) {
  SEQDET_CHECK(x.ndim() == 3 && w.ndim() == 4 && w.dim(1) == x.dim(0) &&
                    w.dim(2) == 3 && w.dim(3) == 3,
                "conv2d_3x3 on shapes " + shape_str(x.shape()) + " vs " +
                    shape_str(w.shape()));
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0);
  const std::size_t hw = h * wd, k = ci * 9;
  auto out = detail::new_output<T>({co, h, wd});
  std::vector<T> patches(k * hw);
  detail::im2col_taps(x.data().data(), ci, h, wd, detail::kGridTaps3x3, 9,
                      patches.data());
  detail::mm_nn_acc(w.data().data(), patches.data(),
                    out.mutable_data().data(), co, k, hw);
  auto* tape = Tape<T>::current();
  bool nx = detail::grad_needed(x.node()), nw = detail::grad_needed(w.node());
  detail::record_op(tape, tape && (nx || nw), out,
                    [xn = x.node(), wn = w.node(), on = out.node(), ci, h, wd,
                     co, hw, k, nx, nw]() {
    if (on->grad.empty()) return;
    const T* dout = on->grad.data();
    if (nw) {
      wn->ensure_grad();
      std::vector<T> patches(k * hw);
      detail::im2col_taps(xn->value.data(), ci, h, wd, detail::kGridTaps3x3,
                          9, patches.data());
      detail::mm_nt_acc(dout, patches.data(), wn->grad.data(), co, hw, k);
    }
    if (nx) {
      xn->ensure_grad();
      std::vector<T> dpatches(k * hw, T(0));
      detail::mm_tn_acc(wn->value.data(), dout, dpatches.data(), co, k, hw);
      detail::col2im_taps(dpatches.data(), ci, h, wd, detail::kGridTaps3x3, 9,
                          xn->grad.data());
    }
  });
  return out;
}

// 2x2 average pooling, stride 2. H and W must be even.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  SEQDET_CHECK(x.ndim() == 3 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
                "avg_pool2 needs even spatial dims, got " +
                    shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h / 2, ow = w / 2;
  auto out = detail::new_output<T>({c, oh, ow});
  const T* xp = x.data().data();
  T* op = out.mutable_data().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const T* p0 = xp + ch * h * w + 2 * i * w + 2 * j;
        op[ch * oh * ow + i * ow + j] =
            static_cast<T>((double(p0[0]) + double(p0[1]) + double(p0[w]) +
                            double(p0[w + 1])) *
                           0.25);
      }
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(x.node());
  detail::record_op(tape, track, out,
                    [xn = x.node(), on = out.node(), c, h, w, oh, ow]() {
    if (on->grad.empty()) return;
    xn->ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          T g = on->grad[ch * oh * ow + i * ow + j] * T(0.25);
          T* p0 = xn->grad.data() + ch * h * w + 2 * i * w + 2 * j;
          p0[0] += g;
          p0[1] += g;
          p0[w] += g;
          p0[w + 1] += g;
        }
  });
  return out;
}

// Transposed convolution with 2x2 kernel, stride 2 (exact upsampling double).
// x [Ci,H,W], w [Ci,Co,2,2] -> [Co,2H,2W].
template <typename T>
Tensor<T> conv2d_transpose2(const Tensor<T>& x, const Tensor<T>& w) {
  SEQDET_CHECK(x.ndim() == 3 && w.ndim() == 4 && w.dim(0) == x.dim(0) &&
                    w.dim(2) == 2 && w.dim(3) == 2,
                "conv2d_transpose2 on shapes " + shape_str(x.shape()) +
                    " vs " + shape_str(w.shape()));
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(1);
  const std::size_t oh = 2 * h, ow = 2 * wd;
  auto out = detail::new_output<T>({co, oh, ow});
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  T* op = out.mutable_data().data();
  for (std::size_t ic = 0; ic < ci; ++ic)
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          T wv = wp[((ic * co + oc) * 2 + dy) * 2 + dx];
          for (std::size_t i = 0; i < h; ++i) {
            const T* xrow = xp + ic * h * wd + i * wd;
            T* orow = op + oc * oh * ow + (2 * i + dy) * ow + dx;
            for (std::size_t j = 0; j < wd; ++j) orow[2 * j] += wv * xrow[j];
          }
        }
  auto* tape = Tape<T>::current();
  bool nx = detail::grad_needed(x.node()), nw = detail::grad_needed(w.node());
  detail::record_op(tape, tape && (nx || nw), out,
                    [xn = x.node(), wn = w.node(), on = out.node(), ci, h, wd,
                     co, oh, ow, nx, nw]() {
    if (on->grad.empty()) return;
    const T* dout = on->grad.data();
    if (nx) xn->ensure_grad();
    if (nw) wn->ensure_grad();
    for (std::size_t ic = 0; ic < ci; ++ic)
      for (std::size_t oc = 0; oc < co; ++oc)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            T wv = wn->value[((ic * co + oc) * 2 + dy) * 2 + dx];
            T wacc = T(0);
            for (std::size_t i = 0; i < h; ++i) {
              const T* dorow = dout + oc * oh * ow + (2 * i + dy) * ow + dx;
              const T* xrow = xn->value.data() + ic * h * wd + i * wd;
              if (nx) {
                T* dxrow = xn->grad.data() + ic * h * wd + i * wd;
                for (std::size_t j = 0; j < wd; ++j)
                  dxrow[j] += wv * dorow[2 * j];
              }
              if (nw)
                for (std::size_t j = 0; j < wd; ++j)
                  wacc += xrow[j] * dorow[2 * j];
            }
            if (nw) wn->grad[((ic * co + oc) * 2 + dy) * 2 + dx] += wacc;
          }
  });
  return out;
}

// Picks a single element by flat index -> [1].
template <typename T>
Tensor<T> select(const Tensor<T>& a, std::size_t i) {
  SEQDET_CHECK(i < a.numel(), "select index " + std::to_string(i) +
                                   " out of range for shape " +
                                   shape_str(a.shape()));
  auto out = Tensor<T>::from({1}, {a.data()[i]});
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out, [an = a.node(), on = out.node(), i]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    an->grad[i] += on->grad[0];
  });
  return out;
}

// Gathers flat elements: out[k] = a.flat[idx[k]]. One node for the whole
// gather, so sparse reads of a big tensor cost one op instead of one per
// element.
template <typename T>
Tensor<T> take(const Tensor<T>& a, std::vector<std::size_t> idx) {
  for (std::size_t i : idx)
    SEQDET_CHECK(i < a.numel(), "take index " + std::to_string(i) +
                                     " out of range for shape " +
                                     shape_str(a.shape()));
  auto out = detail::new_output<T>({idx.size()});
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.mutable_data()[k] = a.data()[idx[k]];
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(),
                     idx = std::move(idx)]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t k = 0; k < idx.size(); ++k)
      an->grad[idx[k]] += on->grad[k];
  });
  return out;
}

// Sums 1-d entries into segments: out[s] = sum of a[k] with seg[k] == s,
// accumulated in index order.
template <typename T>
Tensor<T> segment_sum(const Tensor<T>& a, std::vector<std::size_t> seg,
                      std::size_t nseg) {
  SEQDET_CHECK(a.numel() == seg.size(),
                "segment_sum: " + std::to_string(seg.size()) +
                    " segment ids for " + std::to_string(a.numel()) +
                    " entries");
  for (std::size_t s : seg)
    SEQDET_CHECK(s < nseg, "segment id " + std::to_string(s) +
                                " out of range " + std::to_string(nseg));
  auto out = detail::new_output<T>({nseg});
  for (std::size_t k = 0; k < seg.size(); ++k)
    out.mutable_data()[seg[k]] += a.data()[k];
  auto* tape = Tape<T>::current();
  bool track = tape && detail::grad_needed(a.node());
  detail::record_op(tape, track, out,
                    [an = a.node(), on = out.node(),
                     seg = std::move(seg)]() {
    if (on->grad.empty()) return;
    an->ensure_grad();
    for (std::size_t k = 0; k < seg.size(); ++k)
      an->grad[k] += on->grad[seg[k]];
  });
  return out;
}

// Multiplies each row of a [m,n] by the matching entry of s (numel m).
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& a, const Tensor<T>& s) {
  SEQDET_CHECK(a.ndim() == 2 && s.numel() == a.dim(0),
                "scale_rows on shapes " + shape_str(a.shape()) + " vs " +
                    shape_str(s.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto out = detail::new_output<T>(a.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T si = s.data()[i];
    for (std::size_t j = 0; j < n; ++j)
      out.mutable_data()[i * n + j] = a.data()[i * n + j] * si;
  }
  auto* tape = Tape<T>::current();
  bool na = detail::grad_needed(a.node()), nb = detail::grad_needed(s.node());
  detail::record_op(tape, tape && (na || nb), out,
                    [an = a.node(), sn = s.node(), on = out.node(), m, n, na,
                     nb]() {
    if (on->grad.empty()) return;
    if (na) {
      an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const T si = sn->value[i];
        for (std::size_t j = 0; j < n; ++j)
          an->grad[i * n + j] += on->grad[i * n + j] * si;
      }
    }
    if (nb) {
      sn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < n; ++j)
          acc += on->grad[i * n + j] * an->value[i * n + j];
        sn->grad[i] += acc;
      }
    }
  });
  return out;
}

// ==================== graph utilities ====================

// Returns a detached copy: same values, no history, no gradient flow.
template <typename T>
Tensor<T> stop_grad(const Tensor<T>& a) {
  return Tensor<T>::from(a.shape(), a.data());
}

}  // namespace seqdet
