#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "seqdet/ops.hpp"
#include "seqdet/tensor.hpp"

// Pixel-difference convolutions. All three variants take a raw 3x3 kernel
// [Co,Ci,3,3] and interpret its taps through a difference scheme before
// sliding it over the zero-padded input:
//
//   central:  each ring tap multiplies x(p0+pn) - x(p0); the raw center tap
//             multiplies a zero difference and so never influences the output.
//   angular:  each ring tap multiplies x(p0+pn) - x(p0+p_{n-1}), consecutive
//             neighbours taken clockwise around the ring with wrap-around;
//             the center tap multiplies x(p0) directly.
//   radial:   each ring tap multiplies x(p0+pn) - x(p0+2*pn), pairing the
//             inner ring with the radius-2 ring (a 5x5 footprint); the center
//             tap multiplies x(p0) directly.
//
// Each scheme is linear in the raw weights, so it reduces to an ordinary
// convolution with an effective kernel. Forward runs as a matmul over
// extracted patches like conv2d_3x3; backward maps effective-kernel
// gradients back onto the raw taps.

namespace seqdet {

namespace detail {

// Clockwise ring starting at the top-left neighbour, (dy, dx) pairs.
inline constexpr std::array<std::array<int, 2>, 8> kRing = {{{-1, -1},
                                                             {-1, 0},
                                                             {-1, 1},
                                                             {0, 1},
                                                             {1, 1},
                                                             {1, 0},
                                                             {1, -1},
                                                             {0, -1}}};

// Raw-kernel slot (ky*3+kx) of ring position n.
inline constexpr std::size_t ring_slot(std::size_t n) {
  return std::size_t(kRing[n][0] + 1) * 3 + std::size_t(kRing[n][1] + 1);
}

// Radial footprint: inner ring, radius-2 ring, then center.
inline constexpr int kRadialTaps[17][2] = {
    {-1, -1}, {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1},
    {-2, -2}, {-2, 0}, {-2, 2}, {0, 2}, {2, 2}, {2, 0}, {2, -2}, {0, -2},
    {0, 0}};

enum class DiffKind { Central, Angular, Radial };

inline std::size_t diff_ntaps(DiffKind kind) {
  return kind == DiffKind::Radial ? 17 : 9;
}

inline const int (*diff_taps(DiffKind kind))[2] {
  return kind == DiffKind::Radial ? kRadialTaps : kGridTaps3x3;
}

// Effective weight row for one (oc, ic) kernel slice; eff has ntaps slots
// laid out to match diff_taps(kind).
template <typename T>
void build_eff(const T* wk, DiffKind kind, T* eff) {
  switch (kind) {
    case DiffKind::Central: {
      T ssum = T(0);
      for (std::size_t n = 0; n < 8; ++n) ssum += wk[ring_slot(n)];
      for (std::size_t n = 0; n < 8; ++n) eff[ring_slot(n)] = wk[ring_slot(n)];
      eff[4] = -ssum;
      break;
    }
    case DiffKind::Angular: {
      // x(p0+pn) collects +w_n from its own difference and -w_{n+1} from the
      // next tap's difference
      for (std::size_t n = 0; n < 8; ++n)
        eff[ring_slot(n)] = wk[ring_slot(n)] - wk[ring_slot((n + 1) % 8)];
      eff[4] = wk[4];
      break;
    }
    case DiffKind::Radial: {
      for (std::size_t n = 0; n < 8; ++n) {
        eff[n] = wk[ring_slot(n)];
        eff[8 + n] = -wk[ring_slot(n)];
      }
      eff[16] = wk[4];
      break;
    }
  }
}

// Transpose of build_eff: accumulates effective-kernel gradients onto the
// raw 3x3 taps.
template <typename T>
void chain_eff_grad(const T* deff, DiffKind kind, T* dwk) {
  switch (kind) {
    case DiffKind::Central:
      for (std::size_t n = 0; n < 8; ++n)
        dwk[ring_slot(n)] += deff[ring_slot(n)] - deff[4];
      break;
    case DiffKind::Angular:
      for (std::size_t n = 0; n < 8; ++n)
        dwk[ring_slot(n)] +=
            deff[ring_slot(n)] - deff[ring_slot((n + 7) % 8)];
      dwk[4] += deff[4];
      break;
    case DiffKind::Radial:
      for (std::size_t n = 0; n < 8; ++n)
        dwk[ring_slot(n)] += deff[n] - deff[8 + n];
      dwk[4] += deff[16];
      break;
  }
}

template <typename T>
Tensor<T> diff_conv_impl(const Tensor<T>& x, const Tensor<T>& w,
                         DiffKind kind) {
  SEQDET_CHECK(x.ndim() == 3 && w.ndim() == 4 && w.dim(1) == x.dim(0) &&
                   w.dim(2) == 3 && w.dim(3) == 3,
               "difference conv on shapes " + shape_str(x.shape()) + " vs " +
                   shape_str(w.shape()));
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0);
  const std::size_t hw = h * wd, nt = diff_ntaps(kind), k = ci * nt;
  auto out = new_output<T>({co, h, wd});

  std::vector<T> eff(co * k);
  for (std::size_t oc = 0; oc < co; ++oc)
    for (std::size_t ic = 0; ic < ci; ++ic)
      build_eff(w.data().data() + (oc * ci + ic) * 9, kind,
                eff.data() + oc * k + ic * nt);
  std::vector<T> patches(k * hw);
  im2col_taps(x.data().data(), ci, h, wd, diff_taps(kind), nt,
              patches.data());
  mm_nn_acc(eff.data(), patches.data(), out.mutable_data().data(), co, k, hw);

  auto* tape = Tape<T>::current();
  bool nx = grad_needed(x.node()), nw = grad_needed(w.node());
  record_op(tape, tape && (nx || nw), out,
            [xn = x.node(), wn = w.node(), on = out.node(), ci, h, wd, co, hw,
             nt, k, kind, eff = std::move(eff), nx, nw]() {
    if (on->grad.empty()) return;
    const T* dout = on->grad.data();
    if (nw) {
      wn->ensure_grad();
      std::vector<T> patches(k * hw);
      im2col_taps(xn->value.data(), ci, h, wd, diff_taps(kind), nt,
                  patches.data());
      std::vector<T> deff(co * k, T(0));
      mm_nt_acc(dout, patches.data(), deff.data(), co, hw, k);
      for (std::size_t oc = 0; oc < co; ++oc)
        for (std::size_t ic = 0; ic < ci; ++ic)
          chain_eff_grad(deff.data() + oc * k + ic * nt, kind,
                         wn->grad.data() + (oc * ci + ic) * 9);
    }
    if (nx) {
      xn->ensure_grad();
      std::vector<T> dpatches(k * hw, T(0));
      mm_tn_acc(eff.data(), dout, dpatches.data(), co, k, hw);
      col2im_taps(dpatches.data(), ci, h, wd, diff_taps(kind), nt,
                  xn->grad.data());
    }
  });
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> central_diff_conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  return detail::diff_conv_impl(x, w, detail::DiffKind::Central);
}

template <typename T>
Tensor<T> angular_diff_conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  return detail::diff_conv_impl(x, w, detail::DiffKind::Angular);
}

template <typename T>
Tensor<T> radial_diff_conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  return detail::diff_conv_impl(x, w, detail::DiffKind::Radial);
}

}  // namespace seqdet
