#pragma once

#include <string>
#include <vector>

#include "seqdet/layers.hpp"
#include "seqdet/ops.hpp"
#include "seqdet/params.hpp"
#include "seqdet/tensor.hpp"

namespace seqdet {

// Variational prior over manipulated-region locations. A small conv encoder
// reads the input image and predicts, for every manipulation class, a 2-d
// latent Gaussian. The sigmoid of the mean is a normalized (x, y) position;
// together with the (optionally per-head offset) scale it induces a Gaussian
// density over the encoder token grid which is later injected into decoder
// cross-attention scores. A deconv decoder reconstructs the image from a
// reparameterized latent draw, giving the usual reconstruction plus KL
// objective.
template <typename T>
struct ShapePrior {
  std::size_t n_classes = 0, heads = 0;
  std::size_t grid_h = 0, grid_w = 0;   // attention token grid
  std::size_t feat_c = 0, feat_hw = 0;  // encoder output spatial size
  bool with_offsets = true;

  Conv3x3<T> e1, e2, e3;
  Linear<T> mu_head, logvar_head;
  Tensor<T> off_w, off_b;  // zero-initialized offset head
  Linear<T> dec_fc;
  Tensor<T> d1, d2, d3;  // transposed conv kernels

  ShapePrior() = default;
  ShapePrior(ParamStore<T>& ps, const std::string& name, std::size_t classes,
             std::size_t n_heads, std::size_t img_channels,
             std::size_t img_size, std::size_t token_grid, bool offsets,
             std::size_t v1 = 8, std::size_t v2 = 16, std::size_t v3 = 32)
      : n_classes(classes),
        heads(n_heads),
        grid_h(token_grid),
        grid_w(token_grid),
        feat_c(v3),
        with_offsets(offsets),
        e1(ps, name + ".e1", img_channels, v1),
        e2(ps, name + ".e2", v1, v2),
        e3(ps, name + ".e3", v2, v3) {
    const std::size_t fs = img_size / 8;  // three 2x2 pools
    feat_hw = fs * fs;
    const std::size_t flat = v3 * feat_hw, lat = 2 * classes;
    mu_head = Linear<T>(ps, name + ".mu", flat, lat);
    logvar_head = Linear<T>(ps, name + ".logvar", flat, lat);
    if (offsets) {
      // starts as an exact zero map so enabling offsets is a no-op until
      // training moves it
      off_w = ps.add(name + ".off.w", {v3, n_heads * 4}, Init::Zeros);
      off_b = ps.add(name + ".off.b", {n_heads * 4}, Init::Zeros);
    }
    dec_fc = Linear<T>(ps, name + ".dec_fc", lat, flat);
    d1 = ps.add(name + ".d1.w", {v3, v2, 2, 2}, Init::HeNormal, v3 * 4);
    d2 = ps.add(name + ".d2.w", {v2, v1, 2, 2}, Init::HeNormal, v2 * 4);
    d3 = ps.add(name + ".d3.w", {v1, img_channels, 2, 2}, Init::HeNormal,
                v1 * 4);
  }

  struct Encoded {
    Tensor<T> mu_raw, logvar;  // [1, 2C] latent statistics
    Tensor<T> mu_coord;        // sigmoid(mu_raw), normalized positions
    Tensor<T> sigma;           // exp(logvar / 2)
    Tensor<T> offsets;         // [1, heads*4] or undefined
  };

  Encoded encode(const Tensor<T>& img) const {
    auto f1 = avg_pool2(relu(e1(img)));
    auto f2 = avg_pool2(relu(e2(f1)));
    auto feat = avg_pool2(relu(e3(f2)));  // [v3, h/8, w/8]
    auto flat = reshape(feat, {1, feat.numel()});
    Encoded enc;
    enc.mu_raw = mu_head(flat);
    enc.logvar = logvar_head(flat);
    enc.mu_coord = sigmoid(enc.mu_raw);
    enc.sigma = exp(scale(enc.logvar, 0.5));
    if (with_offsets) {
      auto gap = reshape(channel_mean(feat), {1, feat_c});
      enc.offsets = add_row_bias(matmul(gap, off_w), off_b);
    }
    return enc;
  }

  // Closed-form KL divergence to the standard normal, mean over latent
  // elements: (mu^2 + sigma^2 - 1 - log sigma^2) / 2.
  Tensor<T> kld(const Encoded& enc) const {
    auto t = sub(add(mul(enc.mu_raw, enc.mu_raw), exp(enc.logvar)),
                 add_const(enc.logvar, 1.0));
    return scale(mean(t), 0.5);
  }

  // Decoder reconstruction from z = mu + sigma * eps.
  Tensor<T> reconstruct(const Encoded& enc, const Tensor<T>& eps) const {
    auto z = add(enc.mu_raw, mul(enc.sigma, reshape(eps, enc.sigma.shape())));
    const std::size_t fs = grid_side_of(feat_hw);
    auto f = reshape(relu(dec_fc(z)), {feat_c, fs, fs});
    auto u1 = relu(conv2d_transpose2(f, d1));
    auto u2 = relu(conv2d_transpose2(u1, d2));
    return sigmoid(conv2d_transpose2(u2, d3));
  }

  // Gaussian density of class `cls` for attention head `head`, evaluated on
  // the token grid; [tokens]. Offsets shift the mean and widen or narrow the
  // scale per head; scales are floored at 1e-3.
  Tensor<T> class_map(const Encoded& enc, std::size_t cls,
                      std::size_t head) const {
    auto mux = select(enc.mu_coord, 2 * cls);
    auto muy = select(enc.mu_coord, 2 * cls + 1);
    auto sx = select(enc.sigma, 2 * cls);
    auto sy = select(enc.sigma, 2 * cls + 1);
    if (with_offsets && enc.offsets.defined()) {
      mux = add(mux, select(enc.offsets, head * 4));
      muy = add(muy, select(enc.offsets, head * 4 + 1));
      sx = add(sx, select(enc.offsets, head * 4 + 2));
      sy = add(sy, select(enc.offsets, head * 4 + 3));
    }
    sx = clamp_min(sx, 1e-3);
    sy = clamp_min(sy, 1e-3);
    auto gx = grid_coords(true);
    auto gy = grid_coords(false);
    auto dx = sub(gx, mux);
    auto dy = sub(gy, muy);
    auto tx = div(mul(dx, dx), scale(mul(sx, sx), 2.0));
    auto ty = div(mul(dy, dy), scale(mul(sy, sy), 2.0));
    auto dens = exp(neg(add(tx, ty)));
    auto coef = div(Tensor<T>::scalar(T(1.0 / 6.283185307179586476925286766559)),
                    mul(sx, sy));
    return mul(dens, coef);
  }

  // Mean of all class maps; used for rows whose input token carries no
  // manipulation class (start, padding, end-of-sequence).
  Tensor<T> average_map(const Encoded& enc, std::size_t head) const {
    std::vector<Tensor<T>> maps;
    for (std::size_t c = 0; c < n_classes; ++c)
      maps.push_back(class_map(enc, c, head));
    return mean_rows(stack_rows(maps));
  }

 private:
  static std::size_t grid_side_of(std::size_t hw) {
    std::size_t s = 1;
    while (s * s < hw) ++s;
    return s;
  }

  // Normalized coordinates of the token grid, corners at (0,0) and (1,1);
  // row-major tokens, x varies fastest.
  Tensor<T> grid_coords(bool x_axis) const {
    auto t = Tensor<T>::zeros({grid_h * grid_w});
    auto& v = t.mutable_data();
    for (std::size_t i = 0; i < grid_h; ++i)
      for (std::size_t j = 0; j < grid_w; ++j)
        v[i * grid_w + j] =
            x_axis ? (grid_w > 1 ? T(double(j) / double(grid_w - 1)) : T(0))
                   : (grid_h > 1 ? T(double(i) / double(grid_h - 1)) : T(0));
    return t;
  }
};

}  // namespace seqdet
