#pragma once

#include <string>
#include <vector>

#include "seqdet/attention.hpp"
#include "seqdet/layers.hpp"
#include "seqdet/ops.hpp"
#include "seqdet/params.hpp"

namespace seqdet {

// conv, 2x2 mean pool, conv, joined by a pooled pointwise skip; halves the
// spatial size. Pooling right after the first conv keeps the second conv —
// the expensive one — at half resolution.
template <typename T>
struct ResidualStage {
  Conv3x3<T> c1, c2;
  Tensor<T> skip_w;  // [in, out] pointwise projection

  ResidualStage() = default;
  ResidualStage(ParamStore<T>& ps, const std::string& name, std::size_t in,
                std::size_t out)
      : c1(ps, name + ".c1", in, out),
        c2(ps, name + ".c2", out, out),
        skip_w(ps.add(name + ".skip.w", {in, out}, Init::HeNormal, in)) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto h1 = avg_pool2(relu(c1(x)));
    const std::size_t h = h1.dim(1), w = h1.dim(2);
    auto t = c2(h1);
    auto s = tokens_to_spatial(matmul(spatial_to_tokens(avg_pool2(x)), skip_w),
                               h, w);
    return relu(add(t, s));
  }
};

// Shared convolutional stem: two residual stages, total stride 4.
template <typename T>
struct Stem {
  ResidualStage<T> s1, s2;

  Stem() = default;
  Stem(ParamStore<T>& ps, const std::string& name, std::size_t in,
       std::size_t w1, std::size_t w2)
      : s1(ps, name + ".s1", in, w1), s2(ps, name + ".s2", w1, w2) {}

  Tensor<T> operator()(const Tensor<T>& img) const { return s2(s1(img)); }
};

struct EncoderSettings {
  std::size_t img_channels = 3;
  std::size_t img_size = 32;
  std::size_t width1 = 16;
  std::size_t width2 = 32;  // token dimension
  std::size_t heads = 4;
  std::size_t blocks = 2;
  bool use_dpda = true;
  bool adaptive_alpha = true;

  std::size_t grid() const { return img_size / 4; }
  std::size_t tokens() const { return grid() * grid(); }
};

// One stem and one learned positional embedding feed two branches: a coarse
// branch of plain transformer blocks and a fine branch of dual-path blocks
// over the spatial map. The branches run in lockstep — fine block i gates its
// difference blend on coarse block i's intermediate feature. With the fine
// branch disabled, the coarse tokens stand in for both outputs.
template <typename T>
struct TwoBranchEncoder {
  EncoderSettings cfg;
  Stem<T> stem;
  Tensor<T> pos;
  std::vector<EncoderBlock<T>> coarse;
  std::vector<DpdaBlock<T>> fine;

  TwoBranchEncoder() = default;
  TwoBranchEncoder(ParamStore<T>& ps, const std::string& name,
                   const EncoderSettings& settings)
      : cfg(settings),
        stem(ps, name + ".stem", cfg.img_channels, cfg.width1, cfg.width2),
        pos(ps.add(name + ".pos", {cfg.tokens(), cfg.width2},
                   Init::Normal002)) {
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      std::string bs = std::to_string(b);
      coarse.emplace_back(ps, name + ".coarse" + bs, cfg.width2, cfg.heads);
      if (cfg.use_dpda)
        fine.emplace_back(ps, name + ".fine" + bs, cfg.width2, cfg.heads,
                          cfg.adaptive_alpha);
    }
  }

  struct Out {
    Tensor<T> coarse_tokens, fine_tokens;  // each [tokens, width2]
  };

  Out operator()(const Tensor<T>& img) const {
    const std::size_t g = cfg.grid();
    auto x0 = add(spatial_to_tokens(stem(img)), pos);  // [tokens, width2]

    auto xc = x0;
    if (!cfg.use_dpda) {
      for (const auto& blk : coarse) xc = blk(xc);
      return {xc, xc};
    }

    auto xf_spatial = tokens_to_spatial(x0, g, g);
    Tensor<T> xf;
    for (std::size_t b = 0; b < coarse.size(); ++b) {
      auto stage = coarse[b].forward_stages(xc);
      xf = fine[b](xf_spatial, stage.inter);
      xc = stage.out;
      if (b + 1 < coarse.size()) xf_spatial = tokens_to_spatial(xf, g, g);
    }
    return {xc, xf};
  }
};

}  // namespace seqdet
