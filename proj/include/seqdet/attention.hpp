#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "seqdet/diff_conv.hpp"
#include "seqdet/layers.hpp"
#include "seqdet/ops.hpp"
#include "seqdet/params.hpp"
#include "seqdet/tensor.hpp"

namespace seqdet {

// Additive causal mask for stacked per-head score rows: each of the `heads`
// row blocks is 0 on and below the diagonal and a large negative value above
// it. Built untracked, so it never enters the tape.
template <typename T>
Tensor<T> causal_mask(std::size_t heads, std::size_t L) {
  auto m = Tensor<T>::zeros({heads * L, L});
  auto& v = m.mutable_data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = i + 1; j < L; ++j)
        v[(h * L + i) * L + j] = T(-1e30);
  return m;
}

// Multi-head attention. The head projections are stored packed — one
// dim-by-dim matrix per role whose column block h belongs to head h — and
// scores for all heads live in one stacked [heads*Lq, Lk] tensor, so a whole
// attention call is a handful of wide ops. Queries may come from a different
// sequence than keys and values (cross attention). Scores can be shifted by
// an additive bias (stacked per-head row blocks, like the scores) before the
// softmax, and a causal mask can be applied for autoregressive self
// attention.
template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t heads = 0, dh = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, const std::string& name,
                     std::size_t dim, std::size_t n_heads)
      : heads(n_heads), dh(dim / n_heads) {
    if (dim % n_heads != 0)
      throw ContractError("attention dim " + std::to_string(dim) +
                          " not divisible by " + std::to_string(n_heads) +
                          " heads");
    wq = Linear<T>(ps, name + ".q", dim, dim, false);
    wk = Linear<T>(ps, name + ".k", dim, dim, false);
    wv = Linear<T>(ps, name + ".v", dim, dim, false);
    wo = Linear<T>(ps, name + ".o", dim, dim, false);
  }

  Tensor<T> attend(const Tensor<T>& q_src, const Tensor<T>& kv_src,
                   bool causal, const Tensor<T>* score_bias = nullptr) const {
    if (causal && q_src.dim(0) != kv_src.dim(0))
      throw ContractError("causal attention needs equal sequence lengths");
    auto q = wq(q_src);
    auto k = wk(kv_src);
    auto v = wv(kv_src);
    auto s = heads_scores(q, k, heads, 1.0 / std::sqrt(double(dh)));
    if (score_bias) s = add(s, *score_bias);
    if (causal) s = add(s, causal_mask<T>(heads, q_src.dim(0)));
    return wo(heads_mix(softmax(s), v, heads));
  }
};

// Post-norm transformer block: attention, residual, norm, 4x MLP, residual,
// norm. Self attention over one token sequence. The normalized post-attention
// activation is exposed as an intermediate so a sibling branch can read it.
template <typename T>
struct EncoderBlock {
  MultiHeadAttention<T> attn;
  LayerNorm<T> ln1, ln2;
  Mlp<T> mlp;

  EncoderBlock() = default;
  EncoderBlock(ParamStore<T>& ps, const std::string& name, std::size_t dim,
               std::size_t heads)
      : attn(ps, name + ".attn", dim, heads),
        ln1(ps, name + ".ln1", dim),
        ln2(ps, name + ".ln2", dim),
        mlp(ps, name + ".mlp", dim, 4 * dim, dim) {}

  struct Stage {
    Tensor<T> inter, out;
  };

  Stage forward_stages(const Tensor<T>& x) const {
    auto x1 = ln1(add(x, attn.attend(x, x, false)));
    return {x1, ln2(add(x1, mlp(x1)))};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return forward_stages(x).out;
  }
};

// Dual-path block for the fine branch. The query path is a plain 3x3
// convolution; the key/value path blends the three pixel-difference
// convolutions. The blend weights come from a small gating MLP over the
// token-averaged intermediate feature of the sibling plain-attention block
// running in lockstep (or are fixed at 1/3 each when adaptive blending is
// off). Cross attention reads the difference path from the query path,
// followed by the usual post-norm MLP sub-block.
template <typename T>
struct DpdaBlock {
  Conv3x3<T> vanilla;
  Tensor<T> wc, wa, wr;
  Mlp<T> alpha_mlp;
  MultiHeadAttention<T> attn;
  LayerNorm<T> ln1, ln2;
  Mlp<T> mlp;
  bool adaptive = true;

  DpdaBlock() = default;
  DpdaBlock(ParamStore<T>& ps, const std::string& name, std::size_t ch,
            std::size_t heads, bool adaptive_alpha)
      : vanilla(ps, name + ".q_conv", ch, ch),
        wc(ps.add(name + ".dc.w", {ch, ch, 3, 3}, Init::HeNormal, ch * 9)),
        wa(ps.add(name + ".da.w", {ch, ch, 3, 3}, Init::HeNormal, ch * 9)),
        wr(ps.add(name + ".dr.w", {ch, ch, 3, 3}, Init::HeNormal, ch * 9)),
        attn(ps, name + ".attn", ch, heads),
        ln1(ps, name + ".ln1", ch),
        ln2(ps, name + ".ln2", ch),
        mlp(ps, name + ".mlp", ch, 4 * ch, ch),
        adaptive(adaptive_alpha) {
    if (adaptive_alpha)
      alpha_mlp = Mlp<T>(ps, name + ".alpha", ch,
                         std::max<std::size_t>(1, ch / 4), 3);
  }

  // Blend weights from the sibling block's intermediate tokens [t, ch].
  Tensor<T> blend_weights(const Tensor<T>& sibling_inter) const {
    auto g = reshape(mean_rows(sibling_inter), {1, sibling_inter.dim(1)});
    return softmax(reshape(alpha_mlp(g), {3}));
  }

  // x is a [C,H,W] feature map, sibling_inter the lockstep intermediate
  // tokens used for the blend gate; returns [H*W, C] tokens.
  Tensor<T> operator()(const Tensor<T>& x,
                       const Tensor<T>& sibling_inter) const {
    auto q_feat = vanilla(x);
    auto c = central_diff_conv2d(x, wc);
    auto a = angular_diff_conv2d(x, wa);
    auto r = radial_diff_conv2d(x, wr);
    Tensor<T> blended;
    if (adaptive) {
      auto alpha = blend_weights(sibling_inter);
      blended = add(add(mul(c, select(alpha, 0)), mul(a, select(alpha, 1))),
                    mul(r, select(alpha, 2)));
    } else {
      double third = 1.0 / 3.0;
      blended = add(add(scale(c, third), scale(a, third)), scale(r, third));
    }
    auto q_tok = spatial_to_tokens(q_feat);
    auto kv_tok = spatial_to_tokens(blended);
    auto x1 = ln1(add(q_tok, attn.attend(q_tok, kv_tok, false)));
    return ln2(add(x1, mlp(x1)));
  }
};

}  // namespace seqdet
