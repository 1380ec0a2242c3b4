#pragma once

#include <string>
#include <vector>

#include "seqdet/attention.hpp"
#include "seqdet/layers.hpp"
#include "seqdet/ops.hpp"
#include "seqdet/params.hpp"
#include "seqdet/seqops.hpp"

namespace seqdet {

// Decoder block: causal self-attention over the sequence tokens, then cross
// attention into the encoder. In multi-source form the block attends three
// ways — into the coarse tokens, the fine tokens, and a shallow fusion of the
// two — sums the three attention outputs, and finishes with an MLP and a
// post-norm. In single-source form one cross attention reads a merged token
// sequence, which degenerates to the conventional decoder block.
//
// Additive score bias maps (per-head row blocks stacked into one
// [heads*seq, tokens] tensor) can be injected into the coarse and fine cross
// attentions, scaled by a learnable scalar.
template <typename T>
struct DecoderBlock {
  bool multi_source = true;
  bool use_bias_maps = false;
  MultiHeadAttention<T> self_attn;
  Mlp<T> fuse;
  MultiHeadAttention<T> cross_c, cross_m, cross_f;
  Mlp<T> out_mlp;
  LayerNorm<T> ln_out;
  Tensor<T> eta;

  DecoderBlock() = default;
  DecoderBlock(ParamStore<T>& ps, const std::string& name, std::size_t dim,
               std::size_t heads, bool multi_src, bool bias_maps)
      : multi_source(multi_src),
        use_bias_maps(bias_maps),
        self_attn(ps, name + ".self", dim, heads),
        cross_c(ps, name + ".cross_c", dim, heads),
        out_mlp(ps, name + ".mlp", dim, 4 * dim, dim),
        ln_out(ps, name + ".ln", dim) {
    if (multi_source) {
      fuse = Mlp<T>(ps, name + ".fuse", 2 * dim, 2 * dim, dim);
      cross_m = MultiHeadAttention<T>(ps, name + ".cross_m", dim, heads);
      cross_f = MultiHeadAttention<T>(ps, name + ".cross_f", dim, heads);
    }
    if (bias_maps) eta = ps.add(name + ".eta", {1}, Init::Ones);
  }

  // xs: [L, d] embedded sequence; xc/xf: [t, d] encoder tokens (the same
  // tensor when the encoder runs one branch); maps: [heads*L, t] bias.
  Tensor<T> operator()(const Tensor<T>& xs, const Tensor<T>& xc,
                       const Tensor<T>& xf,
                       const Tensor<T>* maps = nullptr) const {
    auto xst = self_attn.attend(xs, xs, true);

    Tensor<T> scaled;
    const Tensor<T>* bias = nullptr;
    if (use_bias_maps && maps) {
      scaled = mul(*maps, eta);
      bias = &scaled;
    }

    Tensor<T> a;
    if (multi_source) {
      auto xm = fuse(concat_cols(xc, xf));
      auto ac = cross_c.attend(xst, xc, false, bias);
      auto am = cross_m.attend(xst, xm, false);
      auto af = cross_f.attend(xst, xf, false, bias);
      a = add(add(ac, am), af);
    } else {
      auto kv = xc.node() == xf.node() ? xc : concat_rows(xc, xf);
      a = cross_c.attend(xst, kv, false);
    }
    return ln_out(add(out_mlp(a), a));
  }
};

// Token + positional embedding, a stack of decoder blocks, and a linear
// vocabulary head. Returns both the final per-position features and the
// logits; the features feed the contrastive objective.
template <typename T>
struct SequentialDecoder {
  std::size_t dim = 0, vocab_size = 0;
  Tensor<T> tok_embed, pos_embed;
  std::vector<DecoderBlock<T>> blocks;
  Linear<T> head;

  SequentialDecoder() = default;
  SequentialDecoder(ParamStore<T>& ps, const std::string& name,
                    std::size_t model_dim, std::size_t vocab,
                    std::size_t n_blocks, std::size_t heads, bool multi_src,
                    bool bias_maps)
      : dim(model_dim),
        vocab_size(vocab),
        tok_embed(ps.add(name + ".tok", {vocab, model_dim}, Init::Normal002)),
        pos_embed(ps.add(name + ".pos", {kMaxSeqLen + 1, model_dim},
                         Init::Normal002)) {
    for (std::size_t b = 0; b < n_blocks; ++b)
      blocks.emplace_back(ps, name + ".blk" + std::to_string(b), model_dim,
                          heads, multi_src, bias_maps);
    head = Linear<T>(ps, name + ".head", model_dim, vocab);
  }

  struct Out {
    Tensor<T> features;  // [L, d]
    Tensor<T> logits;    // [L, vocab]
  };

  // input_tokens drive both the embeddings and (upstream) the bias-map rows;
  // maps are shared across blocks, each block applying its own scale.
  Out forward(const std::vector<int>& input_tokens, const Tensor<T>& xc,
              const Tensor<T>& xf, const Tensor<T>* maps = nullptr) const {
    const std::size_t L = input_tokens.size();
    if (L == 0 || L > kMaxSeqLen + 1)
      throw ContractError("decoder input length " + std::to_string(L) +
                          " outside [1, " + std::to_string(kMaxSeqLen + 1) +
                          "]");
    auto x = add(embedding_rows(tok_embed, input_tokens),
                 slice_rows(pos_embed, 0, L));
    for (const auto& blk : blocks) x = blk(x, xc, xf, maps);
    return {x, head(x)};
  }
};

// Greedy autoregressive decoding. step(prefix) must return the logits row
// for the next token given the current input prefix; emission stops at the
// end token or after max_steps tokens. Returns the emitted tokens without
// framing.
template <typename T, typename StepFn>
std::vector<int> greedy_decode(StepFn&& step, int sos_token, int eos_token,
                               std::size_t max_steps) {
  std::vector<int> prefix = {sos_token};
  std::vector<int> emitted;
  for (std::size_t t = 0; t < max_steps; ++t) {
    std::vector<T> logits = step(prefix);
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    if (int(best) == eos_token) break;
    emitted.push_back(int(best));
    prefix.push_back(int(best));
  }
  return emitted;
}

}  // namespace seqdet
