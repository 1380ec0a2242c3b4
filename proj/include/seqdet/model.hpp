#pragma once

#include <string>
#include <vector>

#include "seqdet/config.hpp"
#include "seqdet/decoder.hpp"
#include "seqdet/encoder.hpp"
#include "seqdet/objectives.hpp"
#include "seqdet/seqops.hpp"
#include "seqdet/shape_prior.hpp"

namespace seqdet {

// The full detector: two-branch spatial encoder, optional variational shape
// prior, and the sequential decoder. Parameters draw from per-name streams,
// so configurations sharing a module initialize it identically.
template <typename T>
struct Model {
  ModelConfig cfg;
  Vocab vocab;
  ParamStore<T> ps;
  TwoBranchEncoder<T> encoder;
  ShapePrior<T> prior;
  SequentialDecoder<T> decoder;

  explicit Model(const ModelConfig& config)
      : cfg(config), vocab(config.classes), ps(config.seed) {
    cfg.validate();
    EncoderSettings es;
    es.img_channels = cfg.img_channels;
    es.img_size = cfg.img_size;
    es.width1 = cfg.width1;
    es.width2 = cfg.width2;
    es.heads = cfg.heads;
    es.blocks = cfg.enc_blocks;
    es.use_dpda = cfg.dpda;
    es.adaptive_alpha = cfg.adaptive_alpha;
    encoder = TwoBranchEncoder<T>(ps, "enc", es);
    if (cfg.sgm)
      prior = ShapePrior<T>(ps, "vae", cfg.classes, cfg.heads,
                            cfg.img_channels, cfg.img_size, es.grid(),
                            cfg.sgm_offsets, cfg.vae_w1, cfg.vae_w2,
                            cfg.vae_w3);
    decoder = SequentialDecoder<T>(ps, "dec", cfg.width2, vocab.size(),
                                   cfg.dec_blocks, cfg.heads, cfg.msca,
                                   cfg.sgm);
  }

  std::size_t latent_dim() const { return 2 * cfg.classes; }

  // Additive score bias rows for the given decoder input tokens, all heads
  // stacked into one [heads*L, tokens] tensor (head h in row block h): a
  // class token selects its own density map, framing and padding tokens the
  // average over classes.
  Tensor<T> bias_maps(const typename ShapePrior<T>::Encoded& enc,
                      const std::vector<int>& input_tokens) const {
    std::vector<Tensor<T>> rows;
    rows.reserve(cfg.heads * input_tokens.size());
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      Tensor<T> avg;
      for (int tok : input_tokens) {
        if (vocab.is_class(tok)) {
          rows.push_back(prior.class_map(enc, std::size_t(tok) - 1, h));
        } else {
          if (!avg.defined()) avg = prior.average_map(enc, h);
          rows.push_back(avg);
        }
      }
    }
    return stack_rows(rows);
  }

  struct Forward {
    Tensor<T> logits;    // [kMaxSeqLen+1, vocab]
    Tensor<T> features;  // [kMaxSeqLen+1, dim]
    Tensor<T> ce;
    Tensor<T> rec, kld;        // defined only with the shape prior
    std::vector<int> targets;  // supervision ids in decoding order
  };

  // Teacher-forced pass over one sample. ordered_real holds the real class
  // tokens already order-transformed; vae_eps is the reparameterization draw
  // (latent_dim values), ignored without the shape prior.
  Forward teacher_forward(const Tensor<T>& img,
                          const std::vector<int>& ordered_real,
                          const Tensor<T>* vae_eps = nullptr) const {
    Forward out;
    auto enc = encoder(img);
    auto input = decoder_input(ordered_real, vocab);
    out.targets = decoder_targets(ordered_real, vocab);

    Tensor<T> maps;
    const Tensor<T>* maps_ptr = nullptr;
    if (cfg.sgm) {
      auto pe = prior.encode(img);
      maps = bias_maps(pe, input);
      maps_ptr = &maps;
      out.kld = prior.kld(pe);
      if (vae_eps) out.rec = mse(prior.reconstruct(pe, *vae_eps), img);
    }

    auto dec =
        decoder.forward(input, enc.coarse_tokens, enc.fine_tokens, maps_ptr);
    out.logits = dec.logits;
    out.features = dec.features;
    out.ce = cross_entropy_rows(dec.logits, out.targets);
    return out;
  }

  // Greedy decoding; returns emitted tokens in decoding order, stopping at
  // the end token or the maximum length. Run without an active tape.
  std::vector<int> decode_greedy(const Tensor<T>& img) const {
    auto enc = encoder(img);
    typename ShapePrior<T>::Encoded pe;
    if (cfg.sgm) pe = prior.encode(img);
    auto step = [&](const std::vector<int>& prefix) {
      Tensor<T> maps;
      const Tensor<T>* maps_ptr = nullptr;
      if (cfg.sgm) {
        maps = bias_maps(pe, prefix);
        maps_ptr = &maps;
      }
      auto dec = decoder.forward(prefix, enc.coarse_tokens, enc.fine_tokens,
                                 maps_ptr);
      return row(dec.logits, prefix.size() - 1).data();
    };
    return greedy_decode<T>(step, vocab.sos(), vocab.eos(), kMaxSeqLen);
  }
};

}  // namespace seqdet
