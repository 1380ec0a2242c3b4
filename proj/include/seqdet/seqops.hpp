#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "seqdet/common.hpp"

namespace seqdet {

// Label sequences hold up to five manipulation classes. The token ids are:
// 0 = no-manipulation padding, 1..C = classes, C+1 = start, C+2 = end.
inline constexpr std::size_t kMaxSeqLen = 5;

struct Vocab {
  std::size_t classes = 0;

  explicit Vocab(std::size_t n_classes = 0) : classes(n_classes) {}

  int nm() const { return 0; }
  int cls(std::size_t i) const {
    if (i >= classes) throw ContractError("class index out of range");
    return int(i) + 1;
  }
  int sos() const { return int(classes) + 1; }
  int eos() const { return int(classes) + 2; }
  std::size_t size() const { return classes + 3; }
  bool is_class(int tok) const { return tok >= 1 && tok <= int(classes); }
};

// ---------------------------------------------------------------------------
// padding

inline std::vector<int> pad_to_fixed(const std::vector<int>& real_tokens) {
  if (real_tokens.size() > kMaxSeqLen)
    throw ContractError("sequence longer than " + std::to_string(kMaxSeqLen));
  std::vector<int> out(kMaxSeqLen, 0);
  std::copy(real_tokens.begin(), real_tokens.end(), out.begin());
  return out;
}

// Real prefix of a padded view: tokens before the first padding slot.
inline std::vector<int> strip_padding(const std::vector<int>& padded) {
  std::vector<int> out;
  for (int t : padded) {
    if (t == 0) break;
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// order transforms

enum class OrderMode { Forward, Inverted, Mixed };

struct OrderSpec {
  OrderMode mode = OrderMode::Forward;
  // Mixed splits the real sequence: the first `keep` tokens stay in place,
  // the rest are reversed. keep + (kMaxSeqLen - keep) partitions the padded
  // length.
  std::size_t keep = 3;
};

inline std::vector<int> invert_tokens(const std::vector<int>& real_tokens) {
  std::vector<int> out(real_tokens.rbegin(), real_tokens.rend());
  return out;
}

inline std::vector<int> mixed_order_tokens(const std::vector<int>& real_tokens,
                                           std::size_t keep) {
  if (keep > kMaxSeqLen)
    throw ContractError("mixed split exceeds the padded length");
  std::vector<int> out = real_tokens;
  if (out.size() > keep) std::reverse(out.begin() + keep, out.end());
  return out;
}

// Forward-order real tokens -> training/decoding order.
inline std::vector<int> apply_order(const std::vector<int>& real_tokens,
                                    const OrderSpec& spec) {
  switch (spec.mode) {
    case OrderMode::Forward:
      return real_tokens;
    case OrderMode::Inverted:
      return invert_tokens(real_tokens);
    case OrderMode::Mixed:
      return mixed_order_tokens(real_tokens, spec.keep);
  }
  throw ContractError("unknown order mode");
}

// Training/decoding order -> forward order. Both transforms are involutions
// on the real token list, so the same function undoes them.
inline std::vector<int> to_forward_order(const std::vector<int>& real_tokens,
                                         const OrderSpec& spec) {
  return apply_order(real_tokens, spec);
}

// ---------------------------------------------------------------------------
// metrics

// Positional accuracy over the fixed padded length.
inline double facc_pair(const std::vector<int>& pred_real,
                        const std::vector<int>& gt_real) {
  auto p = pad_to_fixed(pred_real), g = pad_to_fixed(gt_real);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < kMaxSeqLen; ++i)
    if (p[i] == g[i]) ++hits;
  return double(hits) / double(kMaxSeqLen);
}

// Adaptive accuracy on variable-length sequences: exact match scores 1,
// otherwise the length of the longest common prefix over the longer length.
inline double aacc_pair(const std::vector<int>& pred_real,
                        const std::vector<int>& gt_real) {
  if (pred_real == gt_real) return 1.0;
  std::size_t lcp = 0;
  while (lcp < pred_real.size() && lcp < gt_real.size() &&
         pred_real[lcp] == gt_real[lcp])
    ++lcp;
  return double(lcp) /
         double(std::max(pred_real.size(), gt_real.size()));
}

// Exact-sequence variants: 1 only when the whole sequence matches.
inline double facc_exact_pair(const std::vector<int>& pred_real,
                              const std::vector<int>& gt_real) {
  return pad_to_fixed(pred_real) == pad_to_fixed(gt_real) ? 1.0 : 0.0;
}

namespace detail {
inline std::map<int, std::size_t> token_counts(const std::vector<int>& v) {
  std::map<int, std::size_t> m;
  for (int t : v) ++m[t];
  return m;
}

inline std::size_t count_overlap(const std::vector<int>& a,
                                 const std::vector<int>& b) {
  auto ca = token_counts(a), cb = token_counts(b);
  std::size_t n = 0;
  for (const auto& [tok, cnt] : ca) {
    auto it = cb.find(tok);
    if (it != cb.end()) n += std::min(cnt, it->second);
  }
  return n;
}
}  // namespace detail

// Order-insensitive positional accuracy: the best positional match over all
// reorderings, i.e. the padded-view token overlap counted with multiplicity.
inline double facc_unordered_pair(const std::vector<int>& pred_real,
                                  const std::vector<int>& gt_real) {
  auto p = pad_to_fixed(pred_real), g = pad_to_fixed(gt_real);
  return double(detail::count_overlap(p, g)) / double(kMaxSeqLen);
}

// Order-insensitive adaptive accuracy: equal-as-multisets scores 1,
// otherwise the token overlap over the longer length.
inline double aacc_unordered_pair(const std::vector<int>& pred_real,
                                  const std::vector<int>& gt_real) {
  if (pred_real.size() == gt_real.size() &&
      detail::token_counts(pred_real) == detail::token_counts(gt_real))
    return 1.0;
  if (pred_real.empty() && gt_real.empty()) return 1.0;
  return double(detail::count_overlap(pred_real, gt_real)) /
         double(std::max(pred_real.size(), gt_real.size()));
}

struct MetricReport {
  double facc = 0.0, aacc = 0.0;
  std::size_t samples = 0;
};

// Dataset-level scores; predictions and ground truth in forward order.
inline MetricReport score_dataset(
    const std::vector<std::vector<int>>& preds,
    const std::vector<std::vector<int>>& gts, bool order_agnostic = false,
    bool exact_match = false) {
  if (preds.size() != gts.size())
    throw ContractError("prediction/annotation count mismatch");
  MetricReport rep;
  rep.samples = preds.size();
  if (preds.empty()) return rep;
  double fa = 0.0, aa = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (exact_match) {
      double e = order_agnostic
                     ? (aacc_unordered_pair(preds[i], gts[i]) == 1.0 ? 1.0
                                                                     : 0.0)
                     : facc_exact_pair(preds[i], gts[i]);
      fa += e;
      aa += e;
    } else if (order_agnostic) {
      fa += facc_unordered_pair(preds[i], gts[i]);
      aa += aacc_unordered_pair(preds[i], gts[i]);
    } else {
      fa += facc_pair(preds[i], gts[i]);
      aa += aacc_pair(preds[i], gts[i]);
    }
  }
  rep.facc = fa / double(rep.samples);
  rep.aacc = aa / double(rep.samples);
  return rep;
}

// ---------------------------------------------------------------------------
// teacher-forcing views

// Supervision targets, length kMaxSeqLen+1: the order-transformed real
// tokens, then the end token, then no-manipulation padding. Every position
// is supervised, so the model learns both when to stop and how to pad.
inline std::vector<int> decoder_targets(const std::vector<int>& ordered_real,
                                        const Vocab& vocab) {
  if (ordered_real.size() > kMaxSeqLen)
    throw ContractError("sequence longer than " + std::to_string(kMaxSeqLen));
  std::vector<int> out(kMaxSeqLen + 1, vocab.nm());
  std::copy(ordered_real.begin(), ordered_real.end(), out.begin());
  out[ordered_real.size()] = vocab.eos();
  return out;
}

// Decoder input: the target stream shifted right by one, start token first.
inline std::vector<int> decoder_input(const std::vector<int>& ordered_real,
                                      const Vocab& vocab) {
  auto tgt = decoder_targets(ordered_real, vocab);
  std::vector<int> in(kMaxSeqLen + 1);
  in[0] = vocab.sos();
  std::copy(tgt.begin(), tgt.end() - 1, in.begin() + 1);
  return in;
}

}  // namespace seqdet
