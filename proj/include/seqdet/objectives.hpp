#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <vector>

#include "seqdet/ops.hpp"
#include "seqdet/seqops.hpp"
#include "seqdet/tensor.hpp"

namespace seqdet {

struct LossWeights {
  double lambda_rec = 0.1;
  double lambda_kld = 0.01;
  double lambda_smcl = 0.01;
  double tau = 0.1;
};

struct SmclStats {
  bool valid = false;        // any sample pair shared a class
  std::size_t pairs = 0;     // pairs contributing terms
  std::size_t anchors = 0;   // anchor positions across all pairs
};

// Contrastive loss over per-position decoder features of a batch.
//
// labels[i][p] is the manipulation class at position p of sample i, or a
// non-class id for padding/framing positions, which are ignored. For every
// unordered sample pair and every class c present in both samples, each of
// the two class-c positions anchors one term: the positive is the similarity
// of the two class-c features; each class d present in both samples but
// different from c contributes one denominator term combining the
// within-first, across, and within-second similarities. Per pair the terms
// are averaged over anchors; pairs sharing no class are skipped; the batch
// loss is the mean over contributing pairs. With no contributing pair the
// result is an untracked zero and the stats flag it.
template <typename T>
Tensor<T> smcl_loss(const std::vector<Tensor<T>>& feats,
                    const std::vector<std::vector<int>>& labels,
                    const Vocab& vocab, double tau,
                    SmclStats* stats = nullptr) {
  const std::size_t n = feats.size();
  if (n != labels.size())
    throw ContractError("feature/label count mismatch");

  // first position of each class per sample
  std::vector<std::map<int, std::size_t>> pos_of(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < labels[i].size(); ++p) {
      int c = labels[i][p];
      if (vocab.is_class(c) && !pos_of[i].count(c)) pos_of[i][c] = p;
    }

  // which sample pairs share classes (shared lists ascending)
  struct SharedPair {
    std::size_t i, j;
    std::vector<int> shared;
  };
  std::vector<SharedPair> pairs;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      std::vector<int> shared;
      for (const auto& [c, p] : pos_of[i])
        if (pos_of[j].count(c)) shared.push_back(c);
      if (!shared.empty()) pairs.push_back({i, j, std::move(shared)});
    }

  SmclStats st;
  st.pairs = pairs.size();
  for (const auto& pr : pairs) st.anchors += 2 * pr.shared.size();
  st.valid = st.pairs > 0;
  if (stats) *stats = st;
  if (!st.valid) return Tensor<T>::zeros({1});

  // Stack every referenced feature row once, normalize, and get all needed
  // similarities from a single Gram matrix instead of per-pair scalar chains.
  std::vector<std::map<int, std::size_t>> ridx(n);
  std::vector<Tensor<T>> rows_used;
  for (const auto& pr : pairs)
    for (std::size_t s : {pr.i, pr.j})
      for (int c : pr.shared)
        if (!ridx[s].count(c)) {
          ridx[s][c] = rows_used.size();
          rows_used.push_back(row(feats[s], pos_of[s][c]));
        }
  const std::size_t R = rows_used.size();
  auto S = stack_rows(rows_used);  // [R, d]
  // per-row norms via one matvec; the clamp guards zero rows
  auto ones_d = Tensor<T>::filled({S.dim(1), std::size_t(1)}, T(1));
  auto rnorm = clamp_min(sqrt(matmul(mul(S, S), ones_d)), 1e-12);  // [R,1]
  auto rinv = div(Tensor<T>::filled({R, std::size_t(1)}, T(1)), rnorm);
  auto N = scale_rows(S, rinv);
  auto G = matmul_nt(N, N);  // G[r][s] = cosine of rows r and s

  // flat index lists into G: one positive per anchor, one (within-first,
  // across, within-second) triple per anchor/other-class combination
  std::vector<std::size_t> pos_idx, idx1, idx2, idx3, seg;
  std::vector<T> wts;  // per-anchor weight 1 / anchors-in-its-pair
  for (const auto& pr : pairs) {
    const T w = T(1.0 / double(2 * pr.shared.size()));
    // anchor from each side in turn: (f, g) then (g, f)
    for (int side = 0; side < 2; ++side) {
      const auto& rf = side == 0 ? ridx[pr.i] : ridx[pr.j];
      const auto& rg = side == 0 ? ridx[pr.j] : ridx[pr.i];
      for (int c : pr.shared) {
        const std::size_t a = pos_idx.size();
        pos_idx.push_back(rf.at(c) * R + rg.at(c));
        for (int d : pr.shared) {
          if (d == c) continue;
          idx1.push_back(rf.at(c) * R + rf.at(d));
          idx2.push_back(rf.at(c) * R + rg.at(d));
          idx3.push_back(rg.at(c) * R + rg.at(d));
          seg.push_back(a);
        }
        wts.push_back(w);
      }
    }
  }
  const std::size_t P = pos_idx.size();

  auto posv = scale(take(G, std::move(pos_idx)), 1.0 / tau);  // [P]
  Tensor<T> trio;
  if (!idx1.empty())
    trio = scale(add(add(take(G, std::move(idx1)), take(G, std::move(idx2))),
                     take(G, std::move(idx3))),
                 1.0 / tau);

  // per-anchor max shift keeps the exponentials bounded; the shift is a
  // constant, so gradients pass through exactly
  std::vector<T> m(P);
  for (std::size_t a = 0; a < P; ++a) m[a] = posv.data()[a];
  if (trio.defined())
    for (std::size_t k = 0; k < seg.size(); ++k)
      m[seg[k]] = std::max(m[seg[k]], trio.data()[k]);
  auto mvec = Tensor<T>::zeros({P});
  std::copy(m.begin(), m.end(), mvec.mutable_data().begin());

  auto epos = exp(sub(posv, mvec));
  auto denom = epos;
  if (trio.defined()) {
    auto ment = Tensor<T>::zeros({seg.size()});
    for (std::size_t k = 0; k < seg.size(); ++k)
      ment.mutable_data()[k] = m[seg[k]];
    denom = add(epos, segment_sum(exp(sub(trio, ment)), std::move(seg), P));
  }
  // per anchor: log-sum-exp of (positive, triples) minus the positive
  auto terms = sub(add(log(denom), mvec), posv);
  auto wvec = Tensor<T>::zeros({P});
  std::copy(wts.begin(), wts.end(), wvec.mutable_data().begin());
  return scale(sum(mul(terms, wvec)), 1.0 / double(st.pairs));
}

// Weighted sum of the loss terms; undefined parts are simply absent.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& rec,
                     const Tensor<T>& kld, const Tensor<T>& smcl,
                     const LossWeights& w) {
  auto total = ce;
  if (rec.defined()) total = add(total, scale(rec, w.lambda_rec));
  if (kld.defined()) total = add(total, scale(kld, w.lambda_kld));
  if (smcl.defined()) total = add(total, scale(smcl, w.lambda_smcl));
  return total;
}

}  // namespace seqdet
