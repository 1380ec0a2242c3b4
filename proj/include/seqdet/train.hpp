#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "seqdet/checkpoint.hpp"
#include "seqdet/model.hpp"
#include "seqdet/objectives.hpp"
#include "seqdet/optim.hpp"
#include "seqdet/synthetic.hpp"

namespace seqdet {

// ==================== greedy evaluation ====================

struct Prediction {
  std::string id;
  std::vector<int> pred;  // forward-order class tokens
  std::vector<int> gt;    // forward-order class tokens
};

// Greedy-decodes every item and converts predictions back to forward order.
// Non-class emissions (possible early in training) are dropped.
template <typename T>
std::vector<Prediction> predict_split(const Model<T>& model, const Dataset& ds,
                                      const std::vector<Dataset::Item>& items) {
  std::vector<Prediction> out;
  out.reserve(items.size());
  for (const auto& item : items) {
    auto emitted = model.decode_greedy(ds.image<T>(item));
    std::vector<int> pred;
    for (int t : emitted)
      if (model.vocab.is_class(t)) pred.push_back(t);
    out.push_back(
        {item.id, to_forward_order(pred, model.cfg.order_spec()), item.tokens});
  }
  return out;
}

inline MetricReport score_predictions(const std::vector<Prediction>& preds,
                                      bool order_agnostic, bool exact_match) {
  std::vector<std::vector<int>> p, g;
  for (const auto& pr : preds) {
    p.push_back(pr.pred);
    g.push_back(pr.gt);
  }
  return score_dataset(p, g, order_agnostic, exact_match);
}

// ==================== trainer ====================

struct EpochStats {
  double ce = 0, rec = 0, kld = 0, smcl = 0;
  double val_facc = 0, val_aacc = 0;
};

// Mini-batch gradient descent over a dataset split. With threads > 1 the
// batch is sharded across per-thread model replicas that share weights; the
// contrastive term then only pairs samples within a shard and gradient
// reduction order differs from the single-thread path, so multi-threaded
// runs trade bit-reproducibility for speed.
template <typename T>
class Trainer {
 public:
  explicit Trainer(const ModelConfig& config)
      : cfg_(config), model_(config), opt_(model_.ps, config.lr_cnn,
                                           config.lr_transformer,
                                           config.weight_decay) {
    for (std::size_t w = 1; w < cfg_.threads; ++w)
      replicas_.push_back(std::make_unique<Model<T>>(cfg_));
  }

  Model<T>& model() { return model_; }
  const ModelConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }
  std::uint64_t epochs_done() const { return epochs_done_; }
  const std::vector<std::string>& metric_lines() const { return lines_; }

  // Full training run; returns one metrics line per epoch.
  const std::vector<std::string>& fit(const Dataset& ds,
                                      std::ostream* log = nullptr) {
    const auto& items = ds.train;
    if (items.empty()) throw ContractError("empty training split");
    const std::size_t n = items.size();
    const std::uint64_t steps_per_epoch =
        (n + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::uint64_t warmup_steps = cfg_.warmup_epochs * steps_per_epoch;

    for (std::uint64_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      auto order = shuffled_indices(n, epoch);
      Rng noise_rng(mix64(mix64(cfg_.seed, 0x65707344726177ull), epoch));
      EpochStats st;
      double smcl_batches = 0;
      for (std::size_t b0 = 0; b0 < n; b0 += cfg_.batch_size) {
        std::size_t b1 = std::min(n, b0 + cfg_.batch_size);
        std::vector<const Dataset::Item*> batch;
        for (std::size_t k = b0; k < b1; ++k)
          batch.push_back(&items[order[k]]);
        auto bs = train_batch(ds, batch, noise_rng);
        double scale = lr_schedule_scale(step_, warmup_steps, epoch,
                                         cfg_.decay_every, cfg_.decay_factor);
        opt_.step(scale);
        sync_replicas();
        ++step_;
        st.ce += bs.ce;
        st.rec += bs.rec;
        st.kld += bs.kld;
        if (bs.smcl_scored) {
          st.smcl += bs.smcl;
          smcl_batches += 1;
        }
      }
      st.ce /= double(n);
      st.rec /= double(n);
      st.kld /= double(n);
      if (smcl_batches > 0) st.smcl /= smcl_batches;

      if (!ds.val.empty()) {
        auto rep = score_predictions(predict_split(model_, ds, ds.val),
                                     /*order_agnostic=*/false,
                                     /*exact_match=*/false);
        st.val_facc = rep.facc;
        st.val_aacc = rep.aacc;
      }
      ++epochs_done_;

      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "epoch=%llu step=%llu ce=%.6f rec=%.6f kld=%.6f "
                    "smcl=%.6f val_facc=%.6f val_aacc=%.6f",
                    (unsigned long long)epochs_done_,
                    (unsigned long long)step_, st.ce, st.rec, st.kld, st.smcl,
                    st.val_facc, st.val_aacc);
      lines_.emplace_back(buf);
      if (log) *log << buf << "\n" << std::flush;
      last_stats_ = st;
    }
    return lines_;
  }

  const EpochStats& last_stats() const { return last_stats_; }

  void save(const std::filesystem::path& path) const {
    CheckpointMeta meta;
    meta.config = cfg_;
    meta.step = step_;
    meta.epoch = epochs_done_;
    meta.metric_lines = lines_;
    save_checkpoint(path, meta, model_.ps);
  }

 private:
  struct BatchStats {
    double ce = 0, rec = 0, kld = 0;  // per-batch sums over samples
    double smcl = 0;
    bool smcl_scored = false;
  };

  std::vector<std::size_t> shuffled_indices(std::size_t n,
                                            std::uint64_t epoch) const {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix64(mix64(cfg_.seed, 0x7368756666ull), epoch));
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    return order;
  }

  // One worker's shard: forward every sample under one tape, combine the
  // terms at 1/total weight, run backward. Gradients land in m's store.
  void worker_pass(const Model<T>& m, const Dataset& ds,
                   const std::vector<const Dataset::Item*>& batch,
                   const std::vector<std::vector<int>>& ordered,
                   const std::vector<Tensor<T>>& eps, std::size_t lo,
                   std::size_t hi, std::size_t total, BatchStats* out) const {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> ce_sum, rec_sum, kld_sum;
    std::vector<Tensor<T>> feats;
    std::vector<std::vector<int>> labels;
    for (std::size_t k = lo; k < hi; ++k) {
      auto img = ds.image<T>(*batch[k]);
      auto fw =
          m.teacher_forward(img, ordered[k], cfg_.sgm ? &eps[k] : nullptr);
      ce_sum = ce_sum.defined() ? add(ce_sum, fw.ce) : fw.ce;
      if (fw.rec.defined())
        rec_sum = rec_sum.defined() ? add(rec_sum, fw.rec) : fw.rec;
      if (fw.kld.defined())
        kld_sum = kld_sum.defined() ? add(kld_sum, fw.kld) : fw.kld;
      if (cfg_.smcl) {
        feats.push_back(fw.features);
        labels.push_back(fw.targets);
      }
    }

    const double inv_total = 1.0 / double(total);
    auto loss = scale(ce_sum, T(inv_total));
    out->ce = double(ce_sum.item());
    if (rec_sum.defined()) {
      loss = add(loss, scale(rec_sum, T(cfg_.lambda_rec * inv_total)));
      out->rec = double(rec_sum.item());
    }
    if (kld_sum.defined()) {
      loss = add(loss, scale(kld_sum, T(cfg_.lambda_kld * inv_total)));
      out->kld = double(kld_sum.item());
    }
    if (cfg_.smcl && feats.size() >= 2) {
      SmclStats sst;
      auto sm = smcl_loss(feats, labels, m.vocab, cfg_.tau, &sst);
      if (sst.valid) {
        double w = double(hi - lo) * inv_total;
        loss = add(loss, scale(sm, T(cfg_.lambda_smcl * w)));
        out->smcl = double(sm.item()) * w;
        out->smcl_scored = true;
      }
    }
    tape.backward(loss);
  }

  BatchStats train_batch(const Dataset& ds,
                         const std::vector<const Dataset::Item*>& batch,
                         Rng& noise_rng) {
    const std::size_t total = batch.size();
    std::vector<std::vector<int>> ordered(total);
    std::vector<Tensor<T>> eps(total);
    for (std::size_t i = 0; i < total; ++i) {
      ordered[i] = apply_order(batch[i]->tokens, cfg_.order_spec());
      if (cfg_.sgm) {
        eps[i] = Tensor<T>::zeros({1, model_.latent_dim()});
        for (auto& v : eps[i].mutable_data()) v = T(noise_rng.normal());
      }
    }

    model_.ps.zero_grads();
    for (auto& r : replicas_) r->ps.zero_grads();

    const std::size_t workers =
        std::max<std::size_t>(1, std::min<std::size_t>(cfg_.threads, total));
    BatchStats stats;
    if (workers == 1) {
      worker_pass(model_, ds, batch, ordered, eps, 0, total, total, &stats);
    } else {
      const std::size_t per = (total + workers - 1) / workers;
      std::vector<BatchStats> parts(workers);
      std::vector<std::thread> pool;
      for (std::size_t w = 1; w < workers; ++w) {
        std::size_t lo = w * per, hi = std::min(total, lo + per);
        if (lo >= hi) continue;
        pool.emplace_back([&, w, lo, hi] {
          worker_pass(*replicas_[w - 1], ds, batch, ordered, eps, lo, hi,
                      total, &parts[w]);
        });
      }
      worker_pass(model_, ds, batch, ordered, eps, 0, std::min(total, per),
                  total, &parts[0]);
      for (auto& t : pool) t.join();
      for (const auto& p : parts) {
        stats.ce += p.ce;
        stats.rec += p.rec;
        stats.kld += p.kld;
        if (p.smcl_scored) {
          stats.smcl += p.smcl;
          stats.smcl_scored = true;
        }
      }
      reduce_replica_grads();
    }
    return stats;
  }

  void reduce_replica_grads() {
    for (auto& [name, main] : model_.ps.items()) {
      auto mn = main.node();
      for (auto& r : replicas_) {
        const auto& rp = r->ps.get(name);
        if (!rp.has_grad()) continue;
        mn->ensure_grad();
        const auto& g = rp.grad();
        for (std::size_t i = 0; i < g.size(); ++i) mn->grad[i] += g[i];
      }
    }
  }

  void sync_replicas() {
    if (replicas_.empty()) return;
    for (auto& [name, main] : model_.ps.items())
      for (auto& r : replicas_)
        r->ps.get(name).mutable_data() = main.data();
  }

  ModelConfig cfg_;
  Model<T> model_;
  AdamW<T> opt_;
  std::vector<std::unique_ptr<Model<T>>> replicas_;
  std::uint64_t step_ = 0;
  std::uint64_t epochs_done_ = 0;
  std::vector<std::string> lines_;
  EpochStats last_stats_;
};

}  // namespace seqdet
