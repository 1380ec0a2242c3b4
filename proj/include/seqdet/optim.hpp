#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "seqdet/common.hpp"
#include "seqdet/config.hpp"
#include "seqdet/params.hpp"

namespace seqdet {

// Decoupled-weight-decay Adam over a ParamStore. Convolutional parts (the
// image stem and the shape-prior convnet) get their own base rate; everything
// else uses the transformer rate. Moments are kept in double so the update is
// reproducible regardless of the working precision T.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& ps, double lr_cnn, double lr_transformer,
        double weight_decay)
      : ps_(ps), weight_decay_(weight_decay) {
    for (auto& [name, tensor] : ps_.items()) {
      Slot s;
      s.name = name;
      s.base_lr = is_cnn_param(name) ? lr_cnn : lr_transformer;
      s.m.assign(tensor.numel(), 0.0);
      s.v.assign(tensor.numel(), 0.0);
      slots_.push_back(std::move(s));
    }
  }

  static bool is_cnn_param(const std::string& name) {
    return name.rfind("enc.stem", 0) == 0 || name.rfind("vae.", 0) == 0;
  }

  // lr_scale multiplies each slot's base rate (warmup / decay schedule).
  void step(double lr_scale) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, double(t_));
    const double bc2 = 1.0 - std::pow(b2, double(t_));
    for (auto& s : slots_) {
      auto p = ps_.get(s.name);  // handle shares the stored node
      if (!p.has_grad()) continue;
      const double lr = s.base_lr * lr_scale;
      auto& w = p.mutable_data();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        double gi = double(g[i]);
        s.m[i] = b1 * s.m[i] + (1 - b1) * gi;
        s.v[i] = b2 * s.v[i] + (1 - b2) * gi * gi;
        double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
        double wi = double(w[i]);
        wi -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay_ * wi);
        w[i] = T(wi);
      }
    }
  }

  std::uint64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::string name;
    double base_lr = 0;
    std::vector<double> m, v;
  };
  ParamStore<T>& ps_;
  double weight_decay_;
  std::uint64_t t_ = 0;
  std::vector<Slot> slots_;
};

// Linear warmup over the first warmup_steps updates, then stair-step decay by
// decay_factor each time decay_every epochs complete.
inline double lr_schedule_scale(std::uint64_t step, std::uint64_t warmup_steps,
                                std::uint64_t epoch, std::uint64_t decay_every,
                                double decay_factor) {
  double scale = 1.0;
  if (warmup_steps > 0 && step < warmup_steps)
    scale = double(step + 1) / double(warmup_steps);
  if (decay_every > 0)
    scale *= std::pow(decay_factor, double(epoch / decay_every));
  return scale;
}

}  // namespace seqdet
