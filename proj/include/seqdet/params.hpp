#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "seqdet/common.hpp"
#include "seqdet/rng.hpp"
#include "seqdet/tensor.hpp"

namespace seqdet {

enum class Init {
  Zeros,
  Ones,
  Normal002,  // N(0, 0.02^2), embeddings and positional tables
  HeNormal,   // N(0, sqrt(2/fan_in)^2)
};

// Owns every trainable tensor of a model. Each parameter is initialized from
// an RNG stream derived from (global seed, parameter name), so a parameter
// shared between two model configurations starts with identical values even
// when the configurations disagree about which other parameters exist.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

  Tensor<T> add(const std::string& name, Shape shape, Init kind,
                std::size_t fan_in = 0) {
    if (index_.count(name))
      throw ContractError("duplicate parameter name '" + name + "'");
    Tensor<T> t;
    switch (kind) {
      case Init::Zeros:
        t = Tensor<T>::zeros(std::move(shape));
        break;
      case Init::Ones:
        t = Tensor<T>::filled(std::move(shape), T(1));
        break;
      case Init::Normal002: {
        Rng rng(mix64(seed_, hash64(name)));
        t = Tensor<T>::randn(std::move(shape), rng, 0.02);
        break;
      }
      case Init::HeNormal: {
        if (fan_in == 0)
          throw ContractError("HeNormal init needs fan_in for '" + name + "'");
        Rng rng(mix64(seed_, hash64(name)));
        t = Tensor<T>::randn(std::move(shape), rng,
                             std::sqrt(2.0 / double(fan_in)));
        break;
      }
    }
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ContractError("unknown parameter '" + name + "'");
    return items_[it->second].second;
  }

  // Insertion order; stable across runs of the same configuration.
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const {
    return items_;
  }

  std::size_t count() const { return items_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace seqdet
