#pragma once

#include <string>

#include "seqdet/ops.hpp"
#include "seqdet/params.hpp"
#include "seqdet/tensor.hpp"

namespace seqdet {

template <typename T>
struct Linear {
  Tensor<T> w, b;
  bool has_bias = false;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in,
         std::size_t out, bool bias = true)
      : w(ps.add(name + ".w", {in, out}, Init::HeNormal, in)),
        has_bias(bias) {
    if (bias) b = ps.add(name + ".b", {out}, Init::Zeros);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, w);
    return has_bias ? add_row_bias(y, b) : y;
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim)
      : gamma(ps.add(name + ".g", {dim}, Init::Ones)),
        beta(ps.add(name + ".b", {dim}, Init::Zeros)) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return layer_norm(x, gamma, beta);
  }
};

template <typename T>
struct Conv3x3 {
  Tensor<T> w, b;
  bool has_bias = false;

  Conv3x3() = default;
  Conv3x3(ParamStore<T>& ps, const std::string& name, std::size_t in,
          std::size_t out, bool bias = true)
      : w(ps.add(name + ".w", {out, in, 3, 3}, Init::HeNormal, in * 9)),
        has_bias(bias) {
    if (bias) b = ps.add(name + ".b", {out}, Init::Zeros);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = conv2d_3x3(x, w);
    return has_bias ? add_channel_bias(y, b) : y;
  }
};

// Two-layer perceptron with ReLU, the shape used throughout the model.
template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, std::size_t in,
      std::size_t hidden, std::size_t out)
      : fc1(ps, name + ".fc1", in, hidden),
        fc2(ps, name + ".fc2", hidden, out) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return fc2(relu(fc1(x)));
  }
};

}  // namespace seqdet
