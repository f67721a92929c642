#pragma once

// Parameter-owning layers. Conv and linear layers also carry the state of
// post-training quantization: range observers while calibrating, and the
// i8 weight plus boundary parameters once quantized.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lmdepth/ops.hpp"
#include "lmdepth/quant.hpp"

namespace lmdepth {

enum class ExecMode { float_path, calibrate, quantized };

struct QuantState {
  ExecMode mode = ExecMode::float_path;
  RangeObserver in_range;
  RangeObserver out_range;
  QuantParams in_qp;
  QuantParams out_qp;
  std::optional<QuantizedTensor> weight;
};

namespace init {

// Kaiming-uniform over fan-in with ReLU gain: U(-sqrt(6 / fan_in), +).
template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
}

// U(-1/sqrt(fan_in), +): the usual default for projections without ReLU.
template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace init

namespace detail {

template <class T>
std::vector<float> bias_as_f32(const Var<T>& bias) {
  if (!bias.defined()) return {};
  std::vector<float> out(bias.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(bias.data()[i]);
  return out;
}

// Shared forward driver for quantizable layers.
template <class T, class FloatFn, class QuantFn>
Var<T> run_quantizable(QuantState& q, const Var<T>& x, FloatFn&& float_fn, QuantFn&& quant_fn) {
  switch (q.mode) {
    case ExecMode::float_path:
      return float_fn(x);
    case ExecMode::calibrate: {
      q.in_range.observe(x.data());
      Var<T> y = float_fn(x);
      q.out_range.observe(y.data());
      return y;
    }
    case ExecMode::quantized: {
      if (!q.weight) throw ContractError("quantized layer has no i8 weight");
      const QuantizedTensor xq = quantize_tensor(x.value(), q.in_qp);
      return constant(dequantize<T>(quant_fn(xq)));
    }
  }
  return float_fn(x);
}

}  // namespace detail

/// y = x W + b with W stored [in x out].
template <class T>
struct Linear {
  Var<T> weight;
  Var<T> bias;
  QuantState quant;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
      : weight(Var<T>::parameter(init::fan_in_uniform<T>(Shape{in, out}, in, rng))) {
    if (with_bias) bias = Var<T>::parameter(Tensor<T>(Shape{out}));
  }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Var<T> operator()(const Var<T>& x) {
    return detail::run_quantizable(
        quant, x, [&](const Var<T>& v) { return ops::linear(v, weight, bias); },
        [&](const QuantizedTensor& xq) {
          const auto b = detail::bias_as_f32(bias);
          return quantized_linear(xq, *quant.weight, b, quant.out_qp);
        });
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".weight", weight, &quant);
    if (bias.defined()) v.param(prefix + ".bias", bias, nullptr);
  }
};

template <class T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  ops::Conv2dOptions options;
  QuantState quant;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t k, ops::Conv2dOptions opt, Rng& rng,
         bool with_bias = true, bool relu_gain = true)
      : options(opt) {
    const std::size_t cin_g = cin / opt.groups;
    const std::size_t fan_in = cin_g * k * k;
    Shape shape{cout, cin_g, k, k};
    weight = Var<T>::parameter(relu_gain ? init::kaiming_uniform<T>(shape, fan_in, rng)
                                         : init::fan_in_uniform<T>(shape, fan_in, rng));
    if (with_bias) bias = Var<T>::parameter(Tensor<T>(Shape{cout}));
  }

  std::size_t out_channels() const { return weight.shape()[0]; }

  Var<T> operator()(const Var<T>& x) {
    return detail::run_quantizable(
        quant, x, [&](const Var<T>& v) { return ops::conv2d(v, weight, bias, options); },
        [&](const QuantizedTensor& xq) {
          const auto b = detail::bias_as_f32(bias);
          return quantized_conv2d(xq, *quant.weight, b, options, quant.out_qp);
        });
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".weight", weight, &quant);
    if (bias.defined()) v.param(prefix + ".bias", bias, nullptr);
  }
};

/// Causal depthwise 1-D convolution over tokens, weights [D x k].
template <class T>
struct Conv1dDepthwise {
  Var<T> weight;
  Var<T> bias;
  QuantState quant;

  Conv1dDepthwise() = default;
  Conv1dDepthwise(std::size_t dim, std::size_t k, Rng& rng)
      : weight(Var<T>::parameter(init::fan_in_uniform<T>(Shape{dim, k}, k, rng))),
        bias(Var<T>::parameter(Tensor<T>(Shape{dim}))) {
    if (k < 1) throw ParameterError("conv1d kernel must be >= 1");
  }

  Var<T> operator()(const Var<T>& x) {
    return detail::run_quantizable(
        quant, x, [&](const Var<T>& v) { return ops::conv1d_depthwise(v, weight, bias); },
        [&](const QuantizedTensor& xq) {
          const auto b = detail::bias_as_f32(bias);
          return quantized_conv1d_depthwise(xq, *quant.weight, b, quant.out_qp);
        });
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".weight", weight, &quant);
    v.param(prefix + ".bias", bias, nullptr);
  }
};

inline constexpr double kNormEps = 1e-5;

template <class T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim)
      : gamma(Var<T>::parameter(Tensor<T>(Shape{dim}, T{1}))),
        beta(Var<T>::parameter(Tensor<T>(Shape{dim}))) {}

  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta, T(kNormEps)); }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".gamma", gamma, nullptr);
    v.param(prefix + ".beta", beta, nullptr);
  }
};

template <class T>
struct ChannelNorm {
  Var<T> gamma;
  Var<T> beta;

  ChannelNorm() = default;
  explicit ChannelNorm(std::size_t channels)
      : gamma(Var<T>::parameter(Tensor<T>(Shape{channels}, T{1}))),
        beta(Var<T>::parameter(Tensor<T>(Shape{channels}))) {}

  Var<T> operator()(const Var<T>& x) const { return ops::map_norm(x, gamma, beta, T(kNormEps)); }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".gamma", gamma, nullptr);
    v.param(prefix + ".beta", beta, nullptr);
  }
};

/// Visitor that counts parameters.
struct ParamCounter {
  std::size_t total = 0;
  template <class T>
  void param(const std::string&, Var<T>& p, QuantState*) {
    total += p.size();
  }
};

template <class Module>
std::size_t count_params(Module& m) {
  ParamCounter c;
  m.visit(c, "");
  return c.total;
}

}  // namespace lmdepth
