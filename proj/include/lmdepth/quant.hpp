#pragma once

// Per-tensor affine INT8 quantization and the integer kernels used by the
// quantized inference path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lmdepth/ops.hpp"
#include "lmdepth/tensor.hpp"

namespace lmdepth {

inline constexpr double kMinQuantScale = 1e-8;
inline constexpr std::size_t kMaxQuantizedDot = std::size_t{1} << 15;

struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

struct QuantizedTensor {
  Shape shape;
  std::vector<std::int8_t> data;
  QuantParams qp;

  std::size_t size() const { return data.size(); }
  static constexpr DType dtype() { return DType::i8; }
};

/// Asymmetric parameters covering [lo, hi] widened to contain 0:
/// scale = (hi - lo) / 255, zero_point = round(-128 - lo / scale) clamped to
/// the i8 range. Keeping 0 inside makes zero padding exact and stops the zero
/// point from saturating on one-signed ranges.
inline QuantParams qparams_from_range(double lo, double hi) {
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  QuantParams qp;
  qp.scale = std::max((hi - lo) / 255.0, kMinQuantScale);
  const double zp = std::round(-128.0 - lo / qp.scale);
  qp.zero_point = static_cast<std::int32_t>(std::clamp(zp, -128.0, 127.0));
  return qp;
}

/// Symmetric parameters (zero_point = 0) for weights.
inline QuantParams symmetric_qparams(double absmax) {
  return QuantParams{std::max(absmax / 127.0, kMinQuantScale), 0};
}

inline std::int8_t quantize_value(double x, const QuantParams& qp) {
  const double q = std::round(x / qp.scale) + qp.zero_point;
  return static_cast<std::int8_t>(std::clamp(q, -128.0, 127.0));
}

inline double dequantize_value(std::int8_t q, const QuantParams& qp) {
  return (static_cast<double>(q) - qp.zero_point) * qp.scale;
}

template <class T>
QuantizedTensor quantize_tensor(const Tensor<T>& x, const QuantParams& qp) {
  QuantizedTensor q{x.shape(), std::vector<std::int8_t>(x.size()), qp};
  for (std::size_t i = 0; i < x.size(); ++i) q.data[i] = quantize_value(static_cast<double>(x[i]), qp);
  return q;
}

template <class T = float>
Tensor<T> dequantize(const QuantizedTensor& q) {
  Tensor<T> out(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = static_cast<T>(dequantize_value(q.data[i], q.qp));
  return out;
}

/// Running min/max of the values seen at one layer boundary.
struct RangeObserver {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  bool empty() const { return lo > hi; }

  template <class T>
  void observe(std::span<T> values) {
    for (T v : values) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  }

  QuantParams qparams() const {
    if (empty()) throw ParameterError("calibration observed no activations");
    return qparams_from_range(lo, hi);
  }
};

namespace detail {

// Final rescale: q = round(acc * s_x s_w / s_out + bias / s_out) + zp_out.
inline std::int8_t requantize(std::int32_t acc, double multiplier, double bias_term, std::int32_t zp_out) {
  const double q = std::round(static_cast<double>(acc) * multiplier + bias_term) + zp_out;
  return static_cast<std::int8_t>(std::clamp(q, -128.0, 127.0));
}

inline void check_dot_length(std::size_t K, const char* op) {
  if (K > kMaxQuantizedDot) {
    throw ContractError(std::string(op) + ": reduction length " + std::to_string(K) +
                        " exceeds the int32 accumulator bound 2^15");
  }
}

inline std::vector<double> bias_terms(std::span<const float> bias, std::size_t n, const QuantParams& out_qp,
                                      const char* op) {
  std::vector<double> terms(n, 0.0);
  if (!bias.empty()) {
    if (bias.size() != n) throw ShapeError(std::string(op) + ": bias length mismatch");
    for (std::size_t i = 0; i < n; ++i) terms[i] = static_cast<double>(bias[i]) / out_qp.scale;
  }
  return terms;
}

}  // namespace detail

/// Integer linear layer: x[L x K] (i8, affine) times w[K x N] (i8), 32-bit
/// accumulation of (x - zp_x)(w - zp_w), rescaled into out_qp. bias may be empty.
inline QuantizedTensor quantized_linear(const QuantizedTensor& x, const QuantizedTensor& w,
                                        std::span<const float> bias, const QuantParams& out_qp) {
  if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[0]) {
    throw ShapeError("quantized_linear: dimension error " + shape_str(x.shape) + " * " + shape_str(w.shape));
  }
  const std::size_t L = x.shape[0], K = x.shape[1], N = w.shape[1];
  detail::check_dot_length(K, "quantized_linear");
  const auto bias_term = detail::bias_terms(bias, N, out_qp, "quantized_linear");
  const double multiplier = x.qp.scale * w.qp.scale / out_qp.scale;
  std::vector<std::int32_t> wc(K * N);
  for (std::size_t i = 0; i < K * N; ++i) wc[i] = static_cast<std::int32_t>(w.data[i]) - w.qp.zero_point;
  QuantizedTensor out{Shape{L, N}, std::vector<std::int8_t>(L * N), out_qp};
  std::vector<std::int32_t> acc(N);
  for (std::size_t i = 0; i < L; ++i) {
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t k = 0; k < K; ++k) {
      const std::int32_t xv = static_cast<std::int32_t>(x.data[i * K + k]) - x.qp.zero_point;
      if (xv == 0) continue;
      const std::int32_t* wr = wc.data() + k * N;
      for (std::size_t j = 0; j < N; ++j) acc[j] += xv * wr[j];
    }
    for (std::size_t j = 0; j < N; ++j)
      out.data[i * N + j] = detail::requantize(acc[j], multiplier, bias_term[j], out_qp.zero_point);
  }
  return out;
}

/// Integer counterpart of ops::conv2d. Padding contributes exact zeros.
inline QuantizedTensor quantized_conv2d(const QuantizedTensor& x, const QuantizedTensor& w,
                                        std::span<const float> bias, ops::Conv2dOptions opt,
                                        const QuantParams& out_qp) {
  const auto g = ops::detail::conv_geometry(x.shape, w.shape, opt);
  const std::size_t rows = g.cin_g() * g.k * g.k, npix = g.ho * g.wo;
  detail::check_dot_length(rows, "quantized_conv2d");
  const auto bias_term = detail::bias_terms(bias, g.cout, out_qp, "quantized_conv2d");
  const double multiplier = x.qp.scale * w.qp.scale / out_qp.scale;

  std::vector<std::int32_t> xc(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xc[i] = static_cast<std::int32_t>(x.data[i]) - x.qp.zero_point;
  std::vector<std::int32_t> wc(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) wc[i] = static_cast<std::int32_t>(w.data[i]) - w.qp.zero_point;

  std::vector<std::int32_t> acc(g.cout * npix, 0);
  if (g.depthwise()) {
    ops::detail::depthwise_forward(g, xc.data(), wc.data(), acc.data());
  } else {
    std::vector<std::int32_t> col;
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      ops::detail::im2col(g, xc.data(), grp, col);
      linalg::gemm_nn(g.cout_g(), npix, rows, wc.data() + grp * g.cout_g() * rows, col.data(),
                      acc.data() + grp * g.cout_g() * npix);
    }
  }
  QuantizedTensor out{Shape{g.cout, g.ho, g.wo}, std::vector<std::int8_t>(g.cout * npix), out_qp};
  for (std::size_t c = 0; c < g.cout; ++c)
    for (std::size_t p = 0; p < npix; ++p)
      out.data[c * npix + p] =
          detail::requantize(acc[c * npix + p], multiplier, bias_term[c], out_qp.zero_point);
  return out;
}

/// Integer counterpart of ops::conv1d_depthwise (causal, x[L x D], w[D x k]).
inline QuantizedTensor quantized_conv1d_depthwise(const QuantizedTensor& x, const QuantizedTensor& w,
                                                  std::span<const float> bias, const QuantParams& out_qp) {
  if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[0]) {
    throw ShapeError("quantized_conv1d_depthwise: input " + shape_str(x.shape) + " vs kernel " +
                     shape_str(w.shape));
  }
  const std::size_t L = x.shape[0], D = x.shape[1], k = w.shape[1];
  const auto bias_term = detail::bias_terms(bias, D, out_qp, "quantized_conv1d_depthwise");
  const double multiplier = x.qp.scale * w.qp.scale / out_qp.scale;
  QuantizedTensor out{Shape{L, D}, std::vector<std::int8_t>(L * D), out_qp};
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      std::int32_t acc = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(k - 1);
        if (src < 0) continue;
        acc += (static_cast<std::int32_t>(w.data[d * k + j]) - w.qp.zero_point) *
               (static_cast<std::int32_t>(x.data[src * D + d]) - x.qp.zero_point);
      }
      out.data[t * D + d] = detail::requantize(acc, multiplier, bias_term[d], out_qp.zero_point);
    }
  }
  return out;
}

}  // namespace lmdepth
