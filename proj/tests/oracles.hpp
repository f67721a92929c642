#pragma once

// Straightforward reference implementations. Deliberately loop-based and
// independent of the library kernels they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "lmdepth/tensor.hpp"

namespace oracle {

using lmdepth::Shape;
using lmdepth::Tensor;

inline Tensor<double> matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<double> c(Shape{M, N});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const std::vector<double>& bias,
                             std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), Cg = w.dim(1), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t Og = O / groups;
  (void)C;
  Tensor<double> y(Shape{O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double s = bias.empty() ? 0.0 : bias[o];
        for (std::size_t c = 0; c < Cg; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              const std::size_t ci = (o / Og) * Cg + c;
              s += w[((o * Cg + c) * k + ky) * k + kx] * x.at(ci, iy, ix);
            }
        y.at(o, oy, ox) = s;
      }
  return y;
}

/// Causal depthwise conv: left-pad k-1 zeros explicitly, then slide.
inline Tensor<double> conv1d_depthwise(const Tensor<double>& x, const Tensor<double>& w,
                                       const std::vector<double>& bias) {
  const std::size_t L = x.dim(0), D = x.dim(1), k = w.dim(1);
  Tensor<double> y(Shape{L, D});
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<double> padded(k - 1, 0.0);
    for (std::size_t t = 0; t < L; ++t) padded.push_back(x.at(t, d));
    for (std::size_t t = 0; t < L; ++t) {
      double s = bias.empty() ? 0.0 : bias[d];
      for (std::size_t j = 0; j < k; ++j) s += w.at(d, j) * padded[t + j];
      y.at(t, d) = s;
    }
  }
  return y;
}

/// Per-token selective scan with per-(channel, state) scalar recurrences.
inline Tensor<double> selective_scan(const Tensor<double>& x, const Tensor<double>& A, const Tensor<double>& delta,
                                     const Tensor<double>& B, const Tensor<double>& C) {
  const std::size_t L = x.dim(0), D = x.dim(1), N = A.dim(1);
  Tensor<double> y(Shape{L, D});
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t n = 0; n < N; ++n) {
      double h = 0.0;
      const double a = A.at(d, n);
      for (std::size_t t = 0; t < L; ++t) {
        const double dt = delta.at(t, d);
        const double abar = std::exp(dt * a);
        const double bbar = std::expm1(dt * a) / a * B.at(t, n);
        h = abar * h + bbar * x.at(t, d);
        y.at(t, d) += C.at(t, n) * h;
      }
    }
  }
  return y;
}

using hp = boost::multiprecision::cpp_bin_float_50;

/// (exp(delta a) - 1) / a in 50-digit arithmetic.
inline double zoh_factor_hp(double delta, double a) {
  const hp z = hp(delta) * hp(a);
  return static_cast<double>((exp(z) - 1) / hp(a));
}

/// d/da of the ZOH factor in 50-digit arithmetic.
inline double zoh_factor_da_hp(double delta, double a) {
  const hp d(delta), av(a);
  const hp e = exp(d * av);
  return static_cast<double>((d * e * av - (e - 1)) / (av * av));
}

struct Metrics {
  double rel = 0, rms = 0, log10 = 0, d1 = 0, d2 = 0, d3 = 0, sq_rel = 0, rmse_log = 0;
  std::size_t n = 0;
};

/// One pass per metric, in the order the definitions are written.
inline Metrics metrics(const std::vector<double>& pred, const std::vector<double>& gt) {
  Metrics m;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] > 0) idx.push_back(i);
  m.n = idx.size();
  const double n = static_cast<double>(m.n);
  double s = 0;
  for (auto i : idx) s += std::fabs(gt[i] - pred[i]) / gt[i];
  m.rel = s / n;
  s = 0;
  for (auto i : idx) s += (gt[i] - pred[i]) * (gt[i] - pred[i]);
  m.rms = std::sqrt(s / n);
  s = 0;
  for (auto i : idx) s += std::fabs(std::log10(gt[i]) - std::log10(pred[i]));
  m.log10 = s / n;
  std::size_t c1 = 0, c2 = 0, c3 = 0;
  for (auto i : idx) {
    const double r = pred[i] > gt[i] ? pred[i] / gt[i] : gt[i] / pred[i];
    c1 += r < 1.25;
    c2 += r < 1.25 * 1.25;
    c3 += r < 1.25 * 1.25 * 1.25;
  }
  m.d1 = c1 / n;
  m.d2 = c2 / n;
  m.d3 = c3 / n;
  s = 0;
  for (auto i : idx) s += (gt[i] - pred[i]) * (gt[i] - pred[i]) / gt[i];
  m.sq_rel = s / n;
  s = 0;
  for (auto i : idx) s += (std::log(gt[i]) - std::log(pred[i])) * (std::log(gt[i]) - std::log(pred[i]));
  m.rmse_log = std::sqrt(s / n);
  return m;
}

}  // namespace oracle
