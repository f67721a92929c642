#pragma once

// Diagonal state-space kernels: zero-order-hold discretization, the
// discrete recurrence, its convolution-kernel form and the input-dependent
// (selective) scan used by the decoder.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lmdepth/autodiff.hpp"
#include "lmdepth/meter.hpp"

namespace lmdepth {

/// Continuous diagonal system h' = A h + B x, y = C h with timescale delta.
/// A is stored directly; production models build it as -exp(a_log).
template <class T>
struct SSMParams {
  std::vector<T> A;
  std::vector<T> B;
  std::vector<T> C;
  T delta{1};

  std::size_t state_dim() const { return A.size(); }

  static SSMParams from_log(std::span<const T> a_log, std::vector<T> B, std::vector<T> C, T delta) {
    SSMParams p;
    p.A.reserve(a_log.size());
    for (T v : a_log) p.A.push_back(-std::exp(v));
    p.B = std::move(B);
    p.C = std::move(C);
    p.delta = delta;
    return p;
  }

  bool stable() const {
    for (T a : A)
      if (!(a < T{0})) return false;
    return delta > T{0};
  }
};

template <class T>
struct DiscreteSSM {
  std::vector<T> A_bar;
  std::vector<T> B_bar;
  std::size_t state_dim() const { return A_bar.size(); }
};

// Below this |delta * a| the input factor switches to its series limit.
inline constexpr double kZohSeriesThreshold = 1e-8;

/// (exp(delta * a) - 1) / a: the ZOH factor with B_bar = factor * B.
template <class T>
T zoh_input_factor(T delta, T a) {
  const T z = delta * a;
  if (std::abs(z) < static_cast<T>(kZohSeriesThreshold)) return delta * (T{1} + z / T{2});
  return std::expm1(z) / a;
}

/// d/da of zoh_input_factor: delta^2 * (z e^z - (e^z - 1)) / z^2.
template <class T>
T zoh_input_factor_da(T delta, T a) {
  const T z = delta * a;
  T f;
  if (std::abs(z) < T(1e-2)) {
    f = T{1} / T{2} + z * (T{1} / T{3} + z * (T{1} / T{8} + z * (T{1} / T{30} + z / T{144})));
  } else {
    f = (z * std::exp(z) - std::expm1(z)) / (z * z);
  }
  return delta * delta * f;
}

template <class T>
DiscreteSSM<T> zoh_discretize(const SSMParams<T>& p) {
  if (!(p.delta > T{0})) throw ParameterError("zoh_discretize: delta must be > 0");
  if (p.B.size() != p.A.size()) {
    throw ShapeError("zoh_discretize: A has " + std::to_string(p.A.size()) + " states, B has " +
                     std::to_string(p.B.size()));
  }
  DiscreteSSM<T> d;
  d.A_bar.resize(p.A.size());
  d.B_bar.resize(p.A.size());
  for (std::size_t i = 0; i < p.A.size(); ++i) {
    d.A_bar[i] = std::exp(p.delta * p.A[i]);
    d.B_bar[i] = zoh_input_factor(p.delta, p.A[i]) * p.B[i];
  }
  return d;
}

namespace ssm_cost {
inline std::uint64_t recurrent(std::size_t M, std::size_t N) { return 3ull * M * N; }
inline std::uint64_t kernel(std::size_t M, std::size_t N) { return 2ull * M * N; }
inline std::uint64_t apply_kernel(std::size_t M) { return static_cast<std::uint64_t>(M) * (M + 1) / 2; }
// Per (token, channel, state): B_bar = phi * B, B_bar * x, A_bar * h, C * h.
inline std::uint64_t selective(std::size_t L, std::size_t D, std::size_t N) { return 4ull * L * D * N; }
}  // namespace ssm_cost

/// h_t = A_bar h_{t-1} + B_bar x_t, y_t = C . h_t for t = 1..M.
template <class T>
std::vector<T> scan_recurrent(const DiscreteSSM<T>& d, std::span<const T> C, std::span<const T> x,
                              std::span<const T> h0 = {}) {
  const std::size_t N = d.state_dim();
  if (C.size() != N || d.B_bar.size() != N || (!h0.empty() && h0.size() != N)) {
    throw ShapeError("scan_recurrent: state dimension mismatch");
  }
  std::vector<T> h(N, T{0});
  if (!h0.empty()) h.assign(h0.begin(), h0.end());
  std::vector<T> y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    T acc{0};
    for (std::size_t n = 0; n < N; ++n) {
      h[n] = d.A_bar[n] * h[n] + d.B_bar[n] * x[t];
      acc += C[n] * h[n];
    }
    y[t] = acc;
  }
  count_macs(ssm_cost::recurrent(x.size(), N));
  return y;
}

/// K_bar[j] = C . (A_bar^j B_bar), j = 0..M-1.
template <class T>
std::vector<T> kernel_convolutional(const DiscreteSSM<T>& d, std::span<const T> C, std::size_t M) {
  const std::size_t N = d.state_dim();
  if (M < 1) throw ParameterError("kernel_convolutional: M must be >= 1");
  if (C.size() != N) throw ShapeError("kernel_convolutional: state dimension mismatch");
  std::vector<T> p(d.B_bar.begin(), d.B_bar.end());
  std::vector<T> K(M);
  for (std::size_t j = 0; j < M; ++j) {
    T acc{0};
    for (std::size_t n = 0; n < N; ++n) {
      acc += C[n] * p[n];
      p[n] *= d.A_bar[n];
    }
    K[j] = acc;
  }
  count_macs(ssm_cost::kernel(M, N));
  return K;
}

/// Causal convolution y_t = sum_{j=0}^{t} K[j] x_{t-j}.
template <class T>
std::vector<T> apply_kernel(std::span<const T> x, std::span<const T> K) {
  if (K.size() < x.size()) throw ShapeError("apply_kernel: kernel shorter than the sequence");
  std::vector<T> y(x.size(), T{0});
  for (std::size_t t = 0; t < x.size(); ++t) {
    T acc{0};
    for (std::size_t j = 0; j <= t; ++j) acc += K[j] * x[t - j];
    y[t] = acc;
  }
  count_macs(ssm_cost::apply_kernel(x.size()));
  return y;
}

namespace ops {

/// Differentiable time-invariant recurrence. Shapes: a_bar, b_bar, c, h0: [N];
/// x: [M]. Returns y: [M].
template <class T>
Var<T> scan_recurrent(const Var<T>& a_bar, const Var<T>& b_bar, const Var<T>& c, const Var<T>& x,
                      const Var<T>& h0) {
  const std::size_t N = a_bar.size();
  if (b_bar.size() != N || c.size() != N || h0.size() != N) {
    throw ShapeError("scan_recurrent: state vectors must all have length " + std::to_string(N));
  }
  if (x.shape().size() != 1) throw ShapeError("scan_recurrent: x must be a sequence, got " + shape_str(x.shape()));
  const std::size_t M = x.size();
  std::vector<T> hs((M + 1) * N);
  std::copy(h0.data().begin(), h0.data().end(), hs.begin());
  Tensor<T> y(Shape{M});
  const auto A = a_bar.data();
  const auto B = b_bar.data();
  const auto Cv = c.data();
  const auto xv = x.data();
  for (std::size_t t = 0; t < M; ++t) {
    T acc{0};
    for (std::size_t n = 0; n < N; ++n) {
      const T h = A[n] * hs[t * N + n] + B[n] * xv[t];
      hs[(t + 1) * N + n] = h;
      acc += Cv[n] * h;
    }
    y[t] = acc;
  }
  count_macs(ssm_cost::recurrent(M, N));
  return lmdepth::detail::make_op<T>(
      std::move(y), {a_bar, b_bar, c, x, h0}, [hs = std::move(hs), M, N](lmdepth::detail::Node<T>& nd) {
        const auto& A = nd.input_value(0);
        const auto& B = nd.input_value(1);
        const auto& Cv = nd.input_value(2);
        const auto& xv = nd.input_value(3);
        T* gA = nd.input_grad(0);
        T* gB = nd.input_grad(1);
        T* gC = nd.input_grad(2);
        T* gx = nd.input_grad(3);
        T* gh0 = nd.input_grad(4);
        std::vector<T> gh(N, T{0});
        for (std::size_t t = M; t-- > 0;) {
          const T gy = nd.grad[t];
          T gxt{0};
          for (std::size_t n = 0; n < N; ++n) {
            const T h = hs[(t + 1) * N + n];
            const T hp = hs[t * N + n];
            gh[n] += gy * Cv[n];
            if (gC) gC[n] += gy * h;
            if (gA) gA[n] += gh[n] * hp;
            if (gB) gB[n] += gh[n] * xv[t];
            gxt += gh[n] * B[n];
            gh[n] *= A[n];
          }
          if (gx) gx[t] += gxt;
        }
        if (gh0)
          for (std::size_t n = 0; n < N; ++n) gh0[n] += gh[n];
      });
}

/// Input-dependent scan. x, delta: [L x D]; A: [D x N]; B, C: [L x N].
/// Per channel d and token t the system is discretized with delta[t, d]:
/// h_t = exp(delta A_d) h_{t-1} + zoh(delta, A_d) B_t x_{t,d}, y_{t,d} = C_t . h_t,
/// starting from h = 0 and scanning tokens in order.
template <class T>
Var<T> selective_scan(const Var<T>& x, const Var<T>& A, const Var<T>& delta, const Var<T>& B,
                      const Var<T>& C) {
  if (x.shape().size() != 2 || A.shape().size() != 2) {
    throw ShapeError("selective_scan: x must be L x D and A must be D x N");
  }
  const std::size_t L = x.shape()[0], D = x.shape()[1], N = A.shape()[1];
  if (A.shape()[0] != D || delta.shape() != x.shape() || B.shape() != Shape{L, N} ||
      C.shape() != Shape{L, N}) {
    throw ShapeError("selective_scan: inconsistent shapes x" + shape_str(x.shape()) + " A" +
                     shape_str(A.shape()) + " delta" + shape_str(delta.shape()) + " B" +
                     shape_str(B.shape()) + " C" + shape_str(C.shape()));
  }
  for (T v : delta.data()) {
    if (!(v > T{0})) throw ContractError("selective_scan: delta must be strictly positive");
  }
  const auto xv = x.data();
  const auto Av = A.data();
  const auto dv = delta.data();
  const auto Bv = B.data();
  const auto Cv = C.data();
  const std::size_t DN = D * N;
  std::vector<T> hs(L * DN), abar(L * DN), phi(L * DN);
  Tensor<T> y(Shape{L, D});
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      const T dt = dv[t * D + d];
      const T xt = xv[t * D + d];
      T acc{0};
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t k = t * DN + d * N + n;
        const T a = Av[d * N + n];
        const T ab = std::exp(dt * a);
        const T ph = zoh_input_factor(dt, a);
        const T hp = t ? hs[k - DN] : T{0};
        const T h = ab * hp + ph * Bv[t * N + n] * xt;
        hs[k] = h;
        abar[k] = ab;
        phi[k] = ph;
        acc += Cv[t * N + n] * h;
      }
      y[t * D + d] = acc;
    }
  }
  count_macs(ssm_cost::selective(L, D, N));
  return lmdepth::detail::make_op<T>(
      std::move(y), {x, A, delta, B, C},
      [hs = std::move(hs), abar = std::move(abar), phi = std::move(phi), L, D,
       N](lmdepth::detail::Node<T>& nd) {
        const auto& xv = nd.input_value(0);
        const auto& Av = nd.input_value(1);
        const auto& dv = nd.input_value(2);
        const auto& Bv = nd.input_value(3);
        const auto& Cv = nd.input_value(4);
        T* gx = nd.input_grad(0);
        T* gA = nd.input_grad(1);
        T* gd = nd.input_grad(2);
        T* gB = nd.input_grad(3);
        T* gC = nd.input_grad(4);
        const std::size_t DN = D * N;
        std::vector<T> gh(DN, T{0});
        for (std::size_t t = L; t-- > 0;) {
          for (std::size_t d = 0; d < D; ++d) {
            const T gy = nd.grad[t * D + d];
            const T dt = dv[t * D + d];
            const T xt = xv[t * D + d];
            T gxt{0}, gdt{0};
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t k = t * DN + d * N + n;
              const std::size_t s = d * N + n;
              const T a = Av[s];
              const T hp = t ? hs[k - DN] : T{0};
              const T b = Bv[t * N + n];
              T& g = gh[s];
              g += gy * Cv[t * N + n];
              if (gC) gC[t * N + n] += gy * hs[k];
              const T g_abar = g * hp;
              const T g_phi = g * b * xt;
              if (gB) gB[t * N + n] += g * phi[k] * xt;
              gxt += g * phi[k] * b;
              // d abar/d delta = abar * a, d phi/d delta = abar.
              gdt += g_abar * abar[k] * a + g_phi * abar[k];
              if (gA) gA[s] += g_abar * abar[k] * dt + g_phi * zoh_input_factor_da(dt, a);
              g *= abar[k];
            }
            if (gx) gx[t * D + d] += gxt;
            if (gd) gd[t * D + d] += gdt;
          }
        }
      });
}

}  // namespace ops
}  // namespace lmdepth
