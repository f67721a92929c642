#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lmdepth/autodiff.hpp"
#include "lmdepth/meter.hpp"

namespace lmdepth {

namespace linalg {

// C[M x N] += A[M x K] * B[K x N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
             const T* __restrict B, T* __restrict C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T{0}) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M x N] += A^T * B, with A stored [K x M].
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
             const T* __restrict B, T* __restrict C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T{0}) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M x N] += A * B^T, with B stored [N x K].
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
             const T* __restrict B, T* __restrict C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc{0};
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] += acc;
    }
  }
}

}  // namespace linalg

namespace ops {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
T softplus(T x) {
  return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
}

// Elementwise map with derivative dy/dx = df(x, y).
template <class T, class F, class DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return lmdepth::detail::make_op<T>(std::move(out), {x}, [df](lmdepth::detail::Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    const auto& xv = n.input_value(0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] * df(xv[i], n.value[i]);
  });
}

}  // namespace detail

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> silu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v * detail::sigmoid(v); },
      [](T v, T) {
        const T s = detail::sigmoid(v);
        return s * (T{1} + v * (T{1} - s));
      });
}

template <class T>
Var<T> relu6(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::clamp(v, T{0}, T{6}); },
      [](T v, T) { return (v > T{0} && v < T{6}) ? T{1} : T{0}; });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& x) {
  for (T v : x.data()) {
    if (!(v > T{0})) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::softplus(v); }, [](T v, T) { return detail::sigmoid(v); });
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return lmdepth::detail::make_op<T>(std::move(out), {a, b}, [](lmdepth::detail::Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* g = n.input_grad(k)) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
      }
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return lmdepth::detail::make_op<T>(std::move(out), {a, b}, [](lmdepth::detail::Node<T>& n) {
    if (T* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (T* g = n.input_grad(1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return lmdepth::detail::make_op<T>(std::move(out), {a, b}, [](lmdepth::detail::Node<T>& n) {
    const auto& av = n.input_value(0);
    const auto& bv = n.input_value(1);
    if (T* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (T* g = n.input_grad(1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  return lmdepth::detail::make_op<T>(Tensor<T>::scalar(acc), {x}, [](lmdepth::detail::Node<T>& n) {
    if (T* g = n.input_grad(0)) {
      const T go = n.grad[0];
      for (std::size_t i = 0; i < n.input_value(0).size(); ++i) g[i] += go;
    }
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return lmdepth::detail::make_op<T>(std::move(out), {x}, [](lmdepth::detail::Node<T>& n) {
    if (T* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <class T>
Var<T> transpose2d(const Var<T>& x) {
  detail::require(x.shape().size() == 2, "transpose2d expects a matrix, got " + shape_str(x.shape()));
  const std::size_t R = x.shape()[0], C = x.shape()[1];
  Tensor<T> out(Shape{C, R});
  const auto in = x.data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = in[r * C + c];
  return lmdepth::detail::make_op<T>(std::move(out), {x}, [R, C](lmdepth::detail::Node<T>& n) {
    if (T* g = n.input_grad(0)) {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += n.grad[c * R + r];
    }
  });
}

// Concatenation along axis 0; trailing dims must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    detail::require(p.shape().size() == parts[0].shape().size() && t == tail,
                    "concat: incompatible shape " + shape_str(p.shape()));
    lead += p.shape()[0];
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor<T> out(shape);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.ptr() + off);
    off += p.size();
  }
  return lmdepth::detail::make_op<T>(std::move(out), parts, [](lmdepth::detail::Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t len = n.input_value(k).size();
      if (T* g = n.input_grad(k)) {
        for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
      }
      off += len;
    }
  });
}

// Zero padding of a C x H x W map.
template <class T>
Var<T> pad2d(const Var<T>& x, std::size_t top, std::size_t left, std::size_t bottom,
             std::size_t right) {
  detail::require(x.shape().size() == 3, "pad2d expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t Ho = H + top + bottom, Wo = W + left + right;
  Tensor<T> out(Shape{C, Ho, Wo});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out.at(c, y + top, xx + left) = xv.at(c, y, xx);
  return lmdepth::detail::make_op<T>(
      std::move(out), {x}, [C, H, W, Ho, Wo, top, left](lmdepth::detail::Node<T>& n) {
        if (T* g = n.input_grad(0)) {
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
              for (std::size_t xx = 0; xx < W; ++xx)
                g[(c * H + y) * W + xx] += n.grad[(c * Ho + y + top) * Wo + xx + left];
        }
      });
}

template <class T>
Var<T> crop2d(const Var<T>& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  detail::require(x.shape().size() == 3, "crop2d expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  detail::require(y0 + h <= H && x0 + w <= W, "crop2d window outside " + shape_str(x.shape()));
  Tensor<T> out(Shape{C, h, w});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out.at(c, y, xx) = xv.at(c, y + y0, xx + x0);
  return lmdepth::detail::make_op<T>(
      std::move(out), {x}, [C, H, W, h, w, y0, x0](lmdepth::detail::Node<T>& n) {
        if (T* g = n.input_grad(0)) {
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < h; ++y)
              for (std::size_t xx = 0; xx < w; ++xx)
                g[(c * H + y + y0) * W + xx + x0] += n.grad[(c * h + y) * w + xx];
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: dimension error " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Tensor<T> out(Shape{M, N});
  linalg::gemm_nn(M, N, K, a.value().ptr(), b.value().ptr(), out.ptr());
  count_macs(M * N * K);
  return lmdepth::detail::make_op<T>(std::move(out), {a, b}, [M, N, K](lmdepth::detail::Node<T>& n) {
    if (T* ga = n.input_grad(0)) linalg::gemm_nt(M, K, N, n.grad.data(), n.input_value(1).ptr(), ga);
    if (T* gb = n.input_grad(1)) linalg::gemm_tn(K, N, M, n.input_value(0).ptr(), n.grad.data(), gb);
  });
}

/// x[L x K] * w[K x N] + bias[N]; bias may be undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[0]) {
    throw ShapeError("linear: dimension error " + shape_str(x.shape()) + " * " +
                     shape_str(w.shape()));
  }
  const std::size_t L = x.shape()[0], K = x.shape()[1], N = w.shape()[1];
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{N}) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " expected [" +
                     std::to_string(N) + "]");
  }
  Tensor<T> out(Shape{L, N});
  if (has_bias) {
    for (std::size_t i = 0; i < L; ++i)
      std::copy(bias.data().begin(), bias.data().end(), out.ptr() + i * N);
  }
  linalg::gemm_nn(L, N, K, x.value().ptr(), w.value().ptr(), out.ptr());
  count_macs(L * N * K);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return lmdepth::detail::make_op<T>(std::move(out), inputs, [L, N, K](lmdepth::detail::Node<T>& n) {
    if (T* gx = n.input_grad(0)) linalg::gemm_nt(L, K, N, n.grad.data(), n.input_value(1).ptr(), gx);
    if (T* gw = n.input_grad(1)) linalg::gemm_tn(K, N, L, n.input_value(0).ptr(), n.grad.data(), gw);
    if (n.inputs.size() > 2) {
      if (T* gb = n.input_grad(2)) {
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < N; ++j) gb[j] += n.grad[i * N + j];
      }
    }
  });
}

namespace detail {

struct ConvGeometry {
  std::size_t cin, h, w, cout, k, stride, pad, groups, ho, wo;
  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
  bool depthwise() const { return groups == cin && cout == cin && groups > 1; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOptions& o) {
  if (xs.size() != 3) throw ShapeError("conv2d expects C x H x W input, got " + shape_str(xs));
  if (ws.size() != 4 || ws[2] != ws[3]) {
    throw ShapeError("conv2d expects C_out x C_in/g x k x k weights, got " + shape_str(ws));
  }
  if (o.groups == 0 || o.stride == 0) throw ParameterError("conv2d: stride and groups must be >= 1");
  ConvGeometry g{xs[0], xs[1], xs[2], ws[0], ws[2], o.stride, o.pad, o.groups, 0, 0};
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
                     " not divisible by groups " + std::to_string(g.groups));
  }
  if (ws[1] != g.cin_g()) {
    throw ShapeError("conv2d: weight " + shape_str(ws) + " does not match input channels " +
                     std::to_string(g.cin) + " with groups " + std::to_string(g.groups));
  }
  const std::size_t ph = g.h + 2 * g.pad, pw = g.w + 2 * g.pad;
  if (ph < g.k || pw < g.k || (ph - g.k) % g.stride != 0 || (pw - g.k) % g.stride != 0) {
    throw ShapeError("conv2d: non-integral output size for input " + shape_str(xs) + ", k=" +
                     std::to_string(g.k) + ", stride=" + std::to_string(g.stride) +
                     ", pad=" + std::to_string(g.pad));
  }
  g.ho = (ph - g.k) / g.stride + 1;
  g.wo = (pw - g.k) / g.stride + 1;
  return g;
}

// Rows: (c, ky, kx) for channels of one group; columns: output pixels.
template <class T>
void im2col(const ConvGeometry& g, const T* x, std::size_t group, std::vector<T>& col) {
  const std::size_t cg = g.cin_g(), kk = g.k * g.k, npix = g.ho * g.wo;
  col.assign(cg * kk * npix, T{0});
  for (std::size_t c = 0; c < cg; ++c) {
    const T* xc = x + (group * cg + c) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col.data() + ((c * g.k + ky) * g.k + kx) * npix;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            row[oy * g.wo + ox] = xc[iy * g.w + ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, const std::vector<T>& col, std::size_t group, T* gx) {
  const std::size_t cg = g.cin_g(), npix = g.ho * g.wo;
  for (std::size_t c = 0; c < cg; ++c) {
    T* xc = gx + (group * cg + c) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col.data() + ((c * g.k + ky) * g.k + kx) * npix;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            xc[iy * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

template <class T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, T* out) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.h * g.w;
    const T* wc = w + c * g.k * g.k;
    T* oc = out + c * g.ho * g.wo;
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                  static_cast<std::ptrdiff_t>(g.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const T wv = wc[ky * g.k + kx];
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            oc[oy * g.wo + ox] += wv * xc[iy * g.w + ix];
          }
        }
      }
    }
  }
}

template <class T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* w, const T* go, T* gx, T* gw) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.h * g.w;
    const T* wc = w + c * g.k * g.k;
    const T* gc = go + c * g.ho * g.wo;
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                  static_cast<std::ptrdiff_t>(g.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const T wv = wc[ky * g.k + kx];
          T wacc{0};
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const T gv = gc[oy * g.wo + ox];
            if (gx) gx[c * g.h * g.w + iy * g.w + ix] += gv * wv;
            wacc += gv * xc[iy * g.w + ix];
          }
          if (gw) gw[c * g.k * g.k + ky * g.k + kx] += wacc;
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of x[C_in x H x W] with w[C_out x C_in/groups x k x k].
/// groups == C_in == C_out selects the depthwise kernel. bias may be undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Conv2dOptions opt = {}) {
  const auto g = detail::conv_geometry(x.shape(), w.shape(), opt);
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{g.cout}) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t npix = g.ho * g.wo;
  Tensor<T> out(Shape{g.cout, g.ho, g.wo});
  if (has_bias) {
    for (std::size_t c = 0; c < g.cout; ++c) std::fill_n(out.ptr() + c * npix, npix, bias.data()[c]);
  }
  const T* xp = x.value().ptr();
  const T* wp = w.value().ptr();
  if (g.depthwise()) {
    detail::depthwise_forward(g, xp, wp, out.ptr());
  } else if (g.pointwise() && g.groups == 1) {
    linalg::gemm_nn(g.cout, npix, g.cin, wp, xp, out.ptr());
  } else {
    std::vector<T> col;
    const std::size_t rows = g.cin_g() * g.k * g.k;
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      detail::im2col(g, xp, grp, col);
      linalg::gemm_nn(g.cout_g(), npix, rows, wp + grp * g.cout_g() * rows, col.data(),
                      out.ptr() + grp * g.cout_g() * npix);
    }
  }
  count_macs(g.cout * g.cin_g() * g.k * g.k * npix);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return lmdepth::detail::make_op<T>(std::move(out), inputs, [g](lmdepth::detail::Node<T>& n) {
    const std::size_t npix = g.ho * g.wo;
    const T* xp = n.input_value(0).ptr();
    const T* wp = n.input_value(1).ptr();
    T* gx = n.input_grad(0);
    T* gw = n.input_grad(1);
    const T* go = n.grad.data();
    if (g.depthwise()) {
      detail::depthwise_backward(g, xp, wp, go, gx, gw);
    } else if (g.pointwise() && g.groups == 1) {
      if (gw) linalg::gemm_nt(g.cout, g.cin, npix, go, xp, gw);
      if (gx) linalg::gemm_tn(g.cin, npix, g.cout, wp, go, gx);
    } else {
      std::vector<T> col;
      std::vector<T> gcol;
      const std::size_t rows = g.cin_g() * g.k * g.k;
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const T* gog = go + grp * g.cout_g() * npix;
        const T* wg = wp + grp * g.cout_g() * rows;
        if (gw) {
          detail::im2col(g, xp, grp, col);
          linalg::gemm_nt(g.cout_g(), rows, npix, gog, col.data(), gw + grp * g.cout_g() * rows);
        }
        if (gx) {
          gcol.assign(rows * npix, T{0});
          linalg::gemm_tn(rows, npix, g.cout_g(), wg, gog, gcol.data());
          detail::col2im(g, gcol, grp, gx);
        }
      }
    }
    if (n.inputs.size() > 2) {
      if (T* gb = n.input_grad(2)) {
        for (std::size_t c = 0; c < g.cout; ++c) {
          T acc{0};
          for (std::size_t p = 0; p < npix; ++p) acc += go[c * npix + p];
          gb[c] += acc;
        }
      }
    }
  });
}

/// Causal depthwise convolution along tokens: x[L x D], w[D x k].
/// y[t, d] = sum_j w[d, j] * x[t - (k - 1) + j, d], with zeros before t = 0.
template <class T>
Var<T> conv1d_depthwise(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (w.shape().size() != 2 || w.shape()[1] < 1) {
    throw ParameterError("conv1d_depthwise: kernel must be D x k with k >= 1, got " +
                         shape_str(w.shape()));
  }
  if (x.shape().size() != 2 || x.shape()[1] != w.shape()[0]) {
    throw ShapeError("conv1d_depthwise: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(w.shape()));
  }
  const std::size_t L = x.shape()[0], D = x.shape()[1], k = w.shape()[1];
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{D}) throw ShapeError("conv1d_depthwise: bias shape");
  Tensor<T> out(Shape{L, D});
  const auto xv = x.data();
  const auto wv = w.data();
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      T acc = has_bias ? bias.data()[d] : T{0};
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(k - 1);
        if (src >= 0) acc += wv[d * k + j] * xv[src * D + d];
      }
      out[t * D + d] = acc;
    }
  }
  count_macs(L * D * k);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return lmdepth::detail::make_op<T>(std::move(out), inputs, [L, D, k](lmdepth::detail::Node<T>& n) {
    const auto& xv = n.input_value(0);
    const auto& wv = n.input_value(1);
    T* gx = n.input_grad(0);
    T* gw = n.input_grad(1);
    T* gb = n.inputs.size() > 2 ? n.input_grad(2) : nullptr;
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const T go = n.grad[t * D + d];
        if (gb) gb[d] += go;
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(k - 1);
          if (src < 0) continue;
          if (gx) gx[src * D + d] += go * wv[d * k + j];
          if (gw) gw[d * k + j] += go * xv[src * D + d];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Max-subtracted softmax along `axis`.
template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  detail::require(axis < s.size(), "softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor<T> out(s);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      T z{0};
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  return lmdepth::detail::make_op<T>(std::move(out), {x}, [outer, inner, n](lmdepth::detail::Node<T>& nd) {
    T* gx = nd.input_grad(0);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot{0};
        for (std::size_t i = 0; i < n; ++i) dot += nd.grad[base + i * inner] * nd.value[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = base + i * inner;
          gx[idx] += nd.value[idx] * (nd.grad[idx] - dot);
        }
      }
    }
  });
}

namespace detail {

// Normalizes `groups` contiguous blocks of length `len`. The affine index of
// element i in block b is b when span == 0, otherwise i / span.
template <class T>
Var<T> normalize_blocks(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        std::size_t groups, std::size_t len, std::size_t span) {
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(groups);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t b = 0; b < groups; ++b) {
    const T* row = xv.data() + b * len;
    T mu{0};
    for (std::size_t i = 0; i < len; ++i) mu += row[i];
    mu /= static_cast<T>(len);
    T var{0};
    for (std::size_t i = 0; i < len; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(len);
    const T r = T{1} / std::sqrt(var + eps);
    rstd[b] = r;
    for (std::size_t i = 0; i < len; ++i) {
      const T h = (row[i] - mu) * r;
      xhat[b * len + i] = h;
      const std::size_t a = span ? i / span : b;
      out[b * len + i] = gv[a] * h + bv[a];
    }
  }
  return lmdepth::detail::make_op<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), groups, len, span](lmdepth::detail::Node<T>& n) {
        const auto& gv = n.input_value(1);
        T* gx = n.input_grad(0);
        T* gg = n.input_grad(1);
        T* gb = n.input_grad(2);
        for (std::size_t b = 0; b < groups; ++b) {
          T s1{0}, s2{0};
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t idx = b * len + i;
            const std::size_t a = span ? i / span : b;
            const T go = n.grad[idx];
            if (gg) gg[a] += go * xhat[idx];
            if (gb) gb[a] += go;
            const T dh = go * gv[a];
            s1 += dh;
            s2 += dh * xhat[idx];
          }
          if (!gx) continue;
          const T inv = T{1} / static_cast<T>(len);
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t idx = b * len + i;
            const std::size_t a = span ? i / span : b;
            const T dh = n.grad[idx] * gv[a];
            gx[idx] += rstd[b] * (dh - inv * s1 - xhat[idx] * inv * s2);
          }
        }
      });
}

}  // namespace detail

/// Per-token normalization of x[L x D] with affine gamma, beta [D].
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  if (x.shape().size() != 2) throw ShapeError("layer_norm expects L x D, got " + shape_str(x.shape()));
  const std::size_t L = x.shape()[0], D = x.shape()[1];
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(D) + "]");
  }
  return detail::normalize_blocks(x, gamma, beta, eps, L, D, 1);
}

/// Per-channel normalization of x[C x H x W] over its spatial extent, with
/// affine gamma, beta [C]. Independent of the batch.
template <class T>
Var<T> channel_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  if (x.shape().size() != 3) throw ShapeError("channel_norm expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.shape()[0], HW = x.shape()[1] * x.shape()[2];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("channel_norm: affine params must be [" + std::to_string(C) + "]");
  }
  return detail::normalize_blocks(x, gamma, beta, eps, C, HW, 0);
}

/// Normalization of x[C x H x W] with one mean and variance over the whole
/// map (a single group) and per-channel affine gamma, beta [C].
template <class T>
Var<T> map_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  if (x.shape().size() != 3) throw ShapeError("map_norm expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.shape()[0], HW = x.shape()[1] * x.shape()[2];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("map_norm: affine params must be [" + std::to_string(C) + "]");
  }
  return detail::normalize_blocks(x, gamma, beta, eps, 1, C * HW, HW);
}

// ---------------------------------------------------------------------------
// Resampling

/// Average pooling with kernel s and stride s.
template <class T>
Var<T> pool_avg(const Var<T>& x, std::size_t s) {
  if (x.shape().size() != 3) throw ShapeError("pool_avg expects C x H x W, got " + shape_str(x.shape()));
  if (s == 0) throw ParameterError("pool_avg: kernel must be >= 1");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H % s != 0 || W % s != 0) {
    throw ShapeError("pool_avg: " + shape_str(x.shape()) + " not divisible by " + std::to_string(s));
  }
  const std::size_t Ho = H / s, Wo = W / s;
  const T inv = T{1} / static_cast<T>(s * s);
  Tensor<T> out(Shape{C, Ho, Wo});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out.at(c, y / s, xx / s) += xv.at(c, y, xx);
  for (auto& v : out.storage()) v *= inv;
  return lmdepth::detail::make_op<T>(std::move(out), {x}, [C, H, W, Ho, Wo, s, inv](lmdepth::detail::Node<T>& n) {
    if (T* g = n.input_grad(0)) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t xx = 0; xx < W; ++xx)
            g[(c * H + y) * W + xx] += inv * n.grad[(c * Ho + y / s) * Wo + xx / s];
    }
  });
}

namespace detail {

struct LerpAxis {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w0, w1;
};

// Half-pixel (align-corners false) source coordinates, clamped at the border.
inline LerpAxis lerp_axis(std::size_t in, std::size_t out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w0.resize(out);
  a.w1.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l1 = src - static_cast<double>(i0);
    a.i0[o] = i0;
    a.i1[o] = i1;
    a.w1[o] = l1;
    a.w0[o] = 1.0 - l1;
  }
  return a;
}

}  // namespace detail

/// Bilinear resize of x[C x H x W] to C x out_h x out_w, half-pixel centers.
template <class T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.shape().size() != 3) {
    throw ShapeError("upsample_bilinear expects C x H x W, got " + shape_str(x.shape()));
  }
  if (out_h == 0 || out_w == 0) throw ShapeError("upsample_bilinear: output dims must be >= 1");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  auto ay = detail::lerp_axis(H, out_h);
  auto ax = detail::lerp_axis(W, out_w);
  Tensor<T> out(Shape{C, out_h, out_w});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy0 = static_cast<T>(ay.w0[oy]), wy1 = static_cast<T>(ay.w1[oy]);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx0 = static_cast<T>(ax.w0[ox]), wx1 = static_cast<T>(ax.w1[ox]);
        out.at(c, oy, ox) = wy0 * (wx0 * xv.at(c, ay.i0[oy], ax.i0[ox]) + wx1 * xv.at(c, ay.i0[oy], ax.i1[ox])) +
                            wy1 * (wx0 * xv.at(c, ay.i1[oy], ax.i0[ox]) + wx1 * xv.at(c, ay.i1[oy], ax.i1[ox]));
      }
    }
  }
  return lmdepth::detail::make_op<T>(
      std::move(out), {x},
      [C, H, W, out_h, out_w, ay = std::move(ay), ax = std::move(ax)](lmdepth::detail::Node<T>& n) {
        T* g = n.input_grad(0);
        if (!g) return;
        for (std::size_t c = 0; c < C; ++c) {
          T* gc = g + c * H * W;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T wy0 = static_cast<T>(ay.w0[oy]), wy1 = static_cast<T>(ay.w1[oy]);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T wx0 = static_cast<T>(ax.w0[ox]), wx1 = static_cast<T>(ax.w1[ox]);
              const T go = n.grad[(c * out_h + oy) * out_w + ox];
              gc[ay.i0[oy] * W + ax.i0[ox]] += go * wy0 * wx0;
              gc[ay.i0[oy] * W + ax.i1[ox]] += go * wy0 * wx1;
              gc[ay.i1[oy] * W + ax.i0[ox]] += go * wy1 * wx0;
              gc[ay.i1[oy] * W + ax.i1[ox]] += go * wy1 * wx1;
            }
          }
        }
      });
}

/// Mean over the spatial extent of x[C x H x W], returned as a 1 x C row.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x.shape().size() != 3) throw ShapeError("global_avg_pool expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.shape()[0], HW = x.shape()[1] * x.shape()[2];
  const T inv = T{1} / static_cast<T>(HW);
  Tensor<T> out(Shape{1, C});
  const auto xv = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    T acc{0};
    for (std::size_t p = 0; p < HW; ++p) acc += xv[c * HW + p];
    out[c] = acc * inv;
  }
  return lmdepth::detail::make_op<T>(std::move(out), {x}, [C, HW, inv](lmdepth::detail::Node<T>& n) {
    if (T* g = n.input_grad(0)) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) g[c * HW + p] += n.grad[c] * inv;
    }
  });
}

/// C x H x W feature map -> (H*W) x C tokens in row-major pixel order.
template <class T>
Var<T> to_tokens(const Var<T>& x) {
  if (x.shape().size() != 3) throw ShapeError("to_tokens expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  return transpose2d(reshape(x, Shape{C, H * W}));
}

/// Inverse of to_tokens.
template <class T>
Var<T> from_tokens(const Var<T>& tokens, std::size_t h, std::size_t w) {
  if (tokens.shape().size() != 2 || tokens.shape()[0] != h * w) {
    throw ShapeError("from_tokens: " + shape_str(tokens.shape()) + " is not (" + std::to_string(h) +
                     "*" + std::to_string(w) + ") x C");
  }
  const std::size_t C = tokens.shape()[1];
  return reshape(transpose2d(tokens), Shape{C, h, w});
}

}  // namespace ops
}  // namespace lmdepth
