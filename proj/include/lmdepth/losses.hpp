#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmdepth/ops.hpp"

namespace lmdepth {

struct LossConfig {
  double lambda = 0.85;
  double alpha = 10.0;
  double beta = 0.1;
  bool use_cls = true;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("loss: lambda must lie in [0, 1]");
    if (!(alpha > 0.0)) throw ConfigError("loss: alpha must be > 0");
    if (!(beta > 0.0)) throw ConfigError("loss: beta must be > 0");
  }
};

// Under-root values below this are treated as exact cancellation: the loss
// is 0 and so is its gradient (sqrt has no usable derivative there).
inline constexpr double kSiLossFloor = 1e-12;

/// Valid pixels: ground truth strictly positive.
template <class T>
std::vector<std::uint8_t> valid_mask(const Tensor<T>& gt) {
  std::vector<std::uint8_t> m(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) m[i] = gt[i] > T{0} ? 1 : 0;
  return m;
}

/// Negative log-likelihood of `label` under softmax(logits).
template <class T>
Var<T> cls_loss(const Var<T>& logits, std::size_t label) {
  const std::size_t n = logits.size();
  if (label >= n) {
    throw ParameterError("cls_loss: label " + std::to_string(label) + " outside [0, " + std::to_string(n) + ")");
  }
  const auto z = logits.data();
  T mx = z[0];
  for (T v : z) mx = std::max(mx, v);
  T s{0};
  for (T v : z) s += std::exp(v - mx);
  const T lse = mx + std::log(s);
  return detail::make_op<T>(Tensor<T>::scalar(lse - z[label]), {logits},
                            [label, lse](detail::Node<T>& nd) {
                              T* g = nd.input_grad(0);
                              if (!g) return;
                              const auto& z = nd.input_value(0);
                              const T go = nd.grad[0];
                              for (std::size_t i = 0; i < z.size(); ++i) {
                                g[i] += go * (std::exp(z[i] - lse) - (i == label ? T{1} : T{0}));
                              }
                            });
}

/// alpha * sqrt(mean(g^2) - lambda * mean(g)^2), g = ln pred - ln gt over
/// valid pixels.
template <class T>
Var<T> si_loss(const Var<T>& pred, const Tensor<T>& gt, const std::vector<std::uint8_t>& valid,
               const LossConfig& cfg) {
  if (pred.shape() != gt.shape() || valid.size() != gt.size()) {
    throw ShapeError("si_loss: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  }
  const auto pv = pred.data();
  std::vector<T> g(gt.size(), T{0});
  double s1 = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!valid[i]) continue;
    if (!(pv[i] > T{0}) || !(gt[i] > T{0})) {
      throw DomainError("si_loss: nonpositive depth on valid pixel " + std::to_string(i));
    }
    g[i] = std::log(pv[i]) - std::log(gt[i]);
    s1 += static_cast<double>(g[i]);
    ++count;
  }
  if (count == 0) throw EmptyTargetError("si_loss: no valid pixels");
  const double T_ = static_cast<double>(count);
  // Centered form: var(g) + (1 - lambda) mean(g)^2, less cancellation-prone.
  const double mean = s1 / T_;
  double var = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!valid[i]) continue;
    const double c = static_cast<double>(g[i]) - mean;
    var += c * c;
  }
  const double raw = var / T_ + (1.0 - cfg.lambda) * mean * mean;
  const bool clipped = !(raw >= kSiLossFloor);
  const double root = clipped ? 0.0 : std::sqrt(raw);
  const T value = static_cast<T>(cfg.alpha * root);
  return detail::make_op<T>(
      Tensor<T>::scalar(value), {pred},
      [g = std::move(g), valid, s1, T_, root, clipped, alpha = cfg.alpha, lambda = cfg.lambda](detail::Node<T>& nd) {
        T* gp = nd.input_grad(0);
        if (!gp || clipped) return;
        const auto& pv = nd.input_value(0);
        const double outer = nd.grad[0] * alpha / (2.0 * root);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!valid[i]) continue;
          const double dg = 2.0 * g[i] / T_ - 2.0 * lambda * s1 / (T_ * T_);
          gp[i] += static_cast<T>(outer * dg / static_cast<double>(pv[i]));
        }
      });
}

template <class T>
Var<T> si_loss(const Var<T>& pred, const Tensor<T>& gt, const LossConfig& cfg) {
  return si_loss(pred, gt, valid_mask(gt), cfg);
}

/// cls + beta * reg when classification is enabled and present, else reg.
template <class T>
Var<T> total_loss(const std::optional<Var<T>>& cls, const Var<T>& reg, const LossConfig& cfg) {
  if (cfg.use_cls && cls && cls->defined()) return ops::add(*cls, ops::scale(reg, static_cast<T>(cfg.beta)));
  return reg;
}

}  // namespace lmdepth
