#pragma once

// Mamba-based decoder: VMamba token blocks, depth Mamba blocks (DMB) that
// fuse depth and encoder tokens, and probability-weighted depth composition.

#include <cmath>
#include <string>
#include <vector>

#include "lmdepth/encoder.hpp"
#include "lmdepth/layers.hpp"
#include "lmdepth/mpsp.hpp"
#include "lmdepth/ssm.hpp"

namespace lmdepth {

struct DecoderConfig {
  std::size_t n_dmb = 4;
  std::size_t conv_kernel = 3;
  std::size_t state_dim = 8;

  void validate() const {
    if (n_dmb != 4) throw ConfigError("decoder: exactly 4 DMBs are supported (strides 32 -> 2)");
    if (conv_kernel < 1) throw ConfigError("decoder: conv1d kernel must be >= 1");
    if (state_dim < 1) throw ConfigError("decoder: state_dim must be >= 1");
  }
};

/// norm -> causal conv1d -> SiLU -> selective SSM -> out projection (+ residual),
/// then norm -> FFN (+ residual). Token width D is preserved.
template <class T>
struct VMambaBlock {
  LayerNorm<T> norm1;
  Conv1dDepthwise<T> conv;
  Linear<T> dt_proj;  // D -> D, softplus gives delta
  Linear<T> b_proj;   // D -> N
  Linear<T> c_proj;   // D -> N
  Var<T> a_log;       // [D x N], A = -exp(a_log)
  Linear<T> out_proj;
  LayerNorm<T> norm2;
  Linear<T> ffn1;
  Linear<T> ffn2;

  VMambaBlock() = default;
  VMambaBlock(std::size_t dim, std::size_t state_dim, std::size_t kernel, Rng& rng)
      : norm1(dim),
        conv(dim, kernel, rng),
        dt_proj(dim, dim, rng),
        b_proj(dim, state_dim, rng, false),
        c_proj(dim, state_dim, rng, false),
        out_proj(dim, dim, rng),
        norm2(dim),
        ffn1(dim, 4 * dim, rng),
        ffn2(4 * dim, dim, rng) {
    // -A spans [1, N] log-uniformly in every channel.
    Tensor<T> al(Shape{dim, state_dim});
    for (std::size_t d = 0; d < dim; ++d)
      for (std::size_t n = 0; n < state_dim; ++n)
        al.at(d, n) = state_dim > 1 ? static_cast<T>(std::log(static_cast<double>(state_dim)) *
                                                     static_cast<double>(n) / static_cast<double>(state_dim - 1))
                                    : T{0};
    a_log = Var<T>::parameter(std::move(al));
    // Initial timescales log-uniform in [1e-3, 1e-1] through inverse softplus.
    auto& bias = dt_proj.bias.mutable_value();
    for (std::size_t d = 0; d < dim; ++d) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      bias[d] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    for (auto& w : dt_proj.weight.mutable_value().storage()) w *= T(0.1);
  }

  std::size_t dim() const { return norm1.gamma.size(); }

  Var<T> ssm(const Var<T>& u) {
    Var<T> delta = ops::softplus(dt_proj(u));
    Var<T> A = ops::scale(ops::exp(a_log), T{-1});
    return ops::selective_scan(u, A, delta, b_proj(u), c_proj(u));
  }

  Var<T> operator()(const Var<T>& tokens) {
    if (tokens.shape().size() != 2 || tokens.shape()[1] != dim()) {
      throw ShapeError("vmamba: expected L x " + std::to_string(dim()) + " tokens, got " + shape_str(tokens.shape()));
    }
    Var<T> u = ops::silu(conv(norm1(tokens)));
    Var<T> t1 = ops::add(tokens, out_proj(ssm(u)));
    return ops::add(t1, ffn2(ops::silu(ffn1(norm2(t1)))));
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    norm1.visit(v, join_name(prefix, "norm1"));
    conv.visit(v, join_name(prefix, "conv1d"));
    dt_proj.visit(v, join_name(prefix, "dt_proj"));
    b_proj.visit(v, join_name(prefix, "b_proj"));
    c_proj.visit(v, join_name(prefix, "c_proj"));
    v.param(join_name(prefix, "a_log"), a_log, nullptr);
    out_proj.visit(v, join_name(prefix, "out_proj"));
    norm2.visit(v, join_name(prefix, "norm2"));
    ffn1.visit(v, join_name(prefix, "ffn1"));
    ffn2.visit(v, join_name(prefix, "ffn2"));
  }
};

/// Depth Mamba block: P x h x w depth and encoder features in, P x 2h x 2w out.
template <class T>
struct DepthMambaBlock {
  VMambaBlock<T> vmamba_depth;
  VMambaBlock<T> vmamba_fuse;
  Linear<T> refine;

  DepthMambaBlock() = default;
  DepthMambaBlock(std::size_t dim, const DecoderConfig& cfg, Rng& rng)
      : vmamba_depth(dim, cfg.state_dim, cfg.conv_kernel, rng),
        vmamba_fuse(dim, cfg.state_dim, cfg.conv_kernel, rng),
        refine(dim, dim, rng) {}

  Var<T> operator()(const Var<T>& depth, const Var<T>& visual) {
    if (depth.shape() != visual.shape() || depth.shape().size() != 3) {
      throw ShapeError("dmb: depth " + shape_str(depth.shape()) + " and visual " + shape_str(visual.shape()) +
                       " features must share dims");
    }
    const std::size_t h = depth.shape()[1], w = depth.shape()[2];
    Var<T> d = vmamba_depth(ops::to_tokens(depth));
    Var<T> f = vmamba_fuse(ops::add(d, ops::to_tokens(visual)));
    Var<T> r = ops::from_tokens(refine(f), h, w);
    return ops::upsample_bilinear(r, 2 * h, 2 * w);
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    vmamba_depth.visit(v, join_name(prefix, "vmamba_depth"));
    vmamba_fuse.visit(v, join_name(prefix, "vmamba_fuse"));
    refine.visit(v, join_name(prefix, "refine"));
  }
};

template <class T>
class Decoder {
 public:
  static constexpr std::size_t kVisualStrides[4] = {32, 16, 8, 4};

  Decoder() = default;
  Decoder(std::size_t dim, std::size_t n_bins, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t i = 0; i < cfg_.n_dmb; ++i) blocks_.emplace_back(dim, cfg_, rng);
    logits_ = Conv2d<T>(dim, n_bins, 1, {}, rng, true, false);
  }

  std::vector<DepthMambaBlock<T>>& blocks() { return blocks_; }
  Conv2d<T>& logits_head() { return logits_; }

  /// Chains the DMBs from stride 32 to stride 2 and returns bin logits.
  /// `projected` holds P-channel encoder maps at strides 32, 16, 8, 4.
  Var<T> decode(const Var<T>& global_features, const FeaturePyramid<T>& projected) {
    Var<T> x = global_features;
    for (std::size_t i = 0; i < blocks_.size(); ++i) x = blocks_[i](x, projected.level(kVisualStrides[i]));
    return logits_(x);
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(v, join_name(prefix, "dmb" + std::to_string(i)));
    logits_.visit(v, join_name(prefix, "logits"));
  }

 private:
  DecoderConfig cfg_;
  std::vector<DepthMambaBlock<T>> blocks_;
  Conv2d<T> logits_;
};

namespace ops {

/// depth[p] = sum_i prob[i, p] * centers[i]; prob [n x H x W] -> [1 x H x W].
template <class T>
Var<T> bin_weighted_sum(const Var<T>& prob, const Var<T>& centers) {
  if (prob.shape().size() != 3 || centers.shape() != Shape{prob.shape()[0]}) {
    throw ShapeError("bin_weighted_sum: prob " + shape_str(prob.shape()) + " vs centers " +
                     shape_str(centers.shape()));
  }
  const std::size_t n = prob.shape()[0], HW = prob.shape()[1] * prob.shape()[2];
  Tensor<T> out(Shape{1, prob.shape()[1], prob.shape()[2]});
  const auto pv = prob.data();
  const auto cv = centers.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < HW; ++p) out[p] += pv[i * HW + p] * cv[i];
  count_macs(n * HW);
  return lmdepth::detail::make_op<T>(std::move(out), {prob, centers}, [n, HW](lmdepth::detail::Node<T>& nd) {
    const auto& pv = nd.input_value(0);
    const auto& cv = nd.input_value(1);
    T* gp = nd.input_grad(0);
    T* gc = nd.input_grad(1);
    for (std::size_t i = 0; i < n; ++i) {
      T acc{0};
      for (std::size_t p = 0; p < HW; ++p) {
        if (gp) gp[i * HW + p] += nd.grad[p] * cv[i];
        acc += nd.grad[p] * pv[i * HW + p];
      }
      if (gc) gc[i] += acc;
    }
  });
}

}  // namespace ops

/// Softmax over the bin axis, probability-weighted bin centers, bilinear
/// resize to out_h x out_w. Returns [out_h x out_w] depth in meters.
template <class T>
Var<T> compose_depth(const Var<T>& prob_logits, const Var<T>& centers, std::size_t out_h, std::size_t out_w) {
  Var<T> prob = ops::softmax(prob_logits, 0);
  Var<T> depth = ops::upsample_bilinear(ops::bin_weighted_sum(prob, centers), out_h, out_w);
  return ops::reshape(depth, Shape{out_h, out_w});
}

}  // namespace lmdepth
