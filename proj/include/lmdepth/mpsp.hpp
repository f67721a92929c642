#pragma once

// Modified pyramid spatial pooling head: multi-scale pooling of the
// bottleneck, then scene logits, adaptive depth bins and global features.

#include <numeric>
#include <string>
#include <vector>

#include "lmdepth/encoder.hpp"
#include "lmdepth/layers.hpp"

namespace lmdepth {

struct MPSPConfig {
  std::vector<std::size_t> scales{1, 2, 3, 6};
  std::size_t branch_channels = 24;
  std::size_t n_bins = 64;
  std::size_t n_classes = 25;
  double d_min = 0.1;
  double d_max = 10.0;

  void validate() const {
    if (scales.empty()) throw ConfigError("mpsp: scales must be nonempty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (scales[i] == 0) throw ConfigError("mpsp: scales must be positive");
      if (i > 0 && scales[i] <= scales[i - 1]) throw ConfigError("mpsp: scales must be strictly increasing");
    }
    if (branch_channels == 0) throw ConfigError("mpsp: branch_channels must be positive");
    if (n_bins < 2) throw ConfigError("mpsp: n_bins must be >= 2");
    if (n_classes < 1) throw ConfigError("mpsp: n_classes must be >= 1");
    if (!(d_min > 0.0 && d_min < d_max)) throw ConfigError("mpsp: need 0 < d_min < d_max");
  }

  // Spatial multiple every pooling scale divides.
  std::size_t spatial_multiple() const {
    std::size_t m = 1;
    for (auto s : scales) m = std::lcm(m, s);
    return m;
  }

  std::size_t fused_channels(std::size_t input_channels) const {
    return input_channels + scales.size() * branch_channels;
  }
};

/// Normalized bin widths and the centers they induce on [d_min, d_max].
template <class T>
struct DepthBins {
  Var<T> widths;
  Var<T> centers;
};

namespace ops {

/// centers[i] = d_min + (d_max - d_min) * (sum_{j<=i} w_j - w_i / 2).
template <class T>
Var<T> bin_centers(const Var<T>& widths, T d_min, T d_max) {
  if (widths.shape().size() != 1) throw ShapeError("bin_centers expects a vector of widths");
  const std::size_t n = widths.size();
  const T range = d_max - d_min;
  Tensor<T> out(Shape{n});
  T cum{0};
  const auto w = widths.data();
  for (std::size_t i = 0; i < n; ++i) {
    cum += w[i];
    out[i] = d_min + range * (cum - w[i] / T{2});
  }
  return lmdepth::detail::make_op<T>(std::move(out), {widths}, [n, range](lmdepth::detail::Node<T>& nd) {
    T* gw = nd.input_grad(0);
    if (!gw) return;
    T tail{0};  // sum of grads of centers after j
    for (std::size_t j = n; j-- > 0;) {
      gw[j] += range * (tail + nd.grad[j] / T{2});
      tail += nd.grad[j];
    }
  });
}

}  // namespace ops

/// Three linear layers with SiLU between them; hidden width 4x input.
template <class T>
struct Mlp3 {
  Linear<T> l1, l2, l3;

  Mlp3() = default;
  Mlp3(std::size_t in, std::size_t out, Rng& rng)
      : l1(in, 4 * in, rng), l2(4 * in, 4 * in, rng), l3(4 * in, out, rng) {}

  Var<T> operator()(const Var<T>& x) { return l3(ops::silu(l2(ops::silu(l1(x))))); }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    l1.visit(v, join_name(prefix, "fc1"));
    l2.visit(v, join_name(prefix, "fc2"));
    l3.visit(v, join_name(prefix, "fc3"));
  }
};

template <class T>
struct MPSPOutput {
  Var<T> class_logits;  // [n_classes]
  DepthBins<T> bins;
  Var<T> global_features;  // [P x h x w]
};

template <class T>
class MPSPHead {
 public:
  MPSPHead() = default;
  MPSPHead(const MPSPConfig& cfg, std::size_t input_channels, std::size_t global_channels, Rng& rng)
      : cfg_(cfg), input_channels_(input_channels) {
    cfg_.validate();
    for (std::size_t i = 0; i < cfg_.scales.size(); ++i)
      branches_.emplace_back(input_channels, cfg_.branch_channels, 1, ops::Conv2dOptions{}, rng, true, false);
    const std::size_t fused = cfg_.fused_channels(input_channels);
    classifier_ = Mlp3<T>(fused, cfg_.n_classes, rng);
    bins_mlp_ = Mlp3<T>(fused, cfg_.n_bins, rng);
    global_conv_ = Conv2d<T>(fused, global_channels, 3, {1, 1, 1}, rng, true, false);
  }

  const MPSPConfig& config() const { return cfg_; }
  std::size_t fused_channels() const { return cfg_.fused_channels(input_channels_); }
  std::vector<Conv2d<T>>& branches() { return branches_; }
  Mlp3<T>& classifier() { return classifier_; }
  Mlp3<T>& bins_mlp() { return bins_mlp_; }
  Conv2d<T>& global_conv() { return global_conv_; }

  /// Pool with kernel = stride = s, 1x1 conv, bilinear back to h x w, and
  /// concatenate with the input. h and w must be divisible by every scale.
  Var<T> pyramid_fuse(const Var<T>& input) {
    const auto& s = input.shape();
    if (s.size() != 3) throw ShapeError("pyramid_fuse expects C x h x w, got " + shape_str(s));
    const std::size_t h = s[1], w = s[2];
    for (auto sc : cfg_.scales) {
      if (h % sc != 0 || w % sc != 0) {
        throw ShapeError("pyramid_fuse: " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by pooling scale " + std::to_string(sc));
      }
    }
    std::vector<Var<T>> parts{input};
    for (std::size_t i = 0; i < cfg_.scales.size(); ++i) {
      Var<T> pooled = ops::pool_avg(input, cfg_.scales[i]);
      parts.push_back(ops::upsample_bilinear(branches_[i](pooled), h, w));
    }
    return ops::concat(parts);
  }

  Var<T> classify(const Var<T>& fused) {
    return ops::reshape(classifier_(ops::global_avg_pool(fused)), Shape{cfg_.n_classes});
  }

  DepthBins<T> predict_bins(const Var<T>& fused) {
    Var<T> scores = ops::reshape(bins_mlp_(ops::global_avg_pool(fused)), Shape{cfg_.n_bins});
    return bins_from_scores(scores);
  }

  DepthBins<T> bins_from_scores(const Var<T>& scores) const {
    DepthBins<T> bins;
    // A per-bin floor keeps every width resolvable in the cumulative sum, so
    // centers stay strictly increasing even for extreme scores.
    constexpr T eps = static_cast<T>(1e-6);
    const T n = static_cast<T>(scores.size());
    bins.widths = ops::scale(ops::add_scalar(ops::softmax(scores, 0), eps), T{1} / (T{1} + n * eps));
    bins.centers = ops::bin_centers(bins.widths, static_cast<T>(cfg_.d_min), static_cast<T>(cfg_.d_max));
    return bins;
  }

  Var<T> global_feats(const Var<T>& fused) { return global_conv_(fused); }

  /// Full head on the encoder bottleneck. The bottleneck is zero-padded
  /// bottom/right to a multiple of every pooling scale for fusion, and the
  /// fused map is cropped back before the three heads.
  MPSPOutput<T> forward(const Var<T>& bottleneck) {
    const auto& s = bottleneck.shape();
    if (s.size() != 3) throw ShapeError("mpsp expects C x h x w, got " + shape_str(s));
    const std::size_t h = s[1], w = s[2], m = cfg_.spatial_multiple();
    const std::size_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
    Var<T> fused;
    if (hp == h && wp == w) {
      fused = pyramid_fuse(bottleneck);
    } else {
      fused = ops::crop2d(pyramid_fuse(ops::pad2d(bottleneck, 0, 0, hp - h, wp - w)), 0, 0, h, w);
    }
    MPSPOutput<T> out;
    out.class_logits = classify(fused);
    out.bins = predict_bins(fused);
    out.global_features = global_feats(fused);
    return out;
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    for (std::size_t i = 0; i < branches_.size(); ++i)
      branches_[i].visit(v, join_name(prefix, "branch" + std::to_string(cfg_.scales[i])));
    classifier_.visit(v, join_name(prefix, "classifier"));
    bins_mlp_.visit(v, join_name(prefix, "bins"));
    global_conv_.visit(v, join_name(prefix, "global"));
  }

 private:
  MPSPConfig cfg_;
  std::size_t input_channels_ = 0;
  std::vector<Conv2d<T>> branches_;
  Mlp3<T> classifier_;
  Mlp3<T> bins_mlp_;
  Conv2d<T> global_conv_;
};

}  // namespace lmdepth
