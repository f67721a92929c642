#pragma once

// MobileNetV2-style inverted-residual encoder and the 1x1 projection
// modules that bring every pyramid level to the decoder width.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "lmdepth/layers.hpp"

namespace lmdepth {

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

struct EncoderConfig {
  std::vector<std::size_t> stage_channels{16, 24, 32, 64, 96};
  std::vector<std::size_t> stage_strides{2, 2, 2, 2, 2};
  std::vector<std::size_t> stage_depths{1, 2, 3, 4, 12};
  std::size_t expansion = 4;

  static constexpr std::array<std::size_t, 5> kLevelStrides{2, 4, 8, 16, 32};

  void validate() const {
    if (stage_channels.size() != 5 || stage_strides.size() != 5 || stage_depths.size() != 5) {
      throw ConfigError("encoder: exactly 5 stages are required");
    }
    std::size_t cumulative = 1;
    for (std::size_t i = 0; i < 5; ++i) {
      if (stage_channels[i] == 0) throw ConfigError("encoder: stage widths must be positive");
      if (stage_strides[i] != 1 && stage_strides[i] != 2) throw ConfigError("encoder: stage strides must be 1 or 2");
      cumulative *= stage_strides[i];
      if (cumulative != kLevelStrides[i]) {
        throw ConfigError("encoder: stages must expose strides 2, 4, 8, 16, 32");
      }
    }
    if (expansion == 0) throw ConfigError("encoder: expansion must be >= 1");
  }

  std::size_t bottleneck_channels() const { return stage_channels.back(); }
};

// Stride-2 3x3 convs on even maps: one zero row/column on top/left and none
// on the bottom/right, so H' = H / 2 exactly (the floor convention of
// symmetric pad 1, with the unused trailing pad dropped).
template <class T>
Var<T> pad_for_stride2(const Var<T>& x) {
  return ops::pad2d(x, 1, 1, 0, 0);
}

/// 1x1 expand -> depthwise 3x3 -> 1x1 project, each followed by a channel
/// norm; ReLU6 after the first two. Skip connection iff stride 1 and the
/// width is unchanged.
template <class T>
struct InvertedResidual {
  Conv2d<T> expand;
  ChannelNorm<T> norm_expand;
  Conv2d<T> depthwise;
  ChannelNorm<T> norm_depthwise;
  Conv2d<T> project;
  ChannelNorm<T> norm_project;
  std::size_t stride = 1;
  bool residual = false;

  InvertedResidual() = default;
  InvertedResidual(std::size_t cin, std::size_t cout, std::size_t expansion, std::size_t stride_, Rng& rng)
      : stride(stride_), residual(stride_ == 1 && cin == cout) {
    if (stride != 1 && stride != 2) throw ParameterError("inverted residual stride must be 1 or 2");
    const std::size_t hidden = cin * expansion;
    expand = Conv2d<T>(cin, hidden, 1, {}, rng, false);
    norm_expand = ChannelNorm<T>(hidden);
    depthwise = Conv2d<T>(hidden, hidden, 3, {stride, stride == 1 ? std::size_t{1} : 0, hidden}, rng, false);
    norm_depthwise = ChannelNorm<T>(hidden);
    project = Conv2d<T>(hidden, cout, 1, {}, rng, false, false);
    norm_project = ChannelNorm<T>(cout);
  }

  Var<T> operator()(const Var<T>& x) {
    Var<T> h = ops::relu6(norm_expand(expand(x)));
    h = ops::relu6(norm_depthwise(depthwise(stride == 2 ? pad_for_stride2(h) : h)));
    h = norm_project(project(h));
    return residual ? ops::add(h, x) : h;
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    expand.visit(v, join_name(prefix, "expand"));
    norm_expand.visit(v, join_name(prefix, "expand_norm"));
    depthwise.visit(v, join_name(prefix, "dw"));
    norm_depthwise.visit(v, join_name(prefix, "dw_norm"));
    project.visit(v, join_name(prefix, "project"));
    norm_project.visit(v, join_name(prefix, "project_norm"));
  }
};

/// Encoder outputs keyed by stride relative to the input image.
template <class T>
struct FeaturePyramid {
  std::map<std::size_t, Var<T>> levels;

  const Var<T>& level(std::size_t stride) const {
    auto it = levels.find(stride);
    if (it == levels.end()) {
      throw ConfigError("feature pyramid has no level at stride " + std::to_string(stride));
    }
    return it->second;
  }
  const Var<T>& bottleneck() const { return level(32); }
};

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t c0 = cfg_.stage_channels[0];
    stem_ = Conv2d<T>(3, c0, 3, {cfg_.stage_strides[0], cfg_.stage_strides[0] == 1 ? std::size_t{1} : 0, 1}, rng,
                      false);
    stem_norm_ = ChannelNorm<T>(c0);
    std::size_t prev = c0;
    stages_.resize(5);
    for (std::size_t s = 0; s < 5; ++s) {
      const std::size_t width = cfg_.stage_channels[s];
      for (std::size_t b = 0; b < cfg_.stage_depths[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? cfg_.stage_strides[s] : 1;
        stages_[s].emplace_back(prev, width, cfg_.expansion, stride, rng);
        prev = width;
      }
      if (s > 0 && cfg_.stage_depths[s] == 0) throw ConfigError("encoder: stages 2-5 need at least one block");
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  FeaturePyramid<T> encode(const Var<T>& image) {
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != 3) throw ShapeError("encoder expects a 3 x H x W image, got " + shape_str(s));
    if (s[1] % 32 != 0 || s[2] % 32 != 0) {
      const std::size_t ph = (32 - s[1] % 32) % 32, pw = (32 - s[2] % 32) % 32;
      throw ShapeError("encoder input " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                       " must be divisible by 32; pad by " + std::to_string(ph) + " rows and " +
                       std::to_string(pw) + " columns");
    }
    FeaturePyramid<T> pyr;
    Var<T> x = ops::relu6(stem_norm_(stem_(cfg_.stage_strides[0] == 2 ? pad_for_stride2(image) : image)));
    for (std::size_t st = 0; st < 5; ++st) {
      for (auto& block : stages_[st]) x = block(x);
      pyr.levels[EncoderConfig::kLevelStrides[st]] = x;
    }
    return pyr;
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    stem_.visit(v, join_name(prefix, "stem"));
    stem_norm_.visit(v, join_name(prefix, "stem_norm"));
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].visit(v, join_name(prefix, "stage" + std::to_string(s + 1) + "." + std::to_string(b)));
  }

  std::vector<std::vector<InvertedResidual<T>>>& stages() { return stages_; }

 private:
  EncoderConfig cfg_;
  Conv2d<T> stem_;
  ChannelNorm<T> stem_norm_;
  std::vector<std::vector<InvertedResidual<T>>> stages_;
};

/// 1x1 convolution to the decoder width P.
template <class T>
struct Projection {
  Conv2d<T> conv;

  Projection() = default;
  Projection(std::size_t cin, std::size_t dim, Rng& rng) : conv(cin, checked(dim), 1, {}, rng, true, false) {}

  Var<T> operator()(const Var<T>& x) { return conv(x); }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    conv.visit(v, join_name(prefix, "conv"));
  }

 private:
  static std::size_t checked(std::size_t dim) {
    if (dim == 0) throw ConfigError("projection dim must be positive");
    return dim;
  }
};

}  // namespace lmdepth
