#pragma once

// Full network: encoder -> projections -> MPSP head -> decoder -> depth.

#include <string>
#include <utility>
#include <vector>

#include "lmdepth/decoder.hpp"
#include "lmdepth/encoder.hpp"
#include "lmdepth/losses.hpp"
#include "lmdepth/mpsp.hpp"

namespace lmdepth {

struct ModelConfig {
  std::string name = "lmdepth";
  std::string profile = "indoor";  // indoor | outdoor
  EncoderConfig encoder;
  std::size_t projection_dim = 24;
  MPSPConfig mpsp;
  DecoderConfig decoder;
  LossConfig loss;
  std::size_t input_height = 64;
  std::size_t input_width = 64;

  void validate() const {
    encoder.validate();
    if (projection_dim == 0) throw ConfigError("projection_dim must be positive");
    mpsp.validate();
    decoder.validate();
    loss.validate();
    if (profile != "indoor" && profile != "outdoor") {
      throw ConfigError("profile must be 'indoor' or 'outdoor', got '" + profile + "'");
    }
    if (input_height == 0 || input_width == 0 || input_height % 32 != 0 || input_width % 32 != 0) {
      throw ConfigError("input dims " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                        " must be positive multiples of 32");
    }
  }

  /// Depth range and classification switch of a data profile.
  void apply_profile(const std::string& p) {
    profile = p;
    if (p == "indoor") {
      mpsp.d_min = 0.1;
      mpsp.d_max = 10.0;
      loss.use_cls = true;
    } else if (p == "outdoor") {
      mpsp.d_min = 0.1;
      mpsp.d_max = 80.0;
      loss.use_cls = false;
    } else {
      throw ConfigError("unknown profile '" + p + "' (expected indoor or outdoor)");
    }
  }

  static ModelConfig preset(const std::string& preset_name) {
    ModelConfig c;
    c.name = preset_name;
    if (preset_name == "lmdepth") {
      c.projection_dim = 24;
      c.mpsp.scales = {1, 2, 3, 6};
    } else if (preset_name == "lmdepth-s") {
      c.projection_dim = 16;
      c.mpsp.scales = {1, 6};
    } else {
      throw ConfigError("unknown preset '" + preset_name + "' (expected lmdepth or lmdepth-s)");
    }
    c.mpsp.branch_channels = c.projection_dim;
    return c;
  }
};

template <class T>
struct ModelOutput {
  Var<T> class_logits;  // [n_classes]
  DepthBins<T> bins;
  Var<T> prob_logits;  // [n_bins x H/2 x W/2]
  Var<T> depth;        // [H x W] meters
};

/// Strides whose encoder levels are projected for the decoder.
inline constexpr std::size_t kProjectedStrides[4] = {32, 16, 8, 4};

template <class T>
class LMDepth {
 public:
  LMDepth() = default;
  LMDepth(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    encoder_ = Encoder<T>(cfg_.encoder, rng);
    const std::size_t P = cfg_.projection_dim;
    for (std::size_t s : kProjectedStrides) projections_.emplace_back(channels_at(s), P, rng);
    mpsp_ = MPSPHead<T>(cfg_.mpsp, cfg_.encoder.bottleneck_channels(), P, rng);
    decoder_ = Decoder<T>(P, cfg_.mpsp.n_bins, cfg_.decoder, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  Encoder<T>& encoder() { return encoder_; }
  std::vector<Projection<T>>& projections() { return projections_; }
  MPSPHead<T>& mpsp() { return mpsp_; }
  Decoder<T>& decoder() { return decoder_; }

  ModelOutput<T> forward(const Var<T>& image) {
    const auto& s = image.shape();
    FeaturePyramid<T> pyr = encoder_.encode(image);
    FeaturePyramid<T> projected;
    for (std::size_t i = 0; i < 4; ++i)
      projected.levels[kProjectedStrides[i]] = projections_[i](pyr.level(kProjectedStrides[i]));
    MPSPOutput<T> head = mpsp_.forward(pyr.bottleneck());
    ModelOutput<T> out;
    out.class_logits = head.class_logits;
    out.bins = head.bins;
    out.prob_logits = decoder_.decode(head.global_features, projected);
    out.depth = compose_depth(out.prob_logits, head.bins.centers, s[1], s[2]);
    return out;
  }

  ModelOutput<T> forward(const Tensor<T>& image) { return forward(constant(image)); }

  template <class V>
  void visit(V& v) {
    encoder_.visit(v, "encoder");
    for (std::size_t i = 0; i < projections_.size(); ++i)
      projections_[i].visit(v, "proj" + std::to_string(kProjectedStrides[i]));
    mpsp_.visit(v, "mpsp");
    decoder_.visit(v, "decoder");
  }

  template <class V>
  void visit(V& v, const std::string&) {
    visit(v);
  }

  std::size_t param_count() { return count_params(*this); }

  /// Switches every quantizable layer between float, calibration and
  /// integer execution.
  void set_mode(ExecMode mode) {
    struct Setter {
      ExecMode mode;
      void param(const std::string&, Var<T>&, QuantState* q) {
        if (q) q->mode = mode;
      }
    } setter{mode};
    visit(setter);
  }

  /// Analytic multiply-accumulate count of one forward pass at h x w.
  std::size_t macs(std::size_t h, std::size_t w) {
    NoGradGuard ng;
    MacMeter meter;
    forward(Tensor<T>(Shape{3, h, w}, T(0.5)));
    return meter.count();
  }

 private:
  std::size_t channels_at(std::size_t stride) const {
    for (std::size_t i = 0; i < 5; ++i)
      if (EncoderConfig::kLevelStrides[i] == stride) return cfg_.encoder.stage_channels[i];
    throw ConfigError("no encoder level at stride " + std::to_string(stride));
  }

  ModelConfig cfg_;
  Encoder<T> encoder_;
  std::vector<Projection<T>> projections_;
  MPSPHead<T> mpsp_;
  Decoder<T> decoder_;
};

/// Named parameter slots in visit order.
template <class T>
struct ParamSlot {
  std::string name;
  Var<T>* var;
  QuantState* quant;
};

template <class T>
std::vector<ParamSlot<T>> collect_params(LMDepth<T>& model) {
  struct Collector {
    std::vector<ParamSlot<T>> slots;
    void param(const std::string& n, Var<T>& v, QuantState* q) { slots.push_back({n, &v, q}); }
  } c;
  model.visit(c);
  return std::move(c.slots);
}

}  // namespace lmdepth
