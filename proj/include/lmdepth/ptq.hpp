#pragma once

// Post-training static quantization of a float model.

#include <cmath>
#include <string>
#include <vector>

#include "lmdepth/model.hpp"

namespace lmdepth {

inline constexpr std::size_t kMinCalibrationSamples = 8;

/// Boundary parameters of one quantizable layer.
struct LayerCalibration {
  std::string name;
  QuantParams in_qp;
  QuantParams out_qp;
};

/// Float forward passes over `images`, recording min/max at every
/// quantizable layer's input and output. Leaves the model in float mode.
template <class T>
std::vector<LayerCalibration> calibrate(LMDepth<T>& model, const std::vector<Tensor<T>>& images,
                                        std::size_t min_samples = kMinCalibrationSamples) {
  if (images.empty() || images.size() < min_samples) {
    throw ParameterError("calibration needs at least " + std::to_string(min_samples) + " samples, got " +
                         std::to_string(images.size()));
  }
  auto slots = collect_params(model);
  for (auto& s : slots)
    if (s.quant) {
      s.quant->in_range = {};
      s.quant->out_range = {};
    }
  model.set_mode(ExecMode::calibrate);
  {
    NoGradGuard ng;
    for (const auto& img : images) model.forward(img);
  }
  model.set_mode(ExecMode::float_path);
  std::vector<LayerCalibration> out;
  for (auto& s : slots) {
    if (!s.quant) continue;
    if (s.quant->in_range.empty()) throw ContractError("calibration never reached layer " + s.name);
    s.quant->in_qp = s.quant->in_range.qparams();
    s.quant->out_qp = s.quant->out_range.qparams();
    out.push_back({s.name, s.quant->in_qp, s.quant->out_qp});
  }
  return out;
}

template <class T>
QuantizedTensor quantize_weight(const Tensor<T>& w) {
  double absmax = 0.0;
  for (T v : w.data()) absmax = std::max(absmax, std::abs(static_cast<double>(v)));
  return quantize_tensor(w, symmetric_qparams(absmax));
}

/// Calibrates, stores symmetric i8 weights in every conv/linear layer and
/// switches them to integer execution. Norms, biases and SSM parameters stay float.
template <class T>
std::vector<LayerCalibration> quantize_model(LMDepth<T>& model, const std::vector<Tensor<T>>& calib) {
  auto cal = calibrate(model, calib);
  for (auto& s : collect_params(model)) {
    if (!s.quant) continue;
    s.quant->weight = quantize_weight(s.var->value());
  }
  model.set_mode(ExecMode::quantized);
  return cal;
}

}  // namespace lmdepth
