#pragma once

// Architecture configuration from a preset name or a JSON file.
//
// JSON keys (all optional except where a preset is not given):
//   preset, profile, projection_dim, input: {height, width},
//   encoder: {channels, depths, expansion},
//   mpsp: {scales, branch_channels, n_bins, n_classes, d_min, d_max},
//   decoder: {conv_kernel, state_dim}, loss: {lambda, alpha, beta, use_cls}

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "lmdepth/model.hpp"

namespace lmdepth {

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <class V>
void read_if(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for " + where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  detail::reject_unknown(j, {"preset", "profile", "projection_dim", "input", "encoder", "mpsp", "decoder", "loss"},
                         "config");
  std::string preset = "lmdepth";
  detail::read_if(j, "preset", preset, "config");
  ModelConfig c = ModelConfig::preset(preset);
  if (j.contains("profile")) c.apply_profile(j.at("profile").get<std::string>());
  if (j.contains("projection_dim")) {
    detail::read_if(j, "projection_dim", c.projection_dim, "config");
    c.mpsp.branch_channels = c.projection_dim;
  }
  if (j.contains("input")) {
    const auto& s = j.at("input");
    detail::reject_unknown(s, {"height", "width"}, "input");
    detail::read_if(s, "height", c.input_height, "input");
    detail::read_if(s, "width", c.input_width, "input");
  }
  if (j.contains("encoder")) {
    const auto& s = j.at("encoder");
    detail::reject_unknown(s, {"channels", "depths", "expansion"}, "encoder");
    detail::read_if(s, "channels", c.encoder.stage_channels, "encoder");
    detail::read_if(s, "depths", c.encoder.stage_depths, "encoder");
    detail::read_if(s, "expansion", c.encoder.expansion, "encoder");
  }
  if (j.contains("mpsp")) {
    const auto& s = j.at("mpsp");
    detail::reject_unknown(s, {"scales", "branch_channels", "n_bins", "n_classes", "d_min", "d_max"}, "mpsp");
    detail::read_if(s, "scales", c.mpsp.scales, "mpsp");
    detail::read_if(s, "branch_channels", c.mpsp.branch_channels, "mpsp");
    detail::read_if(s, "n_bins", c.mpsp.n_bins, "mpsp");
    detail::read_if(s, "n_classes", c.mpsp.n_classes, "mpsp");
    detail::read_if(s, "d_min", c.mpsp.d_min, "mpsp");
    detail::read_if(s, "d_max", c.mpsp.d_max, "mpsp");
  }
  if (j.contains("decoder")) {
    const auto& s = j.at("decoder");
    detail::reject_unknown(s, {"conv_kernel", "state_dim"}, "decoder");
    detail::read_if(s, "conv_kernel", c.decoder.conv_kernel, "decoder");
    detail::read_if(s, "state_dim", c.decoder.state_dim, "decoder");
  }
  if (j.contains("loss")) {
    const auto& s = j.at("loss");
    detail::reject_unknown(s, {"lambda", "alpha", "beta", "use_cls"}, "loss");
    detail::read_if(s, "lambda", c.loss.lambda, "loss");
    detail::read_if(s, "alpha", c.loss.alpha, "loss");
    detail::read_if(s, "beta", c.loss.beta, "loss");
    detail::read_if(s, "use_cls", c.loss.use_cls, "loss");
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"preset", c.name},
      {"profile", c.profile},
      {"projection_dim", c.projection_dim},
      {"input", {{"height", c.input_height}, {"width", c.input_width}}},
      {"encoder",
       {{"channels", c.encoder.stage_channels}, {"depths", c.encoder.stage_depths}, {"expansion", c.encoder.expansion}}},
      {"mpsp",
       {{"scales", c.mpsp.scales},
        {"branch_channels", c.mpsp.branch_channels},
        {"n_bins", c.mpsp.n_bins},
        {"n_classes", c.mpsp.n_classes},
        {"d_min", c.mpsp.d_min},
        {"d_max", c.mpsp.d_max}}},
      {"decoder", {{"conv_kernel", c.decoder.conv_kernel}, {"state_dim", c.decoder.state_dim}}},
      {"loss",
       {{"lambda", c.loss.lambda}, {"alpha", c.loss.alpha}, {"beta", c.loss.beta}, {"use_cls", c.loss.use_cls}}},
  };
}

/// A preset name ("lmdepth", "lmdepth-s") or a path to a JSON file.
inline ModelConfig load_config(const std::string& spec) {
  if (spec == "lmdepth" || spec == "lmdepth-s") {
    ModelConfig c = ModelConfig::preset(spec);
    c.validate();
    return c;
  }
  std::ifstream in(spec);
  if (!in) {
    throw ConfigError("config '" + spec + "' is neither a preset (lmdepth, lmdepth-s) nor a readable file");
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + spec + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace lmdepth
