#pragma once

// Manifest ingestion and the synthetic toy dataset.
//
// Manifest format: first non-comment line "depth_scale <meters per unit>",
// then one sample per line: rgb_path TAB depth_path [TAB scene_label].
// Relative paths resolve against the manifest's directory.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lmdepth/image_io.hpp"
#include "lmdepth/rng.hpp"

namespace lmdepth {

struct SamplePair {
  Tensor<double> rgb;    // 3 x H x W in [0, 1]
  Tensor<double> depth;  // H x W meters, 0 = invalid
  std::optional<std::size_t> label;
  std::string rgb_path;
  std::string depth_path;
};

/// Bilinear resize of C x H x W (half-pixel centers).
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> out(Shape{C, oh, ow});
  auto src = [](std::size_t o, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(s);
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < oh; ++y) {
    std::size_t y0, y1;
    double fy;
    src(y, H, oh, y0, y1, fy);
    for (std::size_t xx = 0; xx < ow; ++xx) {
      std::size_t x0, x1;
      double fx;
      src(xx, W, ow, x0, x1, fx);
      for (std::size_t c = 0; c < C; ++c) {
        const double top = (1 - fx) * x.at(c, y0, x0) + fx * x.at(c, y0, x1);
        const double bot = (1 - fx) * x.at(c, y1, x0) + fx * x.at(c, y1, x1);
        out.at(c, y, xx) = static_cast<T>((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

/// Nearest-neighbor resize of H x W.
template <class T>
Tensor<T> resize_nearest(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  const std::size_t H = x.dim(0), W = x.dim(1);
  Tensor<T> out(Shape{oh, ow});
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = std::min(H - 1, (2 * y + 1) * H / (2 * oh));
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const std::size_t sx = std::min(W - 1, (2 * xx + 1) * W / (2 * ow));
      out.at(y, xx) = x.at(sy, sx);
    }
  }
  return out;
}

/// Aspect-preserving fit into out_h x out_w, then zero padding on the
/// bottom/right. Depth padding is 0, i.e. invalid.
inline void fit_sample(SamplePair& s, std::size_t out_h, std::size_t out_w) {
  const std::size_t H = s.rgb.dim(1), W = s.rgb.dim(2);
  if (H == out_h && W == out_w) return;
  const double f = std::min(static_cast<double>(out_h) / static_cast<double>(H),
                            static_cast<double>(out_w) / static_cast<double>(W));
  const std::size_t rh = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(H * f)), 1, out_h);
  const std::size_t rw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(W * f)), 1, out_w);
  Tensor<double> rgb = (rh == H && rw == W) ? s.rgb : resize_bilinear(s.rgb, rh, rw);
  Tensor<double> depth = (rh == H && rw == W) ? s.depth : resize_nearest(s.depth, rh, rw);
  s.rgb = Tensor<double>(Shape{3, out_h, out_w});
  s.depth = Tensor<double>(Shape{out_h, out_w});
  for (std::size_t y = 0; y < rh; ++y)
    for (std::size_t x = 0; x < rw; ++x) {
      for (std::size_t c = 0; c < 3; ++c) s.rgb.at(c, y, x) = rgb.at(c, y, x);
      s.depth.at(y, x) = depth.at(y, x);
    }
}

inline std::vector<SamplePair> ingest_dataset(const std::filesystem::path& manifest, std::size_t out_h,
                                              std::size_t out_w) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  const auto base = manifest.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  std::optional<double> scale;
  std::vector<SamplePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::string where = manifest.string() + ":" + std::to_string(lineno);
    if (!scale) {
      scale = parse_scale_line(line, where);
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() < 2 || fields.size() > 3) {
      throw FormatError(where + ": expected rgb<TAB>depth[<TAB>label]");
    }
    SamplePair s;
    s.rgb_path = resolve(fields[0]).string();
    s.depth_path = resolve(fields[1]).string();
    if (fields.size() == 3 && !fields[2].empty()) {
      try {
        std::size_t used = 0;
        const long v = std::stol(fields[2], &used);
        if (used != fields[2].size() || v < 0) throw std::invalid_argument("label");
        s.label = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw FormatError(where + ": scene label '" + fields[2] + "' is not a nonnegative integer");
      }
    }
    for (const auto& p : {s.rgb_path, s.depth_path})
      if (!std::filesystem::exists(p)) throw IoError(where + ": missing file " + p);
    s.rgb = rgb_to_tensor<double>(read_png(s.rgb_path, false));
    s.depth = read_depth_units<double>(s.depth_path);
    for (auto& v : s.depth.storage()) v *= *scale;
    if (s.depth.dim(0) != s.rgb.dim(1) || s.depth.dim(1) != s.rgb.dim(2)) {
      throw ShapeError(where + ": rgb " + shape_str(s.rgb.shape()) + " and depth " + shape_str(s.depth.shape()) +
                       " are not aligned");
    }
    fit_sample(s, out_h, out_w);
    out.push_back(std::move(s));
  }
  if (!scale) throw FormatError(manifest.string() + ": missing depth_scale header line");
  return out;
}

struct SyntheticOptions {
  std::size_t count = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  double d_min = 0.1;
  double d_max = 10.0;
  std::size_t n_classes = 25;
  double depth_scale = 0.001;
  std::uint64_t seed = 0;
  /// Width of the rectangle borders as a fraction of the shorter side.
  double border = 0.2;
};

/// Color that encodes depth: hue runs from red (near) to blue (far).
inline std::array<double, 3> synthetic_color(double t) {
  return {1.0 - t, 0.5 + 0.5 * std::sin(3.0 * t), t};
}

/// Scenes of a slanted background plane plus fronto-parallel rectangles;
/// each pixel's color is a function of its depth.
inline std::vector<SamplePair> make_synthetic(const SyntheticOptions& o) {
  Rng rng(o.seed ^ 0x5eed5eedULL);
  const double lo = o.d_min + 0.1 * (o.d_max - o.d_min), hi = o.d_max - 0.1 * (o.d_max - o.d_min);
  std::vector<SamplePair> out;
  for (std::size_t i = 0; i < o.count; ++i) {
    SamplePair s;
    s.rgb = Tensor<double>(Shape{3, o.height, o.width});
    s.depth = Tensor<double>(Shape{o.height, o.width});
    const double a = rng.uniform(lo + 0.3 * (hi - lo), hi);
    const double gx = rng.uniform(-0.3, 0.3) * (hi - lo), gy = rng.uniform(-0.5, 0.0) * (hi - lo);
    for (std::size_t y = 0; y < o.height; ++y)
      for (std::size_t x = 0; x < o.width; ++x) {
        const double u = static_cast<double>(x) / static_cast<double>(o.width - 1) - 0.5;
        const double v = static_cast<double>(y) / static_cast<double>(o.height - 1) - 0.5;
        s.depth.at(y, x) = std::clamp(a + gx * u + gy * v, lo, hi);
      }
    // Rectangles nearer than the plane, blended in over a smoothstep border
    // so the scene stays representable at the decoder's stride-2 output.
    const double edge = std::max(o.border * static_cast<double>(std::min(o.height, o.width)), 1e-9);
    const auto ramp = [edge](double t) {
      t = std::clamp(t / edge, 0.0, 1.0);
      return t * t * (3.0 - 2.0 * t);
    };
    const std::size_t n_rect = 1 + rng.uniform_int(3);
    for (std::size_t r = 0; r < n_rect; ++r) {
      const std::size_t rh = o.height / 6 + rng.uniform_int(o.height / 3);
      const std::size_t rw = o.width / 6 + rng.uniform_int(o.width / 3);
      const double y0 = static_cast<double>(rng.uniform_int(o.height - rh));
      const double x0 = static_cast<double>(rng.uniform_int(o.width - rw));
      const double y1 = y0 + static_cast<double>(rh), x1 = x0 + static_cast<double>(rw);
      const double d = std::max(lo, a * rng.uniform(0.4, 0.8));
      for (std::size_t y = 0; y < o.height; ++y) {
        const double yc = static_cast<double>(y) + 0.5;
        const double my = ramp(yc - y0) * ramp(y1 - yc);
        if (my == 0.0) continue;
        for (std::size_t x = 0; x < o.width; ++x) {
          const double xc = static_cast<double>(x) + 0.5;
          double& v = s.depth.at(y, x);
          v += my * ramp(xc - x0) * ramp(x1 - xc) * (d - v);
        }
      }
    }
    for (std::size_t y = 0; y < o.height; ++y)
      for (std::size_t x = 0; x < o.width; ++x) {
        // Round-trip through the depth codec so stored and in-memory values agree.
        double& d = s.depth.at(y, x);
        d = std::round(d / o.depth_scale) * o.depth_scale;
        const auto c = synthetic_color((d - o.d_min) / (o.d_max - o.d_min));
        for (std::size_t k = 0; k < 3; ++k) s.rgb.at(k, y, x) = c[k];
      }
    s.label = n_rect % o.n_classes;
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes rgb/depth PNGs and a manifest into `dir`; returns the manifest path.
inline std::filesystem::path write_dataset(const std::vector<SamplePair>& samples, const std::filesystem::path& dir,
                                           double depth_scale) {
  std::filesystem::create_directories(dir);
  const auto manifest = dir / "manifest.txt";
  std::ofstream m(manifest, std::ios::trunc);
  if (!m) throw IoError("cannot write " + manifest.string());
  char buf[64];
  std::snprintf(buf, sizeof buf, "depth_scale %.17g\n", depth_scale);
  m << buf;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string rgb = "rgb_" + std::to_string(i) + ".png", depth = "depth_" + std::to_string(i) + ".png";
    write_png(dir / rgb, tensor_to_rgb(samples[i].rgb));
    write_depth(samples[i].depth, dir / depth, depth_scale);
    m << rgb << '\t' << depth;
    if (samples[i].label) m << '\t' << *samples[i].label;
    m << '\n';
  }
  if (!m) throw IoError("write failed for " + manifest.string());
  return manifest;
}

}  // namespace lmdepth
