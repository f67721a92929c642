#pragma once

// Command implementations behind the lmdepth CLI.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lmdepth/config.hpp"
#include "lmdepth/metrics.hpp"
#include "lmdepth/ptq.hpp"
#include "lmdepth/ssm.hpp"
#include "lmdepth/train.hpp"

namespace lmdepth::app {

/// 0 success, 1 usage/parameter, 2 data, 3 numerical.
inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::parameter:
    case ErrorKind::config:
      return 1;
    case ErrorKind::shape:
    case ErrorKind::format:
    case ErrorKind::io:
    case ErrorKind::empty_target:
      return 2;
    case ErrorKind::domain:
    case ErrorKind::contract:
    case ErrorKind::numerical:
      return 3;
  }
  return 1;
}

inline constexpr double kOutputDepthScale = 0.001;

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config = "lmdepth";
  std::string manifest;
  std::size_t synthetic = 0;
  std::string data_dir;  // where synthetic samples go; default <out>.data
  std::string out = "lmdepth.lmdw";
  std::string log;  // default <out>.loss.tsv
  std::size_t steps = 500;
  double lr = 2e-4;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<LossRow> rows;
  std::string weights_path;
  std::string log_path;
  std::string manifest_path;
  std::size_t param_count = 0;
  double seconds = 0.0;
};

inline TrainReport run_train(const TrainArgs& a, std::ostream& os) {
  const ModelConfig cfg = load_config(a.config);
  if (a.manifest.empty() == (a.synthetic == 0)) {
    throw ParameterError("train needs exactly one of --manifest or --synthetic N");
  }
  if (!(a.lr > 0.0)) throw ParameterError("--lr must be > 0");
  TrainReport rep;
  rep.weights_path = a.out;
  rep.log_path = a.log.empty() ? a.out + ".loss.tsv" : a.log;
  if (a.synthetic > 0) {
    SyntheticOptions so;
    so.count = a.synthetic;
    so.height = cfg.input_height;
    so.width = cfg.input_width;
    so.d_min = cfg.mpsp.d_min;
    so.d_max = cfg.mpsp.d_max;
    so.n_classes = cfg.mpsp.n_classes;
    so.seed = a.seed;
    const std::string dir = a.data_dir.empty() ? a.out + ".data" : a.data_dir;
    rep.manifest_path = write_dataset(make_synthetic(so), dir, so.depth_scale).string();
  } else {
    rep.manifest_path = a.manifest;
  }
  const auto data = ingest_dataset(rep.manifest_path, cfg.input_height, cfg.input_width);

  LMDepth<double> model(cfg, a.seed);
  rep.param_count = model.param_count();
  TrainOptions opt;
  opt.steps = a.steps;
  opt.batch_size = a.batch;
  opt.optim.lr = a.lr;
  opt.seed = a.seed;

  std::ofstream log(rep.log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write loss log " + rep.log_path);
  write_loss_header(log);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res = train(model, data, opt, [&](const LossRow& r) {
    write_loss_row(log, r);
    log.flush();
  });
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.rows = res.rows;
  save_weights(model, a.out);
  if (res.diverged) {
    throw NumericalError(res.diagnostic + "; last good weights written to " + a.out);
  }
  os << "trained steps=" << res.rows.size() << " params=" << rep.param_count << " samples=" << data.size()
     << " seconds=" << rep.seconds;
  if (!res.rows.empty()) os << " first_L_reg=" << res.rows.front().reg << " final_L_reg=" << res.rows.back().reg;
  os << " weights=" << a.out << " log=" << rep.log_path << "\n";
  return rep;
}

// ---------------------------------------------------------------------------

inline LMDepth<float> load_model(const std::string& config, const std::string& weights) {
  LMDepth<float> model(load_config(config), 0);
  load_weights(model, std::filesystem::path(weights));
  return model;
}

/// Zero-pads bottom/right to multiples of 32, runs the model, crops back.
inline Tensor<float> predict_depth(LMDepth<float>& model, const Tensor<float>& rgb) {
  const std::size_t H = rgb.dim(1), W = rgb.dim(2);
  const std::size_t Hp = (H + 31) / 32 * 32, Wp = (W + 31) / 32 * 32;
  NoGradGuard ng;
  Var<float> x = constant(rgb);
  if (Hp != H || Wp != W) x = ops::pad2d(x, 0, 0, Hp - H, Wp - W);
  Var<float> depth = model.forward(x).depth;
  if (Hp != H || Wp != W) {
    depth = ops::reshape(ops::crop2d(ops::reshape(depth, Shape{1, Hp, Wp}), 0, 0, H, W), Shape{H, W});
  }
  return depth.value();
}

struct InferArgs {
  std::string weights;
  std::string config = "lmdepth";
  std::string image;
  std::string out;
  std::string colorize;
};

inline Tensor<float> run_infer(const InferArgs& a, std::ostream& os) {
  LMDepth<float> model = load_model(a.config, a.weights);
  const Tensor<float> rgb = rgb_to_tensor<float>(read_png(a.image, false));
  Tensor<float> depth = predict_depth(model, rgb);
  write_depth(depth, a.out, kOutputDepthScale);
  if (!a.colorize.empty()) {
    write_png(a.colorize, colorize(depth, model.config().mpsp.d_min, model.config().mpsp.d_max));
  }
  os << "depth=" << a.out << " height=" << depth.dim(0) << " width=" << depth.dim(1) << "\n";
  return depth;
}

// ---------------------------------------------------------------------------

struct EvalResult {
  std::vector<MetricReport> per_image;
  MetricReport aggregate;
};

inline EvalResult evaluate_model(LMDepth<float>& model, const std::vector<SamplePair>& data) {
  EvalResult r;
  for (const auto& s : data) {
    const Tensor<float> pred = predict_depth(model, s.rgb.cast<float>());
    const Tensor<double> gt = s.depth;
    const auto valid = valid_mask(gt);
    bool any = false;
    for (auto v : valid) any = any || v;
    if (!any) continue;
    r.per_image.push_back(evaluate(pred.cast<double>(), gt, valid));
  }
  if (r.per_image.empty()) throw EmptyTargetError("no image in the manifest has valid ground-truth pixels");
  r.aggregate = average_reports(r.per_image);
  return r;
}

struct EvalArgs {
  std::string weights;
  std::string config = "lmdepth";
  std::string manifest;
};

inline EvalResult run_eval(const EvalArgs& a, std::ostream& os) {
  LMDepth<float> model = load_model(a.config, a.weights);
  const auto& c = model.config();
  const auto data = ingest_dataset(a.manifest, c.input_height, c.input_width);
  EvalResult r = evaluate_model(model, data);
  for (std::size_t i = 0; i < r.per_image.size(); ++i) os << "image=" << i << " " << r.per_image[i].to_kv() << "\n";
  os << "aggregate " << r.aggregate.to_kv() << "\n";
  return r;
}

// ---------------------------------------------------------------------------

struct QuantizeArgs {
  std::string weights;
  std::string config = "lmdepth";
  std::string calib_manifest;
  std::string eval_manifest;
  std::string out;
};

struct QuantizeReport {
  std::size_t float_bytes = 0;
  std::size_t quant_bytes = 0;
  double ratio = 0.0;
  std::optional<MetricReport> float_metrics;
  std::optional<MetricReport> quant_metrics;
};

inline QuantizeReport run_quantize(const QuantizeArgs& a, std::ostream& os) {
  const ModelConfig cfg = load_config(a.config);
  LMDepth<float> model = load_model(a.config, a.weights);
  const auto calib = ingest_dataset(a.calib_manifest, cfg.input_height, cfg.input_width);
  std::vector<Tensor<float>> images;
  for (const auto& s : calib) images.push_back(s.rgb.cast<float>());
  QuantizeReport rep;
  std::optional<std::vector<SamplePair>> eval_data;
  if (!a.eval_manifest.empty()) {
    eval_data = ingest_dataset(a.eval_manifest, cfg.input_height, cfg.input_width);
    rep.float_metrics = evaluate_model(model, *eval_data).aggregate;
  }
  quantize_model(model, images);
  const auto bytes = save_weights(model);
  write_file_bytes(a.out, bytes);
  rep.float_bytes = std::filesystem::file_size(a.weights);
  rep.quant_bytes = bytes.size();
  rep.ratio = static_cast<double>(rep.quant_bytes) / static_cast<double>(rep.float_bytes);
  os << "quantized=" << a.out << " float_bytes=" << rep.float_bytes << " quant_bytes=" << rep.quant_bytes
     << " ratio=" << rep.ratio << "\n";
  if (eval_data) {
    rep.quant_metrics = evaluate_model(model, *eval_data).aggregate;
    os << "float " << rep.float_metrics->to_kv() << "\n";
    os << "quantized " << rep.quant_metrics->to_kv() << "\n";
    os << "delta1_drop=" << rep.float_metrics->delta1 - rep.quant_metrics->delta1 << "\n";
  }
  return rep;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string kernel = "selective";  // scan | conv_kernel | selective
  std::size_t len = 1024;
  std::size_t dim = 24;
  std::size_t state = 8;
  std::size_t repeat = 3;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string kernel;
  double seconds = 0.0;
  double tokens_per_second = 0.0;
  std::uint64_t macs_per_token = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::uint64_t macs_lmdepth = 0;
  std::uint64_t macs_lmdepth_s = 0;
};

inline std::uint64_t preset_macs(const std::string& preset, std::size_t h, std::size_t w) {
  ModelConfig c = ModelConfig::preset(preset);
  c.input_height = h;
  c.input_width = w;
  LMDepth<float> m(c, 0);
  return m.macs(h, w);
}

inline BenchReport run_bench(const BenchArgs& a, std::ostream& os) {
  if (a.len == 0 || a.dim == 0 || a.state == 0 || a.repeat == 0) {
    throw ParameterError("bench: --len, --dim, --state and --repeat must be >= 1");
  }
  if (a.kernel != "scan" && a.kernel != "conv_kernel" && a.kernel != "selective") {
    throw ParameterError("bench: unknown kernel '" + a.kernel + "' (scan, conv_kernel, selective)");
  }
  Rng rng(a.seed);
  const std::size_t L = a.len, D = a.dim, N = a.state;
  BenchReport rep;
  // Time-invariant kernels run one scan per channel.
  std::vector<DiscreteSSM<double>> heads;
  std::vector<std::vector<double>> Cs, xs;
  for (std::size_t d = 0; d < D; ++d) {
    SSMParams<double> p;
    for (std::size_t n = 0; n < N; ++n) {
      p.A.push_back(-std::exp(rng.uniform(0.0, std::log(static_cast<double>(N) + 1.0))));
      p.B.push_back(rng.normal());
      p.C.push_back(rng.normal());
    }
    p.delta = rng.uniform(0.01, 0.5);
    heads.push_back(zoh_discretize(p));
    Cs.push_back(p.C);
    std::vector<double> x(L);
    for (auto& v : x) v = rng.normal();
    xs.push_back(std::move(x));
  }
  const auto x = Tensor<double>::normal(Shape{L, D}, rng);
  const auto A = Tensor<double>::uniform(Shape{D, N}, rng, -2.0, -0.5);
  const auto delta = Tensor<double>::uniform(Shape{L, D}, rng, 0.01, 0.5);
  const auto B = Tensor<double>::normal(Shape{L, N}, rng);
  const auto C = Tensor<double>::normal(Shape{L, N}, rng);
  double sink = 0.0;
  for (std::size_t r = 0; r < a.repeat; ++r) {
    MacMeter meter;
    std::uint64_t macs = 0;
    const auto t0 = std::chrono::steady_clock::now();
    if (a.kernel == "scan") {
      for (std::size_t d = 0; d < D; ++d) sink += scan_recurrent<double>(heads[d], Cs[d], xs[d], {}).back();
      macs = D * ssm_cost::recurrent(L, N);
    } else if (a.kernel == "conv_kernel") {
      for (std::size_t d = 0; d < D; ++d) {
        const auto K = kernel_convolutional<double>(heads[d], Cs[d], L);
        sink += apply_kernel<double>(xs[d], K).back();
      }
      macs = D * (ssm_cost::kernel(L, N) + ssm_cost::apply_kernel(L));
    } else {
      NoGradGuard ng;
      sink += ops::selective_scan(constant(x), constant(A), constant(delta), constant(B), constant(C)).data()[0];
      macs = ssm_cost::selective(L, D, N);
    }
    const double sec = std::max(1e-12, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    BenchRow row{a.kernel, sec, static_cast<double>(L) / sec, macs / L};
    rep.rows.push_back(row);
    os << "kernel=" << row.kernel << " len=" << L << " dim=" << D << " state=" << N << " repeat=" << r
       << " seconds=" << row.seconds << " tokens_per_s=" << row.tokens_per_second
       << " macs_per_token=" << row.macs_per_token << "\n";
  }
  rep.macs_lmdepth = preset_macs("lmdepth", a.height, a.width);
  rep.macs_lmdepth_s = preset_macs("lmdepth-s", a.height, a.width);
  os << "preset=lmdepth height=" << a.height << " width=" << a.width << " macs=" << rep.macs_lmdepth << "\n";
  os << "preset=lmdepth-s height=" << a.height << " width=" << a.width << " macs=" << rep.macs_lmdepth_s << "\n";
  if (!std::isfinite(sink)) throw NumericalError("bench produced a non-finite result");
  return rep;
}

}  // namespace lmdepth::app
