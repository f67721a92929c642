#include <iostream>

#include <CLI11.hpp>

#include "lmdepth/lmdepth.hpp"

namespace app = lmdepth::app;

int main(int argc, char** argv) {
  CLI::App cli{"lmdepth: lightweight monocular depth estimation toolkit"};
  cli.require_subcommand(1);

  app::TrainArgs train;
  auto* tr = cli.add_subcommand("train", "train on a manifest or a synthetic toy set");
  tr->add_option("--config", train.config, "preset name (lmdepth, lmdepth-s) or JSON file")->capture_default_str();
  tr->add_option("--manifest", train.manifest, "training manifest");
  tr->add_option("--synthetic", train.synthetic, "generate N synthetic samples instead of a manifest");
  tr->add_option("--data-dir", train.data_dir, "directory for synthetic samples (default <out>.data)");
  tr->add_option("--out", train.out, "output weight file")->capture_default_str();
  tr->add_option("--log", train.log, "loss log path (default <out>.loss.tsv)");
  tr->add_option("--steps", train.steps, "optimizer steps")->capture_default_str();
  tr->add_option("--lr", train.lr, "learning rate")->capture_default_str();
  tr->add_option("--batch", train.batch, "batch size")->capture_default_str();
  tr->add_option("--seed", train.seed, "random seed")->capture_default_str();

  app::InferArgs infer;
  auto* in = cli.add_subcommand("infer", "predict a depth map for one RGB image");
  in->add_option("--weights", infer.weights, "weight file")->required();
  in->add_option("--config", infer.config, "preset name or JSON file")->capture_default_str();
  in->add_option("--image", infer.image, "8-bit RGB PNG")->required();
  in->add_option("--out", infer.out, "16-bit depth PNG (meters / 0.001)")->required();
  in->add_option("--colorize", infer.colorize, "optional false-color PNG");

  app::EvalArgs eval;
  auto* ev = cli.add_subcommand("eval", "evaluate against a manifest with ground truth");
  ev->add_option("--weights", eval.weights, "weight file")->required();
  ev->add_option("--config", eval.config, "preset name or JSON file")->capture_default_str();
  ev->add_option("--manifest", eval.manifest, "evaluation manifest")->required();

  app::QuantizeArgs quant;
  auto* qu = cli.add_subcommand("quantize", "post-training INT8 quantization");
  qu->add_option("--weights", quant.weights, "float weight file")->required();
  qu->add_option("--config", quant.config, "preset name or JSON file")->capture_default_str();
  qu->add_option("--calib-manifest", quant.calib_manifest, "calibration manifest (>= 8 samples)")->required();
  qu->add_option("--eval-manifest", quant.eval_manifest, "optional manifest for the accuracy delta");
  qu->add_option("--out", quant.out, "quantized weight file")->required();

  app::BenchArgs bench;
  auto* be = cli.add_subcommand("bench", "scan kernel throughput and preset MAC counts");
  be->add_option("--kernel", bench.kernel, "scan, conv_kernel or selective")
      ->check(CLI::IsMember({"scan", "conv_kernel", "selective"}))
      ->capture_default_str();
  be->add_option("--len", bench.len, "sequence length")->capture_default_str();
  be->add_option("--dim", bench.dim, "channels")->capture_default_str();
  be->add_option("--state", bench.state, "state dimension N")->capture_default_str();
  be->add_option("--repeat", bench.repeat, "timed repetitions")->capture_default_str();
  be->add_option("--height", bench.height, "image height for preset MACs")->capture_default_str();
  be->add_option("--width", bench.width, "image width for preset MACs")->capture_default_str();
  be->add_option("--seed", bench.seed, "random seed for the benchmark inputs")->capture_default_str();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*tr) app::run_train(train, std::cout);
    if (*in) app::run_infer(infer, std::cout);
    if (*ev) app::run_eval(eval, std::cout);
    if (*qu) app::run_quantize(quant, std::cout);
    if (*be) app::run_bench(bench, std::cout);
  } catch (const lmdepth::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return app::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
