#include <gtest/gtest.h>

#include <cmath>

#include "lmdepth/dataset.hpp"
#include "lmdepth/ptq.hpp"
#include "test_helpers.hpp"

using namespace th;

namespace {

QuantizedTensor q_from(Shape s, std::vector<std::int8_t> data, QuantParams qp) {
  return QuantizedTensor{std::move(s), std::move(data), qp};
}

std::vector<Tensor<float>> synthetic_images(std::size_t n, std::uint64_t seed) {
  SyntheticOptions o;
  o.count = n;
  o.seed = seed;
  std::vector<Tensor<float>> out;
  for (const auto& s : make_synthetic(o)) {
    Tensor<float> t(s.rgb.shape());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(s.rgb[i]);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST(QParams, FormulaExamples) {
  auto qp = qparams_from_range(0.0, 10.0);
  EXPECT_NEAR(qp.scale, 0.039216, 1e-6);
  EXPECT_DOUBLE_EQ(qp.scale, 10.0 / 255.0);
  EXPECT_EQ(qp.zero_point, -128);
  auto sym = qparams_from_range(-3.0, 3.0);
  EXPECT_LE(std::abs(sym.zero_point), 1);
  auto flat = qparams_from_range(0.0, 0.0);
  EXPECT_EQ(flat.scale, kMinQuantScale);
  EXPECT_EQ(flat.zero_point, -128);
  // One-signed ranges are widened to contain zero.
  EXPECT_DOUBLE_EQ(qparams_from_range(2.0, 2.0).scale, 2.0 / 255.0);
  EXPECT_EQ(qparams_from_range(1.5, 4.0).zero_point, -128);
  EXPECT_EQ(qparams_from_range(-4.0, -1.0).zero_point, 127);
  EXPECT_EQ(symmetric_qparams(12.7).zero_point, 0);
  EXPECT_DOUBLE_EQ(symmetric_qparams(12.7).scale, 0.1);
}

TEST(QParams, EmptyObserverIsParameterError) {
  RangeObserver r;
  EXPECT_TRUE(r.empty());
  EXPECT_THROW(r.qparams(), ParameterError);
  std::vector<double> v{1.0, -2.0, 4.0};
  r.observe(std::span<const double>(v));
  EXPECT_EQ(r.lo, -2.0);
  EXPECT_EQ(r.hi, 4.0);
}

TEST(Quantize, ValueExamples) {
  EXPECT_EQ(quantize_value(0.0, QuantParams{0.37, 0}), 0);
  EXPECT_EQ(dequantize_value(0, QuantParams{0.37, 0}), 0.0);
  QuantParams qp{10.0 / 255.0, -128};
  EXPECT_EQ(quantize_value(5.0, qp), 0);
  EXPECT_NEAR(dequantize_value(0, qp), 5.0196, 1e-4);
  EXPECT_EQ(quantize_value(1e9, qp), 127);
  EXPECT_EQ(quantize_value(-1e9, qp), -128);
}

TEST(Quantize, RoundTripWithinHalfStep) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const double lo = rng.uniform(-5, 0), hi = lo + rng.uniform(0.1, 20);
    const auto qp = qparams_from_range(lo, hi);
    // The representable interval after zero-point rounding.
    const double rlo = std::max(lo, dequantize_value(-128, qp)), rhi = std::min(hi, dequantize_value(127, qp));
    auto x = Tensor<D>::uniform(Shape{500}, rng, rlo, rhi);
    auto back = dequantize<D>(quantize_tensor(x, qp));
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_LE(std::abs(back[i] - x[i]), qp.scale / 2 + 1e-9);
  }
}

TEST(Quantize, IdempotentOnRepresentableValues) {
  for (QuantParams qp : {QuantParams{0.05, 0}, QuantParams{0.3, -17}, QuantParams{10.0 / 255, -128}}) {
    for (int q = -128; q <= 127; ++q) {
      const auto i8 = static_cast<std::int8_t>(q);
      ASSERT_EQ(quantize_value(dequantize_value(i8, qp), qp), i8);
    }
  }
}

TEST(Quantize, Monotone) {
  Rng rng(2);
  const QuantParams qp{0.07, 9};
  auto x = Tensor<D>::uniform(Shape{5000}, rng, -20, 20);
  auto xs = x.storage();
  std::sort(xs.begin(), xs.end());
  for (std::size_t i = 1; i < xs.size(); ++i) ASSERT_LE(quantize_value(xs[i - 1], qp), quantize_value(xs[i], qp));
}

TEST(QuantizedLinear, ZeroWeightsGiveQuantizedBias) {
  const QuantParams out{0.02, 3};
  auto x = q_from(Shape{2, 3}, {10, -4, 7, 1, 2, 3}, QuantParams{0.1, 0});
  auto w = q_from(Shape{3, 2}, {0, 0, 0, 0, 0, 0}, QuantParams{0.5, 0});
  std::vector<float> bias{0.5f, -0.3f};
  auto y = quantized_linear(x, w, bias, out);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(y.data[i * 2 + j], quantize_value(static_cast<double>(bias[j]), out));
}

TEST(QuantizedLinear, HandTrace) {
  // x = 2 with scale 1/32, w = 3 with scale 1/32: products are exact.
  auto x = q_from(Shape{1, 1}, {64}, QuantParams{1.0 / 32, 0});
  auto w = q_from(Shape{1, 1}, {96}, QuantParams{1.0 / 32, 0});
  const QuantParams out{8.0 / 127, 0};
  auto y = quantized_linear(x, w, {}, out);
  EXPECT_LE(std::abs(dequantize_value(y.data[0], out) - 6.0), out.scale);
}

TEST(QuantizedLinear, MatchesFloatPath) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 1 + rng.uniform_int(6), K = 1 + rng.uniform_int(24), N = 1 + rng.uniform_int(10);
    auto xf = rand(Shape{L, K}, rng, -2, 3);
    auto wf = rand(Shape{K, N}, rng, -1, 1);
    auto bf = rand(Shape{N}, rng, -0.5, 0.5);
    auto ref = ops::linear(constant(xf), constant(wf), constant(bf)).value();
    RangeObserver xin, yout;
    xin.observe(xf.data());
    yout.observe(ref.data());
    const auto xq = quantize_tensor(xf, xin.qparams());
    const auto wq = quantize_weight(wf);
    std::vector<float> b(bf.storage().begin(), bf.storage().end());
    const auto out_qp = yout.qparams();
    auto y = dequantize<D>(quantized_linear(xq, wq, b, out_qp));
    EXPECT_LT(max_abs_diff(y, ref), 3 * out_qp.scale) << "trial " << trial;
  }
}

TEST(QuantizedLinear, Errors) {
  auto x = q_from(Shape{1, 2}, {1, 2}, QuantParams{});
  auto w = q_from(Shape{3, 1}, {1, 2, 3}, QuantParams{});
  EXPECT_THROW(quantized_linear(x, w, {}, QuantParams{}), ShapeError);
  const std::size_t K = kMaxQuantizedDot + 1;
  auto big_x = q_from(Shape{1, K}, std::vector<std::int8_t>(K, 1), QuantParams{});
  auto big_w = q_from(Shape{K, 1}, std::vector<std::int8_t>(K, 1), QuantParams{});
  EXPECT_THROW(quantized_linear(big_x, big_w, {}, QuantParams{}), ContractError);
}

TEST(QuantizedConv, MatchesFloatPath) {
  Rng rng(4);
  for (auto opt : {ops::Conv2dOptions{1, 1, 1}, ops::Conv2dOptions{1, 1, 4}, ops::Conv2dOptions{1, 0, 1}}) {
    const std::size_t cin = 4, cout = opt.groups == 4 ? 4 : 6;
    auto xf = rand(Shape{cin, 7, 6}, rng, 0, 2);
    auto wf = rand(Shape{cout, cin / opt.groups, 3, 3}, rng, -0.5, 0.5);
    auto bf = rand(Shape{cout}, rng);
    auto ref = ops::conv2d(constant(xf), constant(wf), constant(bf), opt).value();
    RangeObserver xin, yout;
    xin.observe(xf.data());
    yout.observe(ref.data());
    std::vector<float> b(bf.storage().begin(), bf.storage().end());
    const auto out_qp = yout.qparams();
    auto y = dequantize<D>(quantized_conv2d(quantize_tensor(xf, xin.qparams()), quantize_weight(wf), b, opt, out_qp));
    EXPECT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y, ref), 3 * out_qp.scale);
  }
}

TEST(QuantizedConv1d, MatchesFloatPath) {
  Rng rng(5);
  auto xf = rand(Shape{9, 5}, rng, -1, 1);
  auto wf = rand(Shape{5, 3}, rng);
  auto bf = rand(Shape{5}, rng);
  auto ref = ops::conv1d_depthwise(constant(xf), constant(wf), constant(bf)).value();
  RangeObserver xin, yout;
  xin.observe(xf.data());
  yout.observe(ref.data());
  std::vector<float> b(bf.storage().begin(), bf.storage().end());
  auto y = dequantize<D>(
      quantized_conv1d_depthwise(quantize_tensor(xf, xin.qparams()), quantize_weight(wf), b, yout.qparams()));
  EXPECT_LT(max_abs_diff(y, ref), 3 * yout.qparams().scale);
}

TEST(Calibration, TooFewSamples) {
  LMDepth<float> model(ModelConfig::preset("lmdepth-s"), 1);
  EXPECT_THROW(calibrate(model, synthetic_images(7, 1)), ParameterError);
  EXPECT_THROW(calibrate(model, std::vector<Tensor<float>>{}, 0), ParameterError);
}

TEST(Calibration, ScalesStableAcrossDraws) {
  LMDepth<float> model(ModelConfig::preset("lmdepth-s"), 2);
  const auto a = calibrate(model, synthetic_images(8, 100));
  const auto b = calibrate(model, synthetic_images(8, 200));
  ASSERT_EQ(a.size(), b.size());
  std::size_t within = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].name, b[i].name);
    const double ri = a[i].in_qp.scale / b[i].in_qp.scale, ro = a[i].out_qp.scale / b[i].out_qp.scale;
    EXPECT_GT(ri, 1 / 1.2) << a[i].name;
    EXPECT_LT(ri, 1.2) << a[i].name;
    EXPECT_GT(ro, 1 / 1.2) << a[i].name;
    EXPECT_LT(ro, 1.2) << a[i].name;
    within += ri > 1 / 1.2 && ri < 1.2 && ro > 1 / 1.2 && ro < 1.2;
  }
  std::printf("layers with scales within 20%%: %zu / %zu\n", within, a.size());
}

TEST(QuantizedModel, CloseToFloatAndDeterministic) {
  LMDepth<float> model(ModelConfig::preset("lmdepth"), 3);
  const auto calib = synthetic_images(8, 300);
  const auto probe = synthetic_images(4, 400);
  NoGradGuard ng;
  std::vector<Tensor<float>> float_depth;
  for (const auto& img : probe) float_depth.push_back(model.forward(img).depth.value());
  quantize_model(model, calib);
  double rel = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const auto q1 = model.forward(probe[k]).depth.value();
    const auto q2 = model.forward(probe[k]).depth.value();
    ASSERT_EQ(q1.storage(), q2.storage());
    for (std::size_t i = 0; i < q1.size(); ++i, ++n) rel += std::abs(q1[i] - float_depth[k][i]) / float_depth[k][i];
  }
  rel /= static_cast<double>(n);
  std::printf("mean relative depth difference float vs int8: %.5f\n", rel);
  EXPECT_LT(rel, 0.05);
}

TEST(QuantizedModel, LayerWithoutWeightIsContractError) {
  Rng rng(6);
  Linear<float> l(3, 2, rng);
  l.quant.mode = ExecMode::quantized;
  EXPECT_THROW(l(constant(Tensor<float>(Shape{1, 3}))), ContractError);
}
