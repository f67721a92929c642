#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "lmdepth/tensor.hpp"

namespace lmdepth {

struct MetricReport {
  double rel = 0.0;
  double rms = 0.0;
  double log10 = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  double sq_rel = 0.0;
  double rmse_log = 0.0;
  std::size_t n_valid = 0;

  /// Flat key=value line with the eight metrics followed by n_valid.
  std::string to_kv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "rel=" << rel << " rms=" << rms << " log10=" << log10 << " delta1=" << delta1
       << " delta2=" << delta2 << " delta3=" << delta3 << " sq_rel=" << sq_rel
       << " rmse_log=" << rmse_log << " n_valid=" << n_valid;
    return os.str();
  }
};

struct DeltaThresholds {
  double t1 = 1.25;
  double t2 = 1.25 * 1.25;
  double t3 = 1.25 * 1.25 * 1.25;
};

/// Standard depth metrics over pixels with valid[i] set and gt > 0.
template <class T>
MetricReport evaluate(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<std::uint8_t>& valid,
                      DeltaThresholds thr = {}) {
  if (pred.shape() != gt.shape() || valid.size() != gt.size()) {
    throw ShapeError("evaluate: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  }
  MetricReport r;
  double abs_rel = 0, sq = 0, l10 = 0, sq_rel = 0, sq_log = 0;
  std::size_t d1 = 0, d2 = 0, d3 = 0, n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double y = static_cast<double>(gt[i]);
    if (!valid[i] || !(y > 0.0)) continue;
    const double yh = static_cast<double>(pred[i]);
    if (!(yh > 0.0)) throw DomainError("evaluate: nonpositive prediction on valid pixel " + std::to_string(i));
    const double diff = y - yh;
    abs_rel += std::abs(diff) / y;
    sq += diff * diff;
    l10 += std::abs(std::log10(y) - std::log10(yh));
    sq_rel += diff * diff / y;
    const double ld = std::log(y) - std::log(yh);
    sq_log += ld * ld;
    const double ratio = std::max(y / yh, yh / y);
    d1 += ratio < thr.t1;
    d2 += ratio < thr.t2;
    d3 += ratio < thr.t3;
    ++n;
  }
  if (n == 0) throw EmptyTargetError("evaluate: no valid pixels");
  const double inv = 1.0 / static_cast<double>(n);
  r.rel = abs_rel * inv;
  r.rms = std::sqrt(sq * inv);
  r.log10 = l10 * inv;
  r.delta1 = static_cast<double>(d1) * inv;
  r.delta2 = static_cast<double>(d2) * inv;
  r.delta3 = static_cast<double>(d3) * inv;
  r.sq_rel = sq_rel * inv;
  r.rmse_log = std::sqrt(sq_log * inv);
  r.n_valid = n;
  return r;
}

template <class T>
MetricReport evaluate(const Tensor<T>& pred, const Tensor<T>& gt, DeltaThresholds thr = {}) {
  std::vector<std::uint8_t> valid(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) valid[i] = gt[i] > T{0};
  return evaluate(pred, gt, valid, thr);
}

/// Mean of per-image reports; n_valid is summed.
inline MetricReport average_reports(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw EmptyTargetError("no per-image metric reports to aggregate");
  MetricReport m;
  for (const auto& r : reports) {
    m.rel += r.rel;
    m.rms += r.rms;
    m.log10 += r.log10;
    m.delta1 += r.delta1;
    m.delta2 += r.delta2;
    m.delta3 += r.delta3;
    m.sq_rel += r.sq_rel;
    m.rmse_log += r.rmse_log;
    m.n_valid += r.n_valid;
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  m.rel *= inv;
  m.rms *= inv;
  m.log10 *= inv;
  m.delta1 *= inv;
  m.delta2 *= inv;
  m.delta3 *= inv;
  m.sq_rel *= inv;
  m.rmse_log *= inv;
  return m;
}

}  // namespace lmdepth
