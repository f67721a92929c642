#pragma once

// AdamW and the toy training loop.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lmdepth/dataset.hpp"
#include "lmdepth/weight_file.hpp"

namespace lmdepth {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Var<T>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& value = params_[k]->mutable_value();
      const auto g = params_[k]->grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps) + cfg_.weight_decay * value[i];
        value[i] = static_cast<T>(value[i] - cfg_.lr * upd);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Var<T>*> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainOptions {
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  AdamWConfig optim;
  std::uint64_t seed = 0;
};

struct LossRow {
  std::size_t step = 0;
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
};

struct TrainResult {
  std::vector<LossRow> rows;
  bool diverged = false;
  std::string diagnostic;
};

/// Losses for one sample; cls is absent when disabled or unlabeled.
template <class T>
struct SampleLoss {
  Var<T> total;
  std::optional<Var<T>> cls;
  Var<T> reg;
};

template <class T>
SampleLoss<T> sample_loss(LMDepth<T>& model, const SamplePair& s) {
  const LossConfig& lc = model.config().loss;
  ModelOutput<T> out = model.forward(s.rgb.cast<T>());
  SampleLoss<T> l;
  if (lc.use_cls && s.label) l.cls = cls_loss(out.class_logits, *s.label);
  l.reg = si_loss(out.depth, s.depth.cast<T>(), lc);
  l.total = total_loss(l.cls, l.reg, lc);
  return l;
}

/// Shuffled mini-batches of `batch_size` drawn without replacement per pass.
/// Gradients are averaged over the batch. `on_step` sees each logged row.
/// On a non-finite loss or gradient, training stops before the update,
/// leaving the model at its last good state.
template <class T>
TrainResult train(LMDepth<T>& model, const std::vector<SamplePair>& data, const TrainOptions& opt,
                  const std::function<void(const LossRow&)>& on_step = {}) {
  if (opt.steps > 0 && data.empty()) throw EmptyTargetError("training set is empty");
  if (opt.batch_size == 0) throw ParameterError("batch size must be >= 1");
  std::vector<Var<T>*> params;
  for (auto& s : collect_params(model)) params.push_back(s.var);
  AdamW<T> optim(params, opt.optim);
  Rng rng(opt.seed ^ 0x7a11ULL);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = data.size();
  TrainResult res;
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    optim.zero_grad();
    LossRow row{step, 0.0, 0.0, 0.0};
    const std::size_t B = std::min(opt.batch_size, data.size());
    std::string failure;
    try {
      for (std::size_t b = 0; b < B; ++b) {
        if (cursor == data.size()) {
          std::iota(order.begin(), order.end(), std::size_t{0});
          for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
          cursor = 0;
        }
        const SamplePair& s = data[order[cursor++]];
        SampleLoss<T> l = sample_loss(model, s);
        row.total += static_cast<double>(l.total.item()) / B;
        row.reg += static_cast<double>(l.reg.item()) / B;
        if (l.cls) row.cls += static_cast<double>(l.cls->item()) / B;
        if (!std::isfinite(row.total)) break;
        backward(ops::scale(l.total, T(1) / static_cast<T>(B)));
      }
    } catch (const Error& e) {
      // Blown-up parameters can also trip a precondition (e.g. a softplus
      // timescale underflowing to zero); treat that like a non-finite loss.
      if (e.kind() != ErrorKind::domain && e.kind() != ErrorKind::contract && e.kind() != ErrorKind::numerical) throw;
      failure = e.what();
    }
    bool finite = failure.empty() && std::isfinite(row.total) && std::isfinite(row.reg) && std::isfinite(row.cls);
    for (auto* p : params) {
      if (!finite) break;
      for (auto g : p->grad())
        if (!std::isfinite(static_cast<double>(g))) {
          finite = false;
          break;
        }
    }
    if (!finite) {
      res.diverged = true;
      res.diagnostic = "non-finite loss or gradient at step " + std::to_string(step);
      if (!failure.empty()) res.diagnostic += " (" + failure + ")";
      optim.zero_grad();
      return res;
    }
    optim.step();
    res.rows.push_back(row);
    if (on_step) on_step(row);
  }
  optim.zero_grad();
  return res;
}

inline void write_loss_header(std::ostream& os) { os << "step\tL_total\tL_cls\tL_reg\n"; }

inline void write_loss_row(std::ostream& os, const LossRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.10g\t%.10g\t%.10g\n", r.step, r.total, r.cls, r.reg);
  os << buf;
}

}  // namespace lmdepth
