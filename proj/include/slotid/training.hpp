#pragma once

// Flow-matching objective, Adam with global-norm clipping, the training step, and a
// central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "slotid/data.hpp"

namespace slotid::train {

using ad::Var;

template <class T>
struct FlowSample {
  Tensor<T> z1;      // clean latents
  Tensor<T> z0;      // Gaussian noise
  std::vector<double> t;
  Tensor<T> z_t;     // (1 - t) z1 + t z0
  Tensor<T> v_star;  // z0 - z1
};

/// Builds the interpolant and target for given noise and per-item times.
template <class T>
FlowSample<T> flow_sample(const Tensor<T>& z1, Tensor<T> z0, std::vector<double> t) {
  if (z1.shape() != z0.shape()) throw ShapeError("flow_sample: noise shape differs from latents");
  if (t.size() != z1.dim(0)) throw ShapeError("flow_sample: one time per batch item expected");
  FlowSample<T> s;
  s.z1 = z1;
  s.z0 = std::move(z0);
  s.t = std::move(t);
  s.z_t = Tensor<T>(z1.shape());
  s.v_star = Tensor<T>(z1.shape());
  const std::size_t per = z1.size() / z1.dim(0);
  for (std::size_t b = 0; b < z1.dim(0); ++b) {
    const T tb = static_cast<T>(s.t[b]);
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) {
      s.z_t[k] = (T(1) - tb) * s.z1[k] + tb * s.z0[k];
      s.v_star[k] = s.z0[k] - s.z1[k];
    }
  }
  return s;
}

/// eps ~ N(0, I), t ~ U[0, 1] per batch item.
template <class T>
FlowSample<T> make_flow_sample(const Tensor<T>& z1, Rng& rng) {
  auto z0 = rng.normal_tensor<T>(z1.shape());
  std::vector<double> t(z1.dim(0));
  for (auto& v : t) v = rng.uniform();
  return flow_sample(z1, std::move(z0), std::move(t));
}

/// Mean squared velocity error over all elements.
template <class T>
Var<T> loss(const Var<T>& v_pred, const Var<T>& v_star) {
  return ad::mse(v_pred, v_star);
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
};

template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  long steps() const { return t_; }

  /// Clips the global gradient norm, applies one update, and returns the pre-clip norm.
  double step() {
    double sq = 0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (auto g : p.grad().vec()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto& val = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t k = 0; k < val.size(); ++k) {
        const double gk = double(g[k]) * clip;
        double& m = m_[i][k];
        double& v = v_[i][k];
        m = cfg_.beta1 * m + (1 - cfg_.beta1) * gk;
        v = cfg_.beta2 * v + (1 - cfg_.beta2) * gk * gk;
        const double upd = cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        if (cfg_.lr != 0.0) val[k] = static_cast<T>(double(val[k]) - upd);
      }
    }
    return norm;
  }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  std::vector<Tensor<double>> m_, v_;
  long t_ = 0;
};

struct StepMetrics {
  long step = 0;
  double loss = 0;
  double tau = 0;
  double w_mean = 0, w_min = 0, w_max = 0;
  double grad_norm = 0;
  std::optional<double> slot_entropy;       // last refinement iteration, batch mean
  std::optional<double> marginal_residual;  // max row/column residual of the last iteration
  std::vector<double> entropy_per_iteration;
};

/// Forward pass and loss for one batch and flow sample.
template <class T>
struct LossEval {
  Var<T> loss;
  typename SlotIdModel<T>::Output out;
};

template <class T>
LossEval<T> evaluate_loss(const SlotIdModel<T>& model, const Batch<T>& batch, const FlowSample<T>& fs, long step,
                          Rng* dropout_rng) {
  auto out = model.predict(fs.z_t, fs.t, batch.inputs, step, dropout_rng);
  auto l = loss(out.velocity, ad::constant(fs.v_star));
  return {l, std::move(out)};
}

/// One optimizer step. `step` is the global step used for temperature annealing.
template <class T>
StepMetrics train_step(SlotIdModel<T>& model, Adam<T>& opt, const Batch<T>& batch, const FlowSample<T>& fs,
                       long step, Rng* dropout_rng) {
  model.params().zero_grad();
  auto ev = evaluate_loss(model, batch, fs, step, dropout_rng);
  StepMetrics m;
  m.step = step;
  m.loss = double(ev.loss.value()[0]);
  if (!std::isfinite(m.loss)) return m;
  ad::backward(ev.loss);
  m.grad_norm = opt.step();
  m.tau = ot::temperature(step, model.config().sinkhorn);
  m.w_min = 1, m.w_max = 0;
  for (double t : fs.t) {
    const double w = cond::gate_schedule(t);
    m.w_mean += w / double(fs.t.size());
    m.w_min = std::min(m.w_min, w);
    m.w_max = std::max(m.w_max, w);
  }
  const auto& diag = ev.out.identity.diagnostics;
  if (!diag.empty()) {
    m.slot_entropy = diag.back().entropy;
    m.marginal_residual = std::max(diag.back().row_residual, diag.back().col_residual);
    for (const auto& d : diag) m.entropy_per_iteration.push_back(d.entropy);
  }
  return m;
}

struct GradCheckCoord {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckCoord> coords;
  double max_rel_error = 0;
};

/// Relative error with a floor on the denominator so that two near-zero gradients compare equal.
inline double relative_error(double a, double b, double floor = 1e-7) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central differences of `objective` against analytic gradients for chosen coordinates.
/// `objective` must rebuild the graph on each call and return the scalar loss Var.
template <class T>
GradCheckReport finite_diff_check(const std::function<Var<T>()>& objective, std::vector<Param<T>*> params,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& coords, double h = 1e-4) {
  for (auto* p : params) p->var.zero_grad();
  auto l = objective();
  ad::backward(l);
  GradCheckReport rep;
  for (const auto& [pi, idx] : coords) {
    auto* p = params.at(pi);
    GradCheckCoord c;
    c.param = p->name;
    c.index = idx;
    c.analytic = p->var.has_grad() ? double(p->var.grad()[idx]) : 0.0;
    auto& val = p->var.mutable_value();
    const T orig = val[idx];
    double fp, fm;
    {
      ad::NoGradGuard ng;
      val[idx] = static_cast<T>(double(orig) + h);
      fp = double(objective().value()[0]);
      val[idx] = static_cast<T>(double(orig) - h);
      fm = double(objective().value()[0]);
    }
    val[idx] = orig;
    c.numeric = (fp - fm) / (2 * h);
    c.rel_error = relative_error(c.analytic, c.numeric);
    rep.max_rel_error = std::max(rep.max_rel_error, c.rel_error);
    rep.coords.push_back(c);
  }
  return rep;
}

}  // namespace slotid::train
