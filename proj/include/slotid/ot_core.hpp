#pragma once

// Entropic optimal transport with uniform marginals: annealed temperature, log-domain
// Sinkhorn-Knopp (differentiable by unrolling), and the post-hoc marginal corrections.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "slotid/ops.hpp"

namespace slotid::ot {

using ad::Var;

struct SinkhornConfig {
  double tau_start = 1.0;
  double tau_end = 0.3;
  long t_decay = 1000;
  int n_iters = 20;
  double eps = 1e-8;

  void validate() const {
    if (!(tau_end > 0) || tau_start < tau_end) throw std::invalid_argument("sinkhorn: need tau_start >= tau_end > 0");
    if (t_decay <= 0) throw std::invalid_argument("sinkhorn: t_decay must be positive");
    if (n_iters < 1) throw std::invalid_argument("sinkhorn: n_iters must be >= 1");
    if (!(eps >= 0)) throw std::invalid_argument("sinkhorn: eps must be non-negative");
  }
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Linear annealing from tau_start to tau_end over t_decay steps, constant afterwards.
inline double temperature(long step, const SinkhornConfig& cfg) {
  const double frac = std::min(1.0, static_cast<double>(std::max(step, 0L)) / static_cast<double>(cfg.t_decay));
  return (1.0 - frac) * cfg.tau_start + frac * cfg.tau_end;
}

/// Log-domain Sinkhorn on (B, S, L) logits with marginals a = 1/S over slots and b = 1/L over tokens.
/// Returns log P = logits + log u + log v after `n_iters` alternating updates from log u = log v = 0.
template <class T>
Var<T> sinkhorn_log(const Var<T>& logits, int n_iters) {
  if (logits.ndim() != 3) throw ShapeError("sinkhorn_log expects (B, S, L) logits");
  if (!logits.value().all_finite()) throw NumericalError("sinkhorn_log: non-finite logits");
  if (n_iters < 1) throw std::invalid_argument("sinkhorn_log: n_iters must be >= 1");
  const std::size_t b = logits.dim(0), s = logits.dim(1), l = logits.dim(2);
  const Var<T> log_a = ad::constant(Tensor<T>::scalar(static_cast<T>(-std::log(double(s)))));
  const Var<T> log_b = ad::constant(Tensor<T>::scalar(static_cast<T>(-std::log(double(l)))));
  Var<T> log_u = ad::constant(Tensor<T>(Shape{b, s, 1}));
  Var<T> log_v = ad::constant(Tensor<T>(Shape{b, 1, l}));
  for (int it = 0; it < n_iters; ++it) {
    log_u = ad::sub(log_a, ad::logsumexp_axis(ad::add(logits, log_v), 2));
    log_v = ad::sub(log_b, ad::logsumexp_axis(ad::add(logits, log_u), 1));
  }
  return ad::add(ad::add(logits, log_u), log_v);
}

/// Row-then-column renormalization: P <- P / (row sums + eps), then P <- P / (column sums + eps).
template <class T>
Var<T> renormalize(const Var<T>& p, double eps) {
  const Var<T> e = ad::constant(Tensor<T>::scalar(static_cast<T>(eps)));
  auto rows = ad::div(p, ad::add(ad::sum_axis(p, 2), e));
  return ad::div(rows, ad::add(ad::sum_axis(rows, 1), e));
}

/// Rescales every slot row to sum to exactly one (convex aggregation weights).
template <class T>
Var<T> rows_to_convex(const Var<T>& p) {
  auto sums = ad::sum_axis(p, p.ndim() - 1);
  for (std::size_t i = 0; i < sums.value().size(); ++i)
    if (!(sums.value()[i] > T(0))) throw NumericalError("rows_to_convex: row with zero mass");
  return ad::div(p, sums);
}

/// Entropy of a coupling normalized to unit total mass, per batch item: -sum P log P.
template <class T>
std::vector<double> coupling_entropy(const Tensor<T>& p) {
  const std::size_t b = p.dim(0), n = p.size() / b;
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    double total = 0;
    for (std::size_t k = 0; k < n; ++k) total += double(p[i * n + k]);
    double h = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double q = double(p[i * n + k]) / total;
      if (q > 0) h -= q * std::log(q);
    }
    out[i] = h;
  }
  return out;
}

struct MarginalResidual {
  double rows = 0;  // max |row sum - 1/S|
  double cols = 0;  // max |col sum - 1/L|
};

template <class T>
MarginalResidual marginal_residual(const Tensor<T>& p) {
  const std::size_t b = p.dim(0), s = p.dim(1), l = p.dim(2);
  MarginalResidual r;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> col(l, 0.0);
    for (std::size_t j = 0; j < s; ++j) {
      double row = 0;
      for (std::size_t k = 0; k < l; ++k) {
        const double v = double(p[(i * s + j) * l + k]);
        row += v;
        col[k] += v;
      }
      r.rows = std::max(r.rows, std::abs(row - 1.0 / double(s)));
    }
    for (double c : col) r.cols = std::max(r.cols, std::abs(c - 1.0 / double(l)));
  }
  return r;
}

/// Total coupling mass per slot, averaged over the batch.
template <class T>
std::vector<double> slot_mass(const Tensor<T>& p) {
  const std::size_t b = p.dim(0), s = p.dim(1), l = p.dim(2);
  std::vector<double> m(s, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < s; ++j)
      for (std::size_t k = 0; k < l; ++k) m[j] += double(p[(i * s + j) * l + k]) / double(b);
  return m;
}

}  // namespace slotid::ot
