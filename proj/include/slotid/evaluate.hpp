#pragma once

// Held-out evaluation: identity probes on C_id, routing diagnostics, and the matched-vs-mismatched
// reference loss gap.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "slotid/config.hpp"
#include "slotid/probe.hpp"
#include "slotid/training.hpp"

namespace slotid::eval {

/// Ridge probe from flattened slot sets (one row per clip) to identity codes.
inline ProbeResult identity_probe(const Eigen::MatrixXd& slots_train, const Eigen::MatrixXd& codes_train,
                                  const Eigen::MatrixXd& slots_test, const Eigen::MatrixXd& codes_test,
                                  int folds = 5) {
  return ridge_probe(slots_train, codes_train, slots_test, codes_test, default_lambda_grid(), folds);
}

inline Eigen::MatrixXd codes_matrix(const std::vector<synth::IdentityCode>& codes) {
  Eigen::MatrixXd y(static_cast<Eigen::Index>(codes.size()), static_cast<Eigen::Index>(synth::kIdentityDim));
  for (std::size_t i = 0; i < codes.size(); ++i)
    for (std::size_t j = 0; j < synth::kIdentityDim; ++j) y(i, j) = codes[i].values.at(j);
  return y;
}

struct SlotFeatures {
  Eigen::MatrixXd x;  // (N, S * D)
  std::vector<synth::IdentityCode> codes;
};

/// Flattened C_id of clips [first, first + count) from a split, encoded without gradients.
template <class T>
SlotFeatures encode_slots(const SlotIdModel<T>& model, const DataSource& data, Split split, std::uint64_t first,
                          std::size_t count, EncoderMode mode, long step, std::size_t batch = 16) {
  ad::NoGradGuard ng;
  SlotFeatures f;
  for (std::size_t start = 0; start < count; start += batch) {
    std::vector<std::uint64_t> idx;
    for (std::size_t i = start; i < std::min(count, start + batch); ++i) idx.push_back(first + i);
    const auto b = data.batch<T>(split, idx, mode);
    const auto enc = model.encode_identity(b.inputs.reference, step);
    const auto& c = enc.c_id.value();
    const std::size_t per = c.size() / c.dim(0);
    if (f.x.size() == 0) f.x.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(per));
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < per; ++k) f.x(start + i, k) = double(c[i * per + k]);
    f.codes.insert(f.codes.end(), b.identities.begin(), b.identities.end());
  }
  return f;
}

/// Probe trained on `train` clips of the train split, scored on `test` clips of the held-out split.
template <class T>
ProbeResult probe_model(const SlotIdModel<T>& model, const DataSource& data, const EvalConfig& cfg, EncoderMode mode,
                        long step) {
  const auto tr = encode_slots(model, data, Split::train, 1ULL << 30, cfg.probe_train, mode, step);
  const auto te = encode_slots(model, data, Split::heldout, 0, cfg.probe_test, mode, step);
  return identity_probe(tr.x, codes_matrix(tr.codes), te.x, codes_matrix(te.codes), int(cfg.probe_folds));
}

struct IterationSummary {
  double entropy = 0;
  double max_entropy = 0;  // log(S L), the uniform coupling
  double row_residual = 0;
  double col_residual = 0;
  double slot_mass_min = 0, slot_mass_max = 0, slot_mass_target = 0;
  double temperature = 0;
};

struct RoutingReport {
  std::vector<IterationSummary> iterations;
};

/// Entropy here is -sum p log p of the coupling rescaled to unit total mass: log(S L) for a uniform
/// plan, log S when every slot row is one-hot.
template <class T>
RoutingReport routing_report(const std::vector<reader::IterationDiagnostics>& diag,
                             const std::vector<Tensor<T>>& couplings) {
  RoutingReport r;
  for (std::size_t i = 0; i < diag.size(); ++i) {
    IterationSummary s;
    const auto& d = diag[i];
    s.entropy = d.entropy;
    s.row_residual = d.row_residual;
    s.col_residual = d.col_residual;
    s.temperature = d.temperature;
    if (i < couplings.size()) {
      const auto& p = couplings[i];
      s.max_entropy = std::log(double(p.dim(1)) * double(p.dim(2)));
      s.slot_mass_target = 1.0 / double(p.dim(1));
    }
    if (!d.slot_mass.empty()) {
      s.slot_mass_min = *std::min_element(d.slot_mass.begin(), d.slot_mass.end());
      s.slot_mass_max = *std::max_element(d.slot_mass.begin(), d.slot_mass.end());
    }
    r.iterations.push_back(s);
  }
  return r;
}

/// Routing diagnostics of held-out clips at a given global step.
template <class T>
RoutingReport routing_on_heldout(const SlotIdModel<T>& model, const DataSource& data, std::size_t count, long step) {
  ad::NoGradGuard ng;
  std::vector<std::uint64_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  const auto b = data.batch<T>(Split::heldout, idx, model.config().mode);
  const auto enc = model.encode_identity(b.inputs.reference, step);
  return routing_report(enc.diagnostics, enc.couplings);
}

struct PairedGap {
  double mean = 0;
  double se = 0;
  std::size_t n = 0;
  std::vector<double> gaps;

  double z() const { return se > 0 ? mean / se : (mean > 0 ? INFINITY : (mean < 0 ? -INFINITY : 0.0)); }
};

/// Paired differences (b - a) with the standard error of their mean.
inline PairedGap paired_gap(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("paired_gap: need equal, non-empty samples");
  PairedGap g;
  g.n = a.size();
  for (std::size_t i = 0; i < a.size(); ++i) g.gaps.push_back(b[i] - a[i]);
  g.mean = std::accumulate(g.gaps.begin(), g.gaps.end(), 0.0) / double(g.n);
  if (g.n > 1) {
    double ss = 0;
    for (double x : g.gaps) ss += (x - g.mean) * (x - g.mean);
    g.se = std::sqrt(ss / double(g.n - 1) / double(g.n));
  }
  return g;
}

struct MatchedResult {
  std::vector<double> matched, mismatched;
  PairedGap gap;  // mismatched - matched
};

/// Generic form: `loss(i, j)` is the held-out loss of target i conditioned on the reference of j.
/// Pairs target i with reference partner(i), which must come from a different identity.
inline MatchedResult matched_vs_mismatched(std::size_t pairs, const std::function<double(std::size_t, std::size_t)>& loss,
                                           const std::function<std::size_t(std::size_t)>& partner) {
  MatchedResult r;
  for (std::size_t i = 0; i < pairs; ++i) {
    r.matched.push_back(loss(i, i));
    r.mismatched.push_back(loss(i, partner(i)));
  }
  r.gap = paired_gap(r.matched, r.mismatched);
  return r;
}

/// Model form over held-out clips: each target is denoised with its own reference and with the
/// reference of the next clip, under identical noise and flow times.
template <class T>
MatchedResult matched_vs_mismatched(const SlotIdModel<T>& model, const DataSource& data, const EvalConfig& cfg,
                                    long step, std::uint64_t seed) {
  ad::NoGradGuard ng;
  const std::size_t n = cfg.pairs;
  std::vector<Example> exs;
  for (std::size_t i = 0; i < n; ++i) exs.push_back(data.example(Split::heldout, i));
  auto partner = [n](std::size_t i) { return (i + 1) % n; };
  auto loss = [&](std::size_t i, std::size_t j) {
    const auto b = data.assemble<T>({exs[i]}, {i}, Split::heldout, model.config().mode, {&exs[j]});
    double total = 0;
    for (std::size_t k = 0; k < cfg.noise_draws; ++k) {
      Rng rng(seed, "eval.flow", i * 1000 + k);
      const auto fs = train::make_flow_sample(b.target, rng);
      total += double(train::evaluate_loss(model, b, fs, step, nullptr).loss.value()[0]);
    }
    return total / double(cfg.noise_draws);
  };
  return matched_vs_mismatched(n, loss, partner);
}

}  // namespace slotid::eval
