#pragma once

// Sinkhorn-routed slot reader: learnable slot queries compete for tokens through an entropic
// transport plan, aggregate the tokens they win, and are refined by a GRU cell.

#include <cmath>
#include <string>
#include <vector>

#include "slotid/latent_tokens.hpp"
#include "slotid/ot_core.hpp"

namespace slotid::reader {

using ad::Var;

template <class T>
struct GruCell {
  Var<T> w_ir, w_iz, w_in, b_ir, b_iz, b_in;  // input path
  Var<T> w_hr, w_hz, w_hn, b_hr, b_hz, b_hn;  // hidden path

  static GruCell create(ParamStore<T>& store, const std::string& name, std::size_t d, bool trainable, Rng& rng) {
    GruCell g;
    const double s = 1.0 / std::sqrt(double(d));
    auto w = [&](const char* n) { return store.normal(name + "." + n, Shape{d, d}, s, trainable, rng); };
    auto b = [&](const char* n) { return store.zeros(name + "." + n, Shape{d}, trainable); };
    g.w_ir = w("w_ir"), g.w_iz = w("w_iz"), g.w_in = w("w_in");
    g.b_ir = b("b_ir"), g.b_iz = b("b_iz"), g.b_in = b("b_in");
    g.w_hr = w("w_hr"), g.w_hz = w("w_hz"), g.w_hn = w("w_hn");
    g.b_hr = b("b_hr"), g.b_hz = b("b_hz"), g.b_hn = b("b_hn");
    return g;
  }

  /// r = sig(W_ir x + W_hr h), z = sig(W_iz x + W_hz h), n = tanh(W_in x + r * (W_hn h)),
  /// h' = (1 - z) * n + z * h.
  Var<T> operator()(const Var<T>& x, const Var<T>& h) const {
    auto r = ad::sigmoid(ad::add(ad::linear(x, w_ir, b_ir), ad::linear(h, w_hr, b_hr)));
    auto z = ad::sigmoid(ad::add(ad::linear(x, w_iz, b_iz), ad::linear(h, w_hz, b_hz)));
    auto n = ad::tanh(ad::add(ad::linear(x, w_in, b_in), ad::mul(r, ad::linear(h, w_hn, b_hn))));
    // (1 - z) * n + z * h == n + z * (h - n)
    return ad::add(n, ad::mul(z, ad::sub(h, n)));
  }
};

template <class T>
struct ReaderParams {
  Var<T> slots;  // (S, D) initial queries
  GruCell<T> gru;
  Var<T> readout_g, readout_b, readout_w, readout_bias;  // LayerNorm then Linear
  Var<T> summary_w, summary_b;                           // global summary map
  std::size_t iterations = 3;

  std::size_t num_slots() const { return slots.dim(0); }
  std::size_t width() const { return slots.dim(1); }

  static ReaderParams create(ParamStore<T>& store, const std::string& name, std::size_t slots, std::size_t d,
                             std::size_t iterations, bool trainable, Rng& rng) {
    if (slots == 0) throw std::invalid_argument("reader: need at least one slot");
    if (iterations == 0) throw std::invalid_argument("reader: need at least one refinement iteration");
    ReaderParams p;
    p.iterations = iterations;
    const double s = 1.0 / std::sqrt(double(d));
    p.slots = store.normal(name + ".slots", Shape{slots, d}, s, trainable, rng);
    p.gru = GruCell<T>::create(store, name + ".gru", d, trainable, rng);
    p.readout_g = store.ones(name + ".readout.ln.gamma", Shape{d}, trainable);
    p.readout_b = store.zeros(name + ".readout.ln.beta", Shape{d}, trainable);
    p.readout_w = store.normal(name + ".readout.weight", Shape{d, d}, s, trainable, rng);
    p.readout_bias = store.zeros(name + ".readout.bias", Shape{d}, trainable);
    p.summary_w = store.normal(name + ".summary.weight", Shape{d, d}, s, trainable, rng);
    p.summary_b = store.zeros(name + ".summary.bias", Shape{d}, trainable);
    return p;
  }
};

/// Scaled dot products between slot queries (B, S, D) and keys (B, L, D): (B, S, L).
template <class T>
Var<T> scores(const Var<T>& q, const Var<T>& k) {
  if (q.ndim() != 3 || k.ndim() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2))
    throw ShapeError("scores: shape mismatch " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  return ad::scale(ad::bmm(q, k, false, true), static_cast<T>(1.0 / std::sqrt(double(q.dim(2)))));
}

template <class T>
struct RouteResult {
  Var<T> slots;      // Q^(r), (B, S, D)
  Var<T> weights;    // convex aggregation weights, (B, S, L)
  Tensor<T> raw;     // Sinkhorn coupling before renormalization (diagnostics)
};

/// One refinement: scores -> /tau -> Sinkhorn -> renormalize -> convex rows -> aggregate -> GRU.
/// Keys and values are the tokens themselves.
template <class T>
RouteResult<T> route_step(const Var<T>& q_prev, const Var<T>& tokens, long step, const ot::SinkhornConfig& cfg,
                          const ReaderParams<T>& params) {
  const double tau = ot::temperature(step, cfg);
  auto logits = ad::scale(scores(q_prev, tokens), static_cast<T>(1.0 / tau));
  auto p = ad::exp(ot::sinkhorn_log(logits, cfg.n_iters));
  auto w = ot::rows_to_convex(ot::renormalize(p, cfg.eps));
  auto u = ad::bmm(w, tokens);
  return {params.gru(u, q_prev), w, p.value()};
}

struct IterationDiagnostics {
  double entropy = 0;          // mean over batch of the coupling entropy
  double row_residual = 0;     // max |slot mass - 1/S|
  double col_residual = 0;     // max |token mass - 1/L|
  std::vector<double> slot_mass;
  double temperature = 0;
};

template <class T>
struct ReadResult {
  Var<T> identity;  // C_id, (B, S, D)
  std::vector<IterationDiagnostics> diagnostics;
  std::vector<Tensor<T>> couplings;  // raw couplings per iteration
};

/// Initial queries broadcast over the batch.
template <class T>
Var<T> initial_queries(const ReaderParams<T>& params, std::size_t batch) {
  auto q0 = ad::reshape(params.slots, Shape{1, params.num_slots(), params.width()});
  return ad::add(ad::constant(Tensor<T>(Shape{batch, params.num_slots(), params.width()})), q0);
}

/// R refinements from the learnable queries, then the LayerNorm-Linear readout.
template <class T>
ReadResult<T> read(const Var<T>& tokens, long step, const ot::SinkhornConfig& cfg, const ReaderParams<T>& params) {
  if (tokens.ndim() != 3 || tokens.dim(2) != params.width())
    throw ShapeError("read: tokens " + shape_str(tokens.shape()) + " do not match the reader width");
  ReadResult<T> out;
  Var<T> q = initial_queries(params, tokens.dim(0));
  for (std::size_t r = 0; r < params.iterations; ++r) {
    auto res = route_step(q, tokens, step, cfg, params);
    q = res.slots;
    IterationDiagnostics d;
    const auto ent = ot::coupling_entropy(res.raw);
    for (double e : ent) d.entropy += e / double(ent.size());
    const auto mr = ot::marginal_residual(res.raw);
    d.row_residual = mr.rows;
    d.col_residual = mr.cols;
    d.slot_mass = ot::slot_mass(res.raw);
    d.temperature = ot::temperature(step, cfg);
    out.diagnostics.push_back(std::move(d));
    out.couplings.push_back(std::move(res.raw));
  }
  out.identity = ad::linear(ad::layer_norm(q, params.readout_g, params.readout_b), params.readout_w,
                            params.readout_bias);
  return out;
}

/// Global summary: mean over the set axis followed by a linear map. x is (B, N, D) -> (B, D).
template <class T>
Var<T> global_summary(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto m = ad::mean_axis(x, 1);
  return ad::linear(ad::reshape(m, Shape{x.dim(0), x.dim(2)}), w, b);
}

}  // namespace slotid::reader
