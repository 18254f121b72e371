#pragma once

// Training loop and experiment driver: seeded sub-streams, metrics stream, checkpoint, evaluation.

#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>
#include "slotid/checkpoint.hpp"
#include "slotid/evaluate.hpp"
#include "slotid/metrics.hpp"

namespace slotid {

struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Owns the model, optimizer and random streams of one run. Each step draws a fresh batch of
/// training clips; the global step doubles as the annealing clock.
template <class T>
class Trainer {
 public:
  explicit Trainer(const ExperimentConfig& cfg)
      : cfg_(cfg),
        data_(cfg.data, cfg.train.seed),
        model_(cfg.model, cfg.train.seed),
        opt_(model_.params().trainable(), train::AdamConfig{cfg.train.lr, 0.9, 0.999, 1e-8, cfg.train.clip_norm}),
        flow_rng_(cfg.train.seed, "flow"),
        dropout_rng_(cfg.train.seed, "dropout") {}

  SlotIdModel<T>& model() { return model_; }
  const SlotIdModel<T>& model() const { return model_; }
  const DataSource& data() const { return data_; }
  long step() const { return opt_.steps(); }

  train::StepMetrics step_once() {
    const long s = opt_.steps();
    std::vector<std::uint64_t> idx(cfg_.train.batch);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = std::uint64_t(s) * cfg_.train.batch + i;
    const auto b = data_.batch<T>(Split::train, idx, cfg_.model.mode);
    const auto fs = train::make_flow_sample(b.target, flow_rng_);
    auto m = train::train_step(model_, opt_, b, fs, s, cfg_.model.prefix_dropout > 0 ? &dropout_rng_ : nullptr);
    if (!std::isfinite(m.loss)) throw NumericalFailure("non-finite loss at step " + std::to_string(s));
    return m;
  }

 private:
  ExperimentConfig cfg_;
  DataSource data_;
  SlotIdModel<T> model_;
  train::Adam<T> opt_;
  Rng flow_rng_, dropout_rng_;
};

inline std::map<std::string, double> metric_map(const train::StepMetrics& m) {
  std::map<std::string, double> out{{"loss", m.loss},   {"tau", m.tau},       {"w_mean", m.w_mean},
                                    {"w_min", m.w_min}, {"w_max", m.w_max},   {"grad_norm", m.grad_norm}};
  if (m.slot_entropy) out["slot_entropy"] = *m.slot_entropy;
  if (m.marginal_residual) out["marginal_residual"] = *m.marginal_residual;
  return out;
}

struct TrainTrace {
  std::vector<double> loss;
  std::vector<double> entropy;  // last-iteration coupling entropy per step (empty for conv_pool)
  std::uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
  double seconds = 0;

  /// Mean loss over the `window` steps ending at `step` (1-based, inclusive).
  double moving_average(std::size_t step, std::size_t window = 100) const {
    if (step == 0 || step > loss.size()) throw std::out_of_range("moving_average: step outside trace");
    const std::size_t lo = step > window ? step - window : 0;
    return std::accumulate(loss.begin() + long(lo), loss.begin() + long(step), 0.0) / double(step - lo);
  }
};

template <class T>
TrainTrace train_for(Trainer<T>& trainer, long steps, MetricsWriter* metrics, long log_every,
                     const std::function<void(const train::StepMetrics&)>& on_step = {}) {
  TrainTrace tr;
  tr.frozen_hash_before = trainer.model().params().frozen_hash();
  const auto t0 = std::chrono::steady_clock::now();
  for (long i = 0; i < steps; ++i) {
    const auto m = trainer.step_once();
    tr.loss.push_back(m.loss);
    if (m.slot_entropy) tr.entropy.push_back(*m.slot_entropy);
    if (metrics && log_every > 0 && (m.step % log_every == 0 || i + 1 == steps)) metrics->write(m.step, metric_map(m));
    if (on_step) on_step(m);
  }
  tr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  tr.frozen_hash_after = trainer.model().params().frozen_hash();
  if (metrics) metrics->flush();
  return tr;
}

struct EvalReport {
  eval::ProbeResult probe;
  eval::MatchedResult matched;
  eval::RoutingReport routing;
};

template <class T>
EvalReport evaluate(const Trainer<T>& trainer, const EvalConfig& cfg, bool with_gap = true) {
  EvalReport r;
  const long s = trainer.step();
  r.probe = eval::probe_model(trainer.model(), trainer.data(), cfg, trainer.model().config().mode, s);
  if (with_gap) r.matched = eval::matched_vs_mismatched(trainer.model(), trainer.data(), cfg, s, trainer.data().seed());
  if (trainer.model().config().mode != EncoderMode::conv_pool)
    r.routing = eval::routing_on_heldout(trainer.model(), trainer.data(), 8, s);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["probe"] = {{"r2", r.probe.r2}, {"mean_r2", r.probe.mean_r2()}, {"lambda", r.probe.lambda}};
  j["matched_vs_mismatched"] = {{"mean_gap", r.matched.gap.mean},
                                {"se", r.matched.gap.se},
                                {"pairs", r.matched.gap.n},
                                {"matched", r.matched.matched},
                                {"mismatched", r.matched.mismatched}};
  auto it = nlohmann::json::array();
  for (const auto& s : r.routing.iterations)
    it.push_back({{"entropy", s.entropy},
                  {"max_entropy", s.max_entropy},
                  {"row_residual", s.row_residual},
                  {"col_residual", s.col_residual},
                  {"slot_mass_min", s.slot_mass_min},
                  {"slot_mass_max", s.slot_mass_max},
                  {"slot_mass_target", s.slot_mass_target},
                  {"temperature", s.temperature}});
  j["routing"] = it;
  return j;
}

struct ExperimentResult {
  TrainTrace trace;
  EvalReport report;
};

/// Trains per `cfg`, writing config.ini, metrics.jsonl, checkpoint/ and eval.json under `out_dir`.
template <class T>
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                const std::string& experiment_id, bool evaluate_after = true) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "config.ini");
    os << to_ini(cfg);
  }
  Trainer<T> trainer(cfg);
  auto metrics = MetricsWriter::to_file(out_dir / "metrics.jsonl", experiment_id, cfg.train.seed);
  ExperimentResult res;
  res.trace = train_for(trainer, cfg.train.steps, &metrics, cfg.train.log_every);
  save_checkpoint(trainer.model().params(), out_dir / "checkpoint", trainer.step(), true);
  nlohmann::json summary;
  summary["experiment"] = experiment_id;
  summary["steps"] = trainer.step();
  summary["seconds"] = res.trace.seconds;
  summary["frozen_hash_before"] = res.trace.frozen_hash_before;
  summary["frozen_hash_after"] = res.trace.frozen_hash_after;
  if (evaluate_after) {
    res.report = evaluate(trainer, cfg.eval);
    summary["eval"] = to_json(res.report);
  }
  std::ofstream os(out_dir / "summary.json");
  os << summary.dump(2) << '\n';
  return res;
}

/// End-to-end gradient check of the full 64-bit model on one training batch. Zero-initialized
/// trainable tensors (adapter B matrices, FiLM maps, biases) are first moved to small random values
/// so that every path carries gradient. Coordinates are drawn uniformly over trainable tensors.
inline train::GradCheckReport model_grad_check(const ExperimentConfig& cfg, std::size_t n_coords, double h = 1e-4,
                                               long step = 500, std::size_t batch = 2) {
  const std::uint64_t seed = cfg.train.seed;
  DataSource data(cfg.data, seed);
  SlotIdModel<double> model(cfg.model, seed);
  Rng rng(seed, "gradcheck");
  std::vector<Param<double>*> params;
  for (auto& p : model.params().all()) {
    if (!p.trainable) continue;
    if (p.var.value().max_abs() == 0.0) p.var.mutable_value() = rng.normal_tensor<double>(p.var.shape(), 0.05);
    params.push_back(&p);
  }
  std::vector<std::uint64_t> idx(batch);
  std::iota(idx.begin(), idx.end(), 0);
  const auto b = data.batch<double>(Split::train, idx, cfg.model.mode);
  Rng flow(seed, "gradcheck.flow");
  const auto fs = train::make_flow_sample(b.target, flow);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < n_coords; ++i) {
    const std::size_t pi = rng.index(params.size());
    coords.emplace_back(pi, rng.index(params[pi]->var.value().size()));
  }
  auto objective = [&] { return train::evaluate_loss(model, b, fs, step, nullptr).loss; };
  return train::finite_diff_check<double>(objective, params, coords, h);
}

}  // namespace slotid
