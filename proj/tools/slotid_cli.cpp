#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "sinkhorn_bench.hpp"
#include "slotid/experiment.hpp"

using namespace slotid;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumerical = 2 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs/default";
  std::string precision = "f32";
  std::optional<long> steps;
  std::string ablation;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "INI config file (defaults apply to missing keys)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Root seed; overrides train.seed");
  app->add_option("--out-dir", c.out_dir, "Output directory");
  app->add_option("--precision", c.precision, "Floating point precision")->check(CLI::IsMember({"f32", "f64"}));
  app->add_option("--steps", c.steps, "Training steps; overrides train.steps");
  app->add_option("--ablation", c.ablation, "Encoder mode (full|conv_pool|shuffled)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.steps) cfg.train.steps = *c.steps;
  if (!c.ablation.empty()) cfg.model.mode = parse_mode(c.ablation);
  validate(cfg);
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << j.dump(2) << '\n';
}

json summarize(const std::string& id, const ExperimentResult& r) {
  json j;
  j["experiment"] = id;
  j["final_loss_ma100"] = r.trace.loss.empty() ? 0.0 : r.trace.moving_average(r.trace.loss.size());
  j["seconds"] = r.trace.seconds;
  j["eval"] = to_json(r.report);
  return j;
}

template <class T>
int cmd_train(const Common& c, bool evaluate_after) {
  const auto cfg = resolve(c);
  const std::string id = "train-" + to_string(cfg.model.mode) + "-seed" + std::to_string(cfg.train.seed);
  const auto r = run_experiment<T>(cfg, c.out_dir, id, evaluate_after);
  std::cout << id << ": " << r.trace.loss.size() << " steps in " << r.trace.seconds << " s";
  if (!r.trace.loss.empty()) std::cout << ", final MA100 loss " << r.trace.moving_average(r.trace.loss.size());
  std::cout << '\n';
  return kOk;
}

template <class T>
int cmd_eval(const Common& c, const std::string& checkpoint) {
  const auto cfg = resolve(c);
  Trainer<T> trainer(cfg);
  const fs::path ckpt = checkpoint.empty() ? fs::path(c.out_dir) / "checkpoint" : fs::path(checkpoint);
  const long step = load_checkpoint(trainer.model().params(), ckpt);
  EvalReport rep;
  {
    // Evaluate at the checkpoint's annealing step.
    ad::NoGradGuard ng;
    rep.probe = eval::probe_model(trainer.model(), trainer.data(), cfg.eval, cfg.model.mode, step);
    rep.matched = eval::matched_vs_mismatched(trainer.model(), trainer.data(), cfg.eval, step, cfg.train.seed);
    if (cfg.model.mode != EncoderMode::conv_pool)
      rep.routing = eval::routing_on_heldout(trainer.model(), trainer.data(), 8, step);
  }
  auto j = to_json(rep);
  j["step"] = step;
  write_json(fs::path(c.out_dir) / "eval.json", j);
  std::cout << "probe mean R2 " << rep.probe.mean_r2() << ", matched-vs-mismatched gap " << rep.matched.gap.mean
            << " (se " << rep.matched.gap.se << ")\n";
  return kOk;
}

template <class T>
int cmd_ablate(const Common& c, std::size_t n_seeds) {
  auto base = resolve(c);
  std::vector<EncoderMode> modes{EncoderMode::full, EncoderMode::conv_pool, EncoderMode::shuffled};
  if (!c.ablation.empty()) modes = {parse_mode(c.ablation)};
  json out = json::array();
  for (std::size_t k = 0; k < n_seeds; ++k) {
    const std::uint64_t seed = base.train.seed + k;
    for (auto m : modes) {
      auto cfg = base;
      cfg.model.mode = m;
      cfg.train.seed = seed;
      const std::string id = "ablate-" + to_string(m) + "-seed" + std::to_string(seed);
      const auto r = run_experiment<T>(cfg, fs::path(c.out_dir) / to_string(m) / ("seed" + std::to_string(seed)), id);
      auto s = summarize(id, r);
      s["mode"] = to_string(m);
      s["seed"] = seed;
      s["dynamic_r2"] = r.report.probe.mean_r2({synth::kDynamicDims.begin(), synth::kDynamicDims.end()});
      std::cout << id << ": probe mean R2 " << r.report.probe.mean_r2() << ", dynamic R2 " << s["dynamic_r2"] << '\n';
      out.push_back(s);
    }
  }
  write_json(fs::path(c.out_dir) / "ablation.json", out);
  return kOk;
}

int cmd_generate(const Common& c, std::size_t count, const std::string& split_name) {
  const auto cfg = resolve(c);
  const Split split = split_name == "heldout" ? Split::heldout : Split::train;
  DataSource data(cfg.data, cfg.train.seed);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  std::ofstream index(dir / "index.jsonl");
  for (std::size_t i = 0; i < count; ++i) {
    const auto ex = data.example(split, i);
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    const std::string s = stem;
    io::save(dir / (s + "_reference_frames.slid"), ex.reference.frames);
    io::save(dir / (s + "_reference_latents.slid"), data.reference_latents(ex, cfg.model.mode, split, i));
    io::save(dir / (s + "_target_latents.slid"), data.latents(ex.target));
    io::save(dir / (s + "_anchor_image.slid"), ex.anchor_image);
    io::save(dir / (s + "_anchor_latents.slid"), data.anchor_latents(ex.anchor_image));
    json row{{"index", i},
             {"split", split_name},
             {"identity", ex.identity.values},
             {"program", ex.program},
             {"anchor_frame", synth::select_anchor_frame(ex.reference)},
             {"prefix", s}};
    index << row.dump() << '\n';
  }
  std::cout << "wrote " << count << " examples to " << dir << '\n';
  return kOk;
}

int cmd_sinkhorn_bench(const Common& c, std::size_t instances) {
  const auto cfg = resolve(c);
  Rng rng(cfg.train.seed, "sinkhorn-bench");
  const auto bench = bench::run_sinkhorn_bench(rng, instances);
  json rows = json::array();
  for (const auto& in : bench.instances)
    rows.push_back({{"S", in.s}, {"L", in.l}, {"iters", in.iters}, {"linf_vs_ipf", in.linf_vs_ipf},
                    {"residual_at_100", in.residual_at_100}});
  const double worst_ipf = bench.max_linf_vs_ipf, worst_residual = bench.max_residual_at_100;
  // Throughput at the reader's working size.
  const std::size_t S = cfg.model.slots, L = 128;
  auto big = rng.normal_tensor<double>(Shape{8, S, L});
  const auto t1 = std::chrono::steady_clock::now();
  for (int k = 0; k < 20; ++k) ot::sinkhorn_log(ad::constant(big), cfg.model.sinkhorn.n_iters);
  const double per_call =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count() / 20.0;
  json out{{"instances", rows},
           {"max_linf_vs_ipf", worst_ipf},
           {"max_residual_at_100", worst_residual},
           {"seconds", bench.seconds},
           {"batch8_S_L128_seconds_per_call", per_call}};
  write_json(fs::path(c.out_dir) / "sinkhorn_bench.json", out);
  std::cout << "max |log-domain - IPF| " << worst_ipf << ", max marginal residual at 100 iterations "
            << worst_residual << ", " << per_call * 1e3 << " ms per (8 x " << S << " x " << L << ") solve\n";
  return kOk;
}

int cmd_grad_check(const Common& c, std::size_t coords, double h, double tol) {
  if (c.precision != "f64") std::cout << "note: gradient checks always run in 64-bit\n";
  const auto cfg = resolve(c);
  const auto rep = model_grad_check(cfg, coords, h);
  json rows = json::array();
  for (const auto& k : rep.coords)
    rows.push_back({{"param", k.param}, {"index", k.index}, {"analytic", k.analytic}, {"numeric", k.numeric},
                    {"rel_error", k.rel_error}});
  write_json(fs::path(c.out_dir) / "grad_check.json", {{"coords", rows}, {"max_rel_error", rep.max_rel_error}});
  std::cout << "max relative error over " << rep.coords.size() << " coordinates: " << rep.max_rel_error << '\n';
  return rep.max_rel_error <= tol ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slot-routed identity conditioning on synthetic clips"};
  app.require_subcommand(1);
  Common common;
  std::size_t count = 16, instances = 50, coords = 50, seeds = 1;
  std::string split = "train", checkpoint;
  double h = 1e-4, tol = 1e-4;

  auto* gen = app.add_subcommand("generate-data", "Render clips and write tensor files plus index.jsonl");
  add_common(gen, common);
  gen->add_option("--count", count, "Number of examples");
  gen->add_option("--split", split, "Index space")->check(CLI::IsMember({"train", "heldout"}));

  auto* tr = app.add_subcommand("train", "Train and write metrics, checkpoint and summary");
  add_common(tr, common);
  bool no_eval = false;
  tr->add_flag("--no-eval", no_eval, "Skip held-out evaluation after training");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on held-out clips");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory (default <out-dir>/checkpoint)");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate each encoder mode under identical seeds");
  add_common(ab, common);
  ab->add_option("--seeds", seeds, "Number of consecutive seeds starting at --seed")->check(CLI::PositiveNumber);

  auto* sb = app.add_subcommand("sinkhorn-bench", "Compare the log-domain solver with a plain-domain oracle");
  add_common(sb, common);
  sb->add_option("--instances", instances, "Random instances");

  auto* gc = app.add_subcommand("grad-check", "Central-difference check of the full 64-bit model");
  add_common(gc, common);
  gc->add_option("--coords", coords, "Random coordinates");
  gc->add_option("--step-size", h, "Finite-difference step size");
  gc->add_option("--tol", tol, "Maximum accepted relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  const bool f64 = common.precision == "f64";
  try {
    if (gen->parsed()) return cmd_generate(common, count, split);
    if (tr->parsed()) return f64 ? cmd_train<double>(common, !no_eval) : cmd_train<float>(common, !no_eval);
    if (ev->parsed()) return f64 ? cmd_eval<double>(common, checkpoint) : cmd_eval<float>(common, checkpoint);
    if (ab->parsed()) return f64 ? cmd_ablate<double>(common, seeds) : cmd_ablate<float>(common, seeds);
    if (sb->parsed()) return cmd_sinkhorn_bench(common, instances);
    if (gc->parsed()) return cmd_grad_check(common, coords, h, tol);
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const ot::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
