#pragma once

// Experiment configuration: INI-style "key = value" with one section per module.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "slotid/data.hpp"

namespace slotid {

struct TrainConfig {
  long steps = 2000;
  std::size_t batch = 8;
  double lr = 1e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  long log_every = 1;
};

struct EvalConfig {
  std::size_t probe_train = 256;
  std::size_t probe_test = 128;
  std::size_t pairs = 24;
  std::size_t noise_draws = 4;
  std::size_t probe_folds = 5;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class V>
void read_key(const boost::property_tree::ptree& pt, const std::string& key, V& v) {
  if (auto node = pt.get_optional<std::string>(key)) {
    std::istringstream is(*node);
    V parsed{};
    if constexpr (std::is_same_v<V, bool>) is >> std::boolalpha;
    if (!(is >> parsed) || !(is >> std::ws).eof()) throw ConfigError("bad value for " + key + ": '" + *node + "'");
    v = parsed;
  }
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  c.model.sinkhorn.validate();
  need(c.train.steps >= 0, "train.steps must be non-negative");
  need(c.train.batch > 0, "train.batch must be positive");
  need(c.train.lr >= 0, "train.lr must be non-negative");
  need(c.model.slots > 0 && c.model.iterations > 0, "reader.slots and reader.iterations must be positive");
  need(c.model.prefix_dropout >= 0 && c.model.prefix_dropout < 1, "conditioning.prefix_dropout must be in [0, 1)");
  need(c.model.latent_channels == synth::kLatentChannels, "model.latent_channels must match the codec (4)");
  need(c.model.width % 2 == 0 && c.model.width >= 6, "model.width must be even and at least 6");
  need(c.data.height % 8 == 0 && c.data.width % 8 == 0, "data.height and data.width must be multiples of 8");
  need(c.data.frames >= 2, "data.frames must be at least 2");
  need(c.data.shuffle_frames >= 1, "data.shuffle_frames must be positive");
  need(c.eval.pairs >= 1 && c.eval.probe_folds >= 2, "eval.pairs >= 1 and eval.probe_folds >= 2 required");
}

/// Overlays values from an INI tree onto `c`. Unknown keys are rejected.
inline void apply_ini(const boost::property_tree::ptree& pt, ExperimentConfig& c) {
  using detail::read_key;
  static const std::map<std::string, std::set<std::string>> known = {
      {"data", {"frames", "height", "width", "shuffle_frames", "codec_seed"}},
      {"model", {"latent_channels", "width", "patch_t", "patch_h", "patch_w", "mode"}},
      {"stsa", {"layers", "heads"}},
      {"reader", {"slots", "iterations"}},
      {"sinkhorn", {"tau_start", "tau_end", "t_decay", "n_iters", "eps"}},
      {"conditioning", {"anchor_tokens", "prefix_dropout"}},
      {"backbone",
       {"width", "blocks", "heads", "lora_rank", "lora_alpha", "lora_on_output", "film_fraction", "out_init_std",
        "final_norm", "vocab"}},
      {"train", {"steps", "batch", "lr", "clip_norm", "seed", "log_every"}},
      {"eval", {"probe_train", "probe_test", "pairs", "noise_draws", "probe_folds"}},
  };
  for (const auto& [section, tree] : pt) {
    auto it = known.find(section);
    if (it == known.end()) throw ConfigError("unknown config section [" + section + "]");
    for (const auto& [key, _] : tree)
      if (!it->second.count(key)) throw ConfigError("unknown config key " + section + "." + key);
  }
  auto& d = c.data;
  read_key(pt, "data.frames", d.frames);
  read_key(pt, "data.height", d.height);
  read_key(pt, "data.width", d.width);
  read_key(pt, "data.shuffle_frames", d.shuffle_frames);
  read_key(pt, "data.codec_seed", d.codec_seed);
  auto& m = c.model;
  read_key(pt, "model.latent_channels", m.latent_channels);
  read_key(pt, "model.width", m.width);
  read_key(pt, "model.patch_t", m.patch.t);
  read_key(pt, "model.patch_h", m.patch.h);
  read_key(pt, "model.patch_w", m.patch.w);
  if (auto mode = pt.get_optional<std::string>("model.mode")) m.mode = parse_mode(*mode);
  read_key(pt, "stsa.layers", m.stsa_layers);
  read_key(pt, "stsa.heads", m.stsa_heads);
  read_key(pt, "reader.slots", m.slots);
  read_key(pt, "reader.iterations", m.iterations);
  read_key(pt, "sinkhorn.tau_start", m.sinkhorn.tau_start);
  read_key(pt, "sinkhorn.tau_end", m.sinkhorn.tau_end);
  read_key(pt, "sinkhorn.t_decay", m.sinkhorn.t_decay);
  read_key(pt, "sinkhorn.n_iters", m.sinkhorn.n_iters);
  read_key(pt, "sinkhorn.eps", m.sinkhorn.eps);
  read_key(pt, "conditioning.anchor_tokens", m.anchor_tokens);
  read_key(pt, "conditioning.prefix_dropout", m.prefix_dropout);
  auto& b = m.backbone;
  read_key(pt, "backbone.width", b.width);
  read_key(pt, "backbone.blocks", b.blocks);
  read_key(pt, "backbone.heads", b.heads);
  read_key(pt, "backbone.lora_rank", b.lora_rank);
  read_key(pt, "backbone.lora_alpha", b.lora_alpha);
  read_key(pt, "backbone.lora_on_output", b.lora_on_output);
  read_key(pt, "backbone.film_fraction", b.film_fraction);
  read_key(pt, "backbone.out_init_std", b.out_init_std);
  read_key(pt, "backbone.final_norm", b.final_norm);
  read_key(pt, "backbone.vocab", b.vocab);
  auto& t = c.train;
  read_key(pt, "train.steps", t.steps);
  read_key(pt, "train.batch", t.batch);
  read_key(pt, "train.lr", t.lr);
  read_key(pt, "train.clip_norm", t.clip_norm);
  read_key(pt, "train.seed", t.seed);
  read_key(pt, "train.log_every", t.log_every);
  auto& e = c.eval;
  read_key(pt, "eval.probe_train", e.probe_train);
  read_key(pt, "eval.probe_test", e.probe_test);
  read_key(pt, "eval.pairs", e.pairs);
  read_key(pt, "eval.noise_draws", e.noise_draws);
  read_key(pt, "eval.probe_folds", e.probe_folds);
  if (b.width != m.width) throw ConfigError("backbone.width must equal model.width");
}

inline ExperimentConfig parse_config(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream is(text);
  try {
    boost::property_tree::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  ExperimentConfig c;
  apply_ini(pt, c);
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Serializes every field, so a run directory records the exact configuration used.
inline std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& m = c.model;
  const auto& b = m.backbone;
  os << "[data]\nframes = " << c.data.frames << "\nheight = " << c.data.height << "\nwidth = " << c.data.width
     << "\nshuffle_frames = " << c.data.shuffle_frames << "\ncodec_seed = " << c.data.codec_seed << "\n\n";
  os << "[model]\nlatent_channels = " << m.latent_channels << "\nwidth = " << m.width << "\npatch_t = " << m.patch.t
     << "\npatch_h = " << m.patch.h << "\npatch_w = " << m.patch.w << "\nmode = " << to_string(m.mode) << "\n\n";
  os << "[stsa]\nlayers = " << m.stsa_layers << "\nheads = " << m.stsa_heads << "\n\n";
  os << "[reader]\nslots = " << m.slots << "\niterations = " << m.iterations << "\n\n";
  os << "[sinkhorn]\ntau_start = " << m.sinkhorn.tau_start << "\ntau_end = " << m.sinkhorn.tau_end
     << "\nt_decay = " << m.sinkhorn.t_decay << "\nn_iters = " << m.sinkhorn.n_iters << "\neps = " << m.sinkhorn.eps
     << "\n\n";
  os << "[conditioning]\nanchor_tokens = " << m.anchor_tokens << "\nprefix_dropout = " << m.prefix_dropout << "\n\n";
  os << "[backbone]\nwidth = " << b.width << "\nblocks = " << b.blocks << "\nheads = " << b.heads
     << "\nlora_rank = " << b.lora_rank << "\nlora_alpha = " << b.lora_alpha
     << "\nlora_on_output = " << (b.lora_on_output ? "true" : "false") << "\nfilm_fraction = " << b.film_fraction
     << "\nout_init_std = " << b.out_init_std << "\nfinal_norm = " << (b.final_norm ? "true" : "false")
     << "\nvocab = " << b.vocab << "\n\n";
  os << "[train]\nsteps = " << c.train.steps << "\nbatch = " << c.train.batch << "\nlr = " << c.train.lr
     << "\nclip_norm = " << c.train.clip_norm << "\nseed = " << c.train.seed << "\nlog_every = " << c.train.log_every
     << "\n\n";
  os << "[eval]\nprobe_train = " << c.eval.probe_train << "\nprobe_test = " << c.eval.probe_test
     << "\npairs = " << c.eval.pairs << "\nnoise_draws = " << c.eval.noise_draws
     << "\nprobe_folds = " << c.eval.probe_folds << "\n";
  return os.str();
}

}  // namespace slotid
