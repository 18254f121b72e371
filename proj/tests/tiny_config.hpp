#pragma once

#include "slotid/config.hpp"

namespace testutil {

/// A full pipeline small enough for unit tests: 4 frames of 32x32, width 12, 8 latent tokens.
inline slotid::ExperimentConfig tiny_config(std::uint64_t seed = 3) {
  slotid::ExperimentConfig c;
  c.data.frames = 4;
  c.data.height = 32;
  c.data.width = 32;
  c.data.shuffle_frames = 4;
  auto& m = c.model;
  m.width = 12;
  m.stsa_layers = 1;
  m.stsa_heads = 2;
  m.slots = 3;
  m.iterations = 2;
  m.anchor_tokens = 2;
  m.sinkhorn.t_decay = 10;
  m.backbone.width = 12;
  m.backbone.blocks = 2;
  m.backbone.heads = 2;
  m.backbone.lora_rank = 2;
  m.backbone.lora_alpha = 4;
  m.backbone.out_init_std = 0.3;
  c.train.steps = 3;
  c.train.batch = 2;
  c.train.lr = 1e-3;
  c.train.seed = seed;
  c.eval.probe_train = 20;
  c.eval.probe_test = 10;
  c.eval.pairs = 4;
  c.eval.noise_draws = 1;
  c.eval.probe_folds = 2;
  return c;
}

}  // namespace testutil
