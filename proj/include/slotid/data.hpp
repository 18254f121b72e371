#pragma once

// Seeded batches of (reference clip, anchor image, target clip, prompt) in normalized latent space.

#include <array>
#include <cstdint>
#include <vector>

#include "slotid/model.hpp"
#include "slotid/synthgen.hpp"

namespace slotid {

struct DataConfig {
  std::size_t frames = 16;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t shuffle_frames = 16;  // K frames sampled for the orderless-reference ablation
  std::uint64_t codec_seed = 0x5EEDC0DECULL;
};

struct Example {
  synth::IdentityCode identity;
  synth::SyntheticClip reference;
  synth::SyntheticClip target;
  Tensor<double> anchor_image;  // (3, H, W)
  std::size_t program = 0;
};

template <class T>
struct Batch {
  ConditionInputs<T> inputs;
  Tensor<T> target;  // (B, C, T, H', W')
  std::vector<synth::IdentityCode> identities;
};

/// Named index spaces so training and evaluation never share clips.
enum class Split : std::uint64_t { train = 1, heldout = 2, calibration = 3 };

class DataSource {
 public:
  DataSource(DataConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed), codec_(cfg.codec_seed) { calibrate(); }

  const DataConfig& config() const { return cfg_; }
  const synth::ToyCodec& codec() const { return codec_; }
  std::uint64_t seed() const { return seed_; }
  const std::array<double, synth::kLatentChannels>& shift() const { return shift_; }
  const std::array<double, synth::kLatentChannels>& scale() const { return scale_; }

  /// Example `index` of a split; the identity seed can be overridden to pair clips of one identity.
  Example example(Split split, std::uint64_t index) const {
    const std::uint64_t base = derive_seed(seed_, "data", static_cast<std::uint64_t>(split) * 0x100000000ULL + index);
    Example ex;
    ex.identity = synth::gen_identity(derive_seed(base, "identity"));
    ex.program = Rng(base, "program").index(synth::kMotionPrograms);
    const std::size_t ref_program = Rng(base, "ref_program").index(synth::kMotionPrograms);
    ex.reference = synth::render_clip(ex.identity, synth::gen_motion(derive_seed(base, "ref"), cfg_.frames, ref_program),
                                      cfg_.frames, cfg_.height, cfg_.width);
    ex.target = synth::render_clip(ex.identity, synth::gen_motion(derive_seed(base, "target"), cfg_.frames, ex.program),
                                   cfg_.frames, cfg_.height, cfg_.width);
    ex.anchor_image = synth::neutralize_background(ex.reference, synth::select_anchor_frame(ex.reference));
    return ex;
  }

  /// Normalized latents of a clip: (C, T, H', W').
  Tensor<double> latents(const synth::SyntheticClip& clip) const { return normalize(codec_.encode(clip.frames)); }
  Tensor<double> anchor_latents(const Tensor<double>& image) const {
    return normalize(codec_.encode(synth::as_single_frame(image)));
  }

  /// Reference latents as the encoder sees them under a given ablation mode.
  Tensor<double> reference_latents(const Example& ex, EncoderMode mode, Split split, std::uint64_t index) const {
    if (mode != EncoderMode::shuffled) return latents(ex.reference);
    Rng rng(seed_, "shuffle", static_cast<std::uint64_t>(split) * 0x100000000ULL + index);
    return latents(synth::shuffle_reference(ex.reference, cfg_.shuffle_frames, rng));
  }

  template <class T>
  Batch<T> batch(Split split, const std::vector<std::uint64_t>& indices, EncoderMode mode) const {
    std::vector<Example> exs;
    exs.reserve(indices.size());
    for (auto i : indices) exs.push_back(example(split, i));
    return assemble<T>(exs, indices, split, mode);
  }

  /// Builds a batch where item i uses the target of targets[i] but the reference/anchor of references[i].
  template <class T>
  Batch<T> assemble(const std::vector<Example>& exs, const std::vector<std::uint64_t>& indices, Split split,
                    EncoderMode mode, const std::vector<const Example*>& references = {}) const {
    Batch<T> b;
    std::vector<Tensor<double>> ref, anc, tgt;
    for (std::size_t i = 0; i < exs.size(); ++i) {
      const Example& r = references.empty() ? exs[i] : *references[i];
      ref.push_back(reference_latents(r, mode, split, indices[i]));
      anc.push_back(anchor_latents(r.anchor_image));
      tgt.push_back(latents(exs[i].target));
      b.inputs.prompts.push_back({kBosToken, exs[i].program});
      b.identities.push_back(exs[i].identity);
    }
    b.inputs.reference = stack<T>(ref);
    b.inputs.anchor = stack<T>(anc);
    b.target = stack<T>(tgt);
    return b;
  }

  static constexpr std::size_t kBosToken = 8;

  template <class T>
  static Tensor<T> stack(const std::vector<Tensor<double>>& items) {
    Shape s = items.at(0).shape();
    s.insert(s.begin(), items.size());
    Tensor<T> out(s);
    const std::size_t n = items[0].size();
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].size() != n) throw ShapeError("stack: ragged items");
      for (std::size_t k = 0; k < n; ++k) out[i * n + k] = static_cast<T>(items[i][k]);
    }
    return out;
  }

 private:
  Tensor<double> normalize(Tensor<double> z) const {
    const std::size_t c = z.dim(0), n = z.size() / c;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < n; ++k) z[ch * n + k] = (z[ch * n + k] - shift_[ch]) / scale_[ch];
    return z;
  }

  // Per-channel latent statistics over a fixed calibration set (independent of the run seed).
  void calibrate() {
    std::array<double, synth::kLatentChannels> s1{}, s2{};
    double count = 0;
    for (std::uint64_t i = 0; i < 32; ++i) {
      const std::uint64_t base = derive_seed(0xCA11B7A7EULL, "calibration", i);
      const auto id = synth::gen_identity(base);
      const auto clip = synth::render_clip(id, synth::gen_motion(base, cfg_.frames, i % synth::kMotionPrograms),
                                           cfg_.frames, cfg_.height, cfg_.width);
      const auto z = codec_.encode(clip.frames);
      const std::size_t n = z.size() / z.dim(0);
      for (std::size_t ch = 0; ch < z.dim(0); ++ch)
        for (std::size_t k = 0; k < n; ++k) {
          s1[ch] += z[ch * n + k];
          s2[ch] += z[ch * n + k] * z[ch * n + k];
        }
      count += double(n);
    }
    for (std::size_t ch = 0; ch < synth::kLatentChannels; ++ch) {
      shift_[ch] = s1[ch] / count;
      scale_[ch] = std::sqrt(std::max(s2[ch] / count - shift_[ch] * shift_[ch], 1e-12));
    }
  }

  DataConfig cfg_;
  std::uint64_t seed_;
  synth::ToyCodec codec_;
  std::array<double, synth::kLatentChannels> shift_{}, scale_{};
};

}  // namespace slotid
