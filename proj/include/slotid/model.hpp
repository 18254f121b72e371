#pragma once

// Full conditioning stack: reference-clip identity encoder (slot reader or the conv-pool
// ablation), image-anchor encoder, gating, and the frozen toy backbone.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "slotid/conditioning.hpp"

namespace slotid {

using ad::Var;

enum class EncoderMode { full, conv_pool, shuffled };

inline std::string to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::full: return "full";
    case EncoderMode::conv_pool: return "conv_pool";
    case EncoderMode::shuffled: return "shuffled";
  }
  return "?";
}

inline EncoderMode parse_mode(const std::string& s) {
  if (s == "full") return EncoderMode::full;
  if (s == "conv_pool") return EncoderMode::conv_pool;
  if (s == "shuffled") return EncoderMode::shuffled;
  throw std::invalid_argument("unknown ablation mode: " + s + " (expected full|conv_pool|shuffled)");
}

struct ModelConfig {
  std::size_t latent_channels = 4;
  std::size_t width = 128;
  tokens::PatchSize patch{2, 2, 2};
  std::size_t stsa_layers = 2;
  std::size_t stsa_heads = 16;
  std::size_t slots = 6;
  std::size_t iterations = 3;
  std::size_t anchor_tokens = 2;
  ot::SinkhornConfig sinkhorn;
  cond::BackboneConfig backbone;
  double prefix_dropout = 0.05;
  EncoderMode mode = EncoderMode::full;
};

/// Ablation A: three kernel-2 stride-2 3-D convolutions, global average pooling, linear to S x D.
template <class T>
struct ConvPoolEncoder {
  std::vector<tokens::PatchEmbed<T>> convs;
  Var<T> head_w, head_b;
  std::size_t slots = 0, width = 0;

  static ConvPoolEncoder create(ParamStore<T>& store, const std::string& name, std::size_t in_channels,
                                std::size_t width, std::size_t slots, Rng& rng) {
    ConvPoolEncoder e;
    e.slots = slots;
    e.width = width;
    const std::size_t chans[4] = {in_channels, width / 2, width, width};
    for (std::size_t i = 0; i < 3; ++i)
      e.convs.push_back(tokens::PatchEmbed<T>::create(store, name + ".conv" + std::to_string(i), chans[i],
                                                      chans[i + 1], {2, 2, 2}, true, rng));
    e.head_w = store.normal(name + ".head.weight", Shape{slots * width, width}, 1.0 / std::sqrt(double(width)), true,
                            rng);
    e.head_b = store.zeros(name + ".head.bias", Shape{slots * width}, true);
    return e;
  }

  /// stacked latents (B, 2C, T, H', W') -> C_id (B, S, D).
  Var<T> operator()(const Var<T>& vol) const {
    Var<T> x = vol;
    for (const auto& conv : convs) {
      const auto s = x.shape();
      if (s[2] < 2 || s[3] < 2 || s[4] < 2)
        throw ShapeError("conv_pool encoder: volume too small for three stride-2 layers");
      auto pad = [](std::size_t n) { return n / 2 * 2; };
      if (pad(s[2]) != s[2] || pad(s[3]) != s[3] || pad(s[4]) != s[4])
        throw ShapeError("conv_pool encoder: odd extent " + shape_str(s));
      auto tok = ad::relu(conv(x).data);
      const std::size_t nt = s[2] / 2, nh = s[3] / 2, nw = s[4] / 2;
      x = ad::permute(ad::reshape(tok, Shape{s[0], nt, nh, nw, tok.dim(2)}), {0, 4, 1, 2, 3});
    }
    const std::size_t b = x.dim(0), c = x.dim(1);
    auto pooled = ad::reshape(ad::mean_axis(ad::reshape(x, Shape{b, c, x.value().size() / (b * c)}), 2), Shape{b, c});
    return ad::reshape(ad::linear(pooled, head_w, head_b), Shape{b, slots, width});
  }
};

template <class T>
struct IdentityEncoding {
  Var<T> c_id;   // (B, S, D)
  Var<T> g_vid;  // (B, D)
  std::vector<reader::IterationDiagnostics> diagnostics;
  std::vector<Tensor<T>> couplings;
};

/// Everything the backbone sees from one batch, except the noisy latents.
template <class T>
struct ConditionInputs {
  Tensor<T> reference;  // (B, C, T, H', W') reference clip latents
  Tensor<T> anchor;     // (B, C, 1, H', W') neutralized anchor latents
  std::vector<std::vector<std::size_t>> prompts;
};

template <class T>
class SlotIdModel {
 public:
  SlotIdModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.sinkhorn.validate();
    Rng enc_rng(seed, "init.encoder");
    Rng anc_rng(seed, "init.anchor");
    Rng bb_rng(seed, "init.backbone");
    const std::size_t c = cfg_.latent_channels, d = cfg_.width;
    if (cfg_.mode == EncoderMode::conv_pool) {
      conv_pool_ = ConvPoolEncoder<T>::create(store_, "encoder.convpool", 2 * c, d, cfg_.slots, enc_rng);
      Rng sum_rng(seed, "init.encoder.summary");
      summary_w_ = store_.normal("encoder.summary.weight", Shape{d, d}, 1.0 / std::sqrt(double(d)), true, sum_rng);
      summary_b_ = store_.zeros("encoder.summary.bias", Shape{d}, true);
    } else {
      embed_ = tokens::PatchEmbed<T>::create(store_, "encoder.embed", 2 * c, d, cfg_.patch, true, enc_rng);
      stsa_ = tokens::Stsa<T>::create(store_, "encoder.stsa", d, cfg_.stsa_layers, cfg_.stsa_heads, true, enc_rng);
      reader_ = reader::ReaderParams<T>::create(store_, "encoder.reader", cfg_.slots, d, cfg_.iterations, true,
                                                enc_rng);
    }
    anchor_ = cond::AnchorEncoder<T>::create(store_, "anchor", c, d, cfg_.anchor_tokens, cfg_.patch, true, anc_rng);
    prefix_img_g_ = store_.ones("prefix.ln_img.gamma", Shape{d}, true);
    prefix_img_b_ = store_.zeros("prefix.ln_img.beta", Shape{d}, true);
    prefix_id_g_ = store_.ones("prefix.ln_id.gamma", Shape{d}, true);
    prefix_id_b_ = store_.zeros("prefix.ln_id.beta", Shape{d}, true);
    backbone_ = cond::ToyBackbone<T>::create(store_, cfg_.backbone, c, cfg_.patch, bb_rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const cond::ToyBackbone<T>& backbone() const { return backbone_; }
  const cond::AnchorEncoder<T>& anchor_encoder() const { return anchor_; }
  const reader::ReaderParams<T>& reader_params() const { return reader_; }

  /// Reference clip latents (B, C, T, H', W') -> identity slots and video summary.
  IdentityEncoding<T> encode_identity(const Tensor<T>& z_ref, long step) const {
    auto stacked = ad::constant(tokens::stack_latents(z_ref, tokens::temporal_diff(z_ref)));
    IdentityEncoding<T> e;
    if (cfg_.mode == EncoderMode::conv_pool) {
      e.c_id = conv_pool_(stacked);
      e.g_vid = reader::global_summary(e.c_id, summary_w_, summary_b_);
      return e;
    }
    auto seq = stsa_(embed_(stacked));
    auto rd = reader::read(seq.data, step, cfg_.sinkhorn, reader_);
    e.c_id = rd.identity;
    e.g_vid = reader::global_summary(e.c_id, reader_.summary_w, reader_.summary_b);
    e.diagnostics = std::move(rd.diagnostics);
    e.couplings = std::move(rd.couplings);
    return e;
  }

  /// Assembles [w LN(C_img); (1 - w) LN(C_id)] with optional prefix dropout, the text tokens and the fused g.
  cond::ConditionBundle<T> condition(const IdentityEncoding<T>& id, const Tensor<T>& z_img,
                                     const std::vector<std::vector<std::size_t>>& prompts,
                                     const std::vector<double>& w, Rng* dropout_rng) const {
    auto c_img = anchor_(ad::constant(z_img));
    auto g_img = anchor_.summary(c_img);
    auto gated = cond::gate_tokens(ad::layer_norm(id.c_id, prefix_id_g_, prefix_id_b_),
                                   ad::layer_norm(c_img, prefix_img_g_, prefix_img_b_), w);
    cond::ConditionBundle<T> b;
    b.prefix = ad::concat<T>({gated.image, gated.identity}, 1);
    if (dropout_rng) b.prefix = cond::prefix_dropout(b.prefix, cfg_.prefix_dropout, *dropout_rng, true);
    b.text = backbone_.embed_text(prompts);
    b.g = cond::fuse_global(id.g_vid, g_img, w);
    b.w = w;
    return b;
  }

  struct Output {
    Var<T> velocity;
    IdentityEncoding<T> identity;
  };

  /// Velocity prediction for noisy latents at flow times t.
  Output predict(const Tensor<T>& z_t, const std::vector<double>& t, const ConditionInputs<T>& in, long step,
                 Rng* dropout_rng) const {
    std::vector<double> w(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) w[i] = cond::gate_schedule(t[i]);
    auto id = encode_identity(in.reference, step);
    auto bundle = condition(id, in.anchor, in.prompts, w, dropout_rng);
    return {backbone_.forward(ad::constant(z_t), t, bundle), std::move(id)};
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  tokens::PatchEmbed<T> embed_;
  tokens::Stsa<T> stsa_;
  reader::ReaderParams<T> reader_;
  ConvPoolEncoder<T> conv_pool_;
  Var<T> summary_w_, summary_b_;
  cond::AnchorEncoder<T> anchor_;
  Var<T> prefix_img_g_, prefix_img_b_, prefix_id_g_, prefix_id_b_;
  cond::ToyBackbone<T> backbone_;
};

}  // namespace slotid
