#pragma once

// Dual-source identity conditioning and the frozen toy video backbone it feeds.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "slotid/latent_tokens.hpp"
#include "slotid/slot_reader.hpp"

namespace slotid::cond {

using ad::Var;

inline void check_gate(double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("gate weight must lie in [0, 1]");
}

/// Multiplies each batch item of x (B, ...) by its own scalar.
template <class T>
Var<T> scale_per_item(const Var<T>& x, const std::vector<double>& s) {
  if (s.size() != x.dim(0)) throw ShapeError("scale_per_item: one scalar per batch item expected");
  Shape shape(x.ndim(), 1);
  shape[0] = s.size();
  Tensor<T> f(shape);
  for (std::size_t i = 0; i < s.size(); ++i) f[i] = static_cast<T>(s[i]);
  return ad::mul(x, ad::constant(std::move(f)));
}

template <class T>
struct GatedTokens {
  Var<T> image;     // w * C_img
  Var<T> identity;  // (1 - w) * C_id
};

/// C_id -> (1 - w) C_id, C_img -> w C_img, with one gate per batch item.
template <class T>
GatedTokens<T> gate_tokens(const Var<T>& c_id, const Var<T>& c_img, const std::vector<double>& w) {
  std::vector<double> wi(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    check_gate(w[i]);
    wi[i] = 1.0 - w[i];
  }
  return {scale_per_item(c_img, w), scale_per_item(c_id, wi)};
}

template <class T>
GatedTokens<T> gate_tokens(const Var<T>& c_id, const Var<T>& c_img, double w) {
  return gate_tokens(c_id, c_img, std::vector<double>(c_id.dim(0), w));
}

/// g = (1 - w) g_vid + w g_img, per batch item.
template <class T>
Var<T> fuse_global(const Var<T>& g_vid, const Var<T>& g_img, const std::vector<double>& w) {
  std::vector<double> wi(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    check_gate(w[i]);
    wi[i] = 1.0 - w[i];
  }
  return ad::add(scale_per_item(g_vid, wi), scale_per_item(g_img, w));
}

template <class T>
Var<T> fuse_global(const Var<T>& g_vid, const Var<T>& g_img, double w) {
  return fuse_global(g_vid, g_img, std::vector<double>(g_vid.dim(0), w));
}

/// Gate as a function of flow time: t = 1 is pure noise (earliest denoising stage) and leans on the image anchor.
inline double gate_schedule(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("gate_schedule: t must lie in [0, 1]");
  return t;
}

/// Per-token keep mask (B, N, 1): each token survives independently with probability 1 - p.
inline Tensor<double> prefix_keep_mask(std::size_t batch, std::size_t tokens, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("prefix dropout probability must lie in [0, 1)");
  Tensor<double> m(Shape{batch, tokens, 1});
  for (auto& v : m.vec()) v = rng.bernoulli(p) ? 0.0 : 1.0;
  return m;
}

/// Zeroes whole prefix tokens during training; identity at inference. No rescaling of survivors.
template <class T>
Var<T> prefix_dropout(const Var<T>& prefix, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("prefix dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return prefix;
  return ad::mul(prefix, ad::constant(prefix_keep_mask(prefix.dim(0), prefix.dim(1), p, rng).template cast<T>()));
}

template <class T>
struct Film {
  Var<T> gamma_w, gamma_b, beta_w, beta_b;

  static Film create(ParamStore<T>& store, const std::string& name, std::size_t d, bool trainable) {
    Film f;
    f.gamma_w = store.zeros(name + ".gamma.weight", Shape{d, d}, trainable);
    f.gamma_b = store.zeros(name + ".gamma.bias", Shape{d}, trainable);
    f.beta_w = store.zeros(name + ".beta.weight", Shape{d, d}, trainable);
    f.beta_b = store.zeros(name + ".beta.bias", Shape{d}, trainable);
    return f;
  }

  /// features (B, L, D) <- (1 + gamma(g)) * features + beta(g), g is (B, D).
  Var<T> operator()(const Var<T>& features, const Var<T>& g) const {
    const std::size_t b = g.dim(0), d = g.dim(1);
    auto gamma = ad::reshape(ad::linear(g, gamma_w, gamma_b), Shape{b, 1, d});
    auto beta = ad::reshape(ad::linear(g, beta_w, beta_b), Shape{b, 1, d});
    return ad::add(ad::add(features, ad::mul(features, gamma)), beta);
  }
};

/// Frozen projection with a trainable low-rank correction: y = x W^T + b + (alpha / r) (x A) B.
template <class T>
struct LoraLinear {
  Var<T> weight, bias;  // frozen, (out, in) and (out)
  Var<T> a, b;          // (in, r) and (r, out)
  double alpha = 16.0;
  bool enabled = true;

  std::size_t rank() const { return a.dim(1); }

  static LoraLinear create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                           std::size_t rank, double alpha, bool enabled, double base_std, Rng& rng) {
    if (rank == 0) throw std::invalid_argument("LoRA rank must be >= 1");
    LoraLinear l;
    l.weight = store.normal(name + ".weight", Shape{out, in}, base_std, false, rng);
    l.bias = store.zeros(name + ".bias", Shape{out}, false);
    l.alpha = alpha;
    l.enabled = enabled;
    if (enabled) {
      l.a = store.normal(name + ".lora_a", Shape{in, rank}, 1.0 / std::sqrt(double(in)), true, rng);
      l.b = store.zeros(name + ".lora_b", Shape{rank, out}, true);
    }
    return l;
  }

  Var<T> operator()(const Var<T>& x) const {
    auto y = ad::linear(x, weight, bias);
    if (!enabled) return y;
    auto delta = ad::matmul_right(ad::matmul_right(x, a), b);
    return ad::add(y, ad::scale(delta, static_cast<T>(alpha / double(rank()))));
  }
};

/// Stand-alone LoRA projection in the (in, out) weight convention: y = x W + (alpha / r) x A B.
template <class T>
Var<T> lora_linear(const Var<T>& x, const Var<T>& w, const Var<T>& a, const Var<T>& b, double alpha) {
  const std::size_t r = a.dim(1);
  if (r == 0) throw std::invalid_argument("LoRA rank must be >= 1");
  auto delta = ad::matmul_right(ad::matmul_right(x, a), b);
  return ad::add(ad::matmul_right(x, w), ad::scale(delta, static_cast<T>(alpha / double(r))));
}

/// Image stream: single-frame latent -> K anchor tokens via patch embedding and attention pooling.
template <class T>
struct AnchorEncoder {
  tokens::PatchEmbed<T> embed;
  Var<T> queries;            // (K, D)
  Var<T> summary_w, summary_b;

  static AnchorEncoder create(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t d,
                              std::size_t k, tokens::PatchSize spatial, bool trainable, Rng& rng) {
    AnchorEncoder e;
    e.embed = tokens::PatchEmbed<T>::create(store, name + ".embed", channels, d, {1, spatial.h, spatial.w}, trainable,
                                            rng);
    e.queries = store.normal(name + ".queries", Shape{k, d}, 1.0 / std::sqrt(double(d)), trainable, rng);
    e.summary_w = store.normal(name + ".summary.weight", Shape{d, d}, 1.0 / std::sqrt(double(d)), trainable, rng);
    e.summary_b = store.zeros(name + ".summary.bias", Shape{d}, trainable);
    return e;
  }

  std::size_t num_tokens() const { return queries.dim(0); }

  /// z_img (B, C, 1, H', W') -> C_img (B, K, D).
  Var<T> operator()(const Var<T>& z_img) const {
    if (z_img.ndim() != 5 || z_img.dim(2) != 1) throw ShapeError("encode_anchor expects a single-frame latent");
    auto x = embed(z_img).data;
    const std::size_t b = x.dim(0), d = x.dim(2), k = num_tokens();
    auto q = ad::add(ad::constant(Tensor<T>(Shape{b, k, d})), ad::reshape(queries, Shape{1, k, d}));
    auto att = ad::softmax(reader::scores(q, x));
    return ad::bmm(att, x);
  }

  Var<T> summary(const Var<T>& c_img) const { return reader::global_summary(c_img, summary_w, summary_b); }
};

template <class T>
struct ConditionBundle {
  Var<T> prefix;  // (B, K + S, D), image tokens first
  Var<T> text;    // (B, N_text, D)
  Var<T> g;       // (B, D)
  std::vector<double> w;
};

/// Sinusoidal features of a scalar.
template <class T>
Tensor<T> sinusoid(const std::vector<double>& values, std::size_t d, double max_period = 10000.0) {
  Tensor<T> out(Shape{values.size(), d});
  const std::size_t half = d / 2;
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(max_period) * double(k) / double(half));
      out[i * d + k] = static_cast<T>(std::cos(values[i] * f));
      out[i * d + half + k] = static_cast<T>(std::sin(values[i] * f));
    }
  return out;
}

/// Fixed 3-D sinusoidal position table (L, D) over token coordinates.
template <class T>
Tensor<T> position_table(const std::vector<tokens::Coord>& coords, std::size_t d) {
  Tensor<T> out(Shape{coords.size(), d});
  const std::size_t group = d / 3 / 2 * 2;
  for (std::size_t l = 0; l < coords.size(); ++l) {
    const double pos[3] = {double(coords[l].t), double(coords[l].y), double(coords[l].x)};
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t k = 0; k < group / 2; ++k) {
        const double f = std::pow(100.0, -2.0 * double(k) / double(group));
        out[l * d + a * group + 2 * k] = static_cast<T>(std::sin(pos[a] * f));
        out[l * d + a * group + 2 * k + 1] = static_cast<T>(std::cos(pos[a] * f));
      }
  }
  return out;
}

struct BackboneConfig {
  std::size_t width = 128;
  std::size_t blocks = 8;
  std::size_t heads = 8;
  std::size_t lora_rank = 32;
  double lora_alpha = 16.0;
  bool lora_on_output = true;
  double film_fraction = 0.5;  // FiLM on the last ceil(fraction * blocks) blocks
  double out_init_std = 0.0883883476483184;  // frozen output head scale, 1/sqrt(128)
  bool final_norm = false;  // parameter-free LayerNorm before the output head
  std::size_t vocab = 16;
};

template <class T>
struct BackboneBlock {
  Var<T> ln1_g, ln1_b, sa_wq, sa_bq, sa_wk, sa_bk, sa_wv, sa_bv, sa_wo, sa_bo;
  Var<T> ln2_g, ln2_b, ca_wq, ca_bq;
  LoraLinear<T> ca_k, ca_v, ca_o;
  Var<T> ln3_g, ln3_b, w1, b1, w2, b2;
  bool has_film = false;
  Film<T> film;
};

/// Frozen transformer denoiser over latent patches; only LoRA adapters and FiLM maps are trainable.
template <class T>
struct ToyBackbone {
  BackboneConfig cfg;
  tokens::PatchSize patch;
  std::size_t channels = 4;
  Var<T> in_w, in_b, time_w, time_b, out_w, out_b, text_table;
  std::vector<BackboneBlock<T>> blocks;

  static ToyBackbone create(ParamStore<T>& store, const BackboneConfig& cfg, std::size_t channels,
                            tokens::PatchSize patch, Rng& rng) {
    if (cfg.width % cfg.heads) throw ShapeError("backbone: head count must divide the width");
    ToyBackbone bb;
    bb.cfg = cfg;
    bb.patch = patch;
    bb.channels = channels;
    const std::size_t d = cfg.width, pin = channels * patch.t * patch.h * patch.w;
    const double s = 1.0 / std::sqrt(double(d));
    const double res = s / std::sqrt(2.0 * double(cfg.blocks));
    bb.in_w = store.normal("backbone.in.weight", Shape{d, pin}, 1.0 / std::sqrt(double(pin)), false, rng);
    bb.in_b = store.zeros("backbone.in.bias", Shape{d}, false);
    bb.time_w = store.normal("backbone.time.weight", Shape{d, d}, s, false, rng);
    bb.time_b = store.zeros("backbone.time.bias", Shape{d}, false);
    bb.text_table = store.normal("backbone.text_table", Shape{cfg.vocab, d}, 1.0, false, rng);
    const std::size_t film_blocks =
        static_cast<std::size_t>(std::ceil(cfg.film_fraction * double(cfg.blocks) - 1e-9));
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      const std::string n = "backbone.block" + std::to_string(i);
      BackboneBlock<T> b;
      b.ln1_g = store.ones(n + ".ln1.gamma", Shape{d}, false);
      b.ln1_b = store.zeros(n + ".ln1.beta", Shape{d}, false);
      b.sa_wq = store.normal(n + ".self.wq", Shape{d, d}, s, false, rng);
      b.sa_bq = store.zeros(n + ".self.bq", Shape{d}, false);
      b.sa_wk = store.normal(n + ".self.wk", Shape{d, d}, s, false, rng);
      b.sa_bk = store.zeros(n + ".self.bk", Shape{d}, false);
      b.sa_wv = store.normal(n + ".self.wv", Shape{d, d}, s, false, rng);
      b.sa_bv = store.zeros(n + ".self.bv", Shape{d}, false);
      b.sa_wo = store.normal(n + ".self.wo", Shape{d, d}, res, false, rng);
      b.sa_bo = store.zeros(n + ".self.bo", Shape{d}, false);
      b.ln2_g = store.ones(n + ".ln2.gamma", Shape{d}, false);
      b.ln2_b = store.zeros(n + ".ln2.beta", Shape{d}, false);
      b.ca_wq = store.normal(n + ".cross.wq", Shape{d, d}, s, false, rng);
      b.ca_bq = store.zeros(n + ".cross.bq", Shape{d}, false);
      b.ca_k = LoraLinear<T>::create(store, n + ".cross.k", d, d, cfg.lora_rank, cfg.lora_alpha, true, s, rng);
      b.ca_v = LoraLinear<T>::create(store, n + ".cross.v", d, d, cfg.lora_rank, cfg.lora_alpha, true, s, rng);
      b.ca_o = LoraLinear<T>::create(store, n + ".cross.o", d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_on_output,
                                     res, rng);
      b.ln3_g = store.ones(n + ".ln3.gamma", Shape{d}, false);
      b.ln3_b = store.zeros(n + ".ln3.beta", Shape{d}, false);
      b.w1 = store.normal(n + ".mlp.w1", Shape{4 * d, d}, s, false, rng);
      b.b1 = store.zeros(n + ".mlp.b1", Shape{4 * d}, false);
      b.w2 = store.normal(n + ".mlp.w2", Shape{d, 4 * d}, 0.5 * res, false, rng);
      b.b2 = store.zeros(n + ".mlp.b2", Shape{d}, false);
      b.has_film = i + film_blocks >= cfg.blocks;
      if (b.has_film) b.film = Film<T>::create(store, n + ".film", d, true);
      bb.blocks.push_back(std::move(b));
    }
    bb.out_w = store.normal("backbone.out.weight", Shape{pin, d}, cfg.out_init_std, false, rng);
    bb.out_b = store.zeros("backbone.out.bias", Shape{pin}, false);
    return bb;
  }

  /// Embeds prompt token ids (B, N) through the frozen table.
  Var<T> embed_text(const std::vector<std::vector<std::size_t>>& prompts) const {
    if (prompts.empty()) throw std::invalid_argument("embed_text: empty batch");
    const std::size_t n = prompts[0].size(), d = cfg.width;
    Tensor<T> out(Shape{prompts.size(), n, d});
    for (std::size_t b = 0; b < prompts.size(); ++b) {
      if (prompts[b].size() != n) throw ShapeError("embed_text: ragged prompts");
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t id = prompts[b][i];
        if (id >= cfg.vocab) throw std::out_of_range("embed_text: token id outside vocabulary");
        std::copy_n(text_table.value().data() + id * d, d, out.data() + (b * n + i) * d);
      }
    }
    return ad::constant(std::move(out));
  }

  /// Velocity prediction for z_t (B, C, T, H', W') at flow times t (one per batch item).
  Var<T> forward(const Var<T>& z_t, const std::vector<double>& t, const ConditionBundle<T>& c) const {
    const auto& s = z_t.shape();
    if (s.size() != 5 || s[1] != channels) throw ShapeError("backbone: bad latent shape " + shape_str(s));
    const std::size_t b = s[0], d = cfg.width;
    if (t.size() != b || c.prefix.dim(0) != b || c.text.dim(0) != b || c.g.dim(0) != b)
      throw ShapeError("backbone: batch mismatch between latents, times and conditioning");
    auto tok = tokens::patchify(z_t, patch);
    const auto coords = tokens::grid_coords(s[2] / patch.t, s[3] / patch.h, s[4] / patch.w);
    std::vector<double> tt(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) tt[i] = 1000.0 * t[i];
    auto temb = ad::linear(ad::constant(sinusoid<T>(tt, d)), time_w, time_b);
    Var<T> x = ad::linear(tok, in_w, in_b);
    x = ad::add(x, ad::constant(position_table<T>(coords, d).reshaped(Shape{1, coords.size(), d})));
    x = ad::add(x, ad::reshape(temb, Shape{b, 1, d}));
    auto ctx = ad::concat<T>({c.prefix, c.text}, 1);
    for (const auto& blk : blocks) {
      auto h = ad::layer_norm(x, blk.ln1_g, blk.ln1_b);
      auto sa = ad::attention(ad::linear(h, blk.sa_wq, blk.sa_bq), ad::linear(h, blk.sa_wk, blk.sa_bk),
                              ad::linear(h, blk.sa_wv, blk.sa_bv), cfg.heads);
      x = ad::add(x, ad::linear(sa, blk.sa_wo, blk.sa_bo));
      h = ad::layer_norm(x, blk.ln2_g, blk.ln2_b);
      auto ca = ad::attention(ad::linear(h, blk.ca_wq, blk.ca_bq), blk.ca_k(ctx), blk.ca_v(ctx), cfg.heads);
      x = ad::add(x, blk.ca_o(ca));
      h = ad::layer_norm(x, blk.ln3_g, blk.ln3_b);
      x = ad::add(x, ad::linear(ad::gelu(ad::linear(h, blk.w1, blk.b1)), blk.w2, blk.b2));
      if (blk.has_film) x = blk.film(x, c.g);
    }
    if (cfg.final_norm) x = ad::layer_norm(x, Var<T>(), Var<T>());
    auto out = ad::linear(x, out_w, out_b);
    return tokens::unpatchify(out, channels, s[2], s[3], s[4], patch);
  }
};

}  // namespace slotid::cond
