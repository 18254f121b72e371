#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "slotid/ops.hpp"
#include "slotid/params.hpp"

namespace slotid::tokens {

using ad::Var;

/// Patch grid coordinates of one token.
struct Coord {
  std::size_t t = 0, y = 0, x = 0;
  bool operator==(const Coord&) const = default;
};

template <class T>
struct TokenSequence {
  Var<T> data;                // (B, L, D)
  std::vector<Coord> coords;  // L entries, row-major over (t, y, x)

  std::size_t batch() const { return data.dim(0); }
  std::size_t length() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

struct PatchSize {
  std::size_t t = 2, h = 2, w = 2;
};

/// Zero slice at the first frame, forward differences after it. Z is (B, C, T, H, W).
template <class T>
Tensor<T> temporal_diff(const Tensor<T>& z) {
  if (z.ndim() != 5) throw ShapeError("temporal_diff expects (B, C, T, H, W), got " + shape_str(z.shape()));
  const std::size_t outer = z.dim(0) * z.dim(1), t_len = z.dim(2), plane = z.dim(3) * z.dim(4);
  Tensor<T> d(z.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 1; t < t_len; ++t) {
      const T* cur = z.data() + (o * t_len + t) * plane;
      const T* prev = cur - plane;
      T* out = d.data() + (o * t_len + t) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[p] = cur[p] - prev[p];
    }
  return d;
}

/// Channel concatenation [Z; dZ] -> (B, 2C, T, H, W).
template <class T>
Tensor<T> stack_latents(const Tensor<T>& z, const Tensor<T>& dz) {
  if (z.shape() != dz.shape() || z.ndim() != 5)
    throw ShapeError("stack_latents: shapes differ " + shape_str(z.shape()) + " vs " + shape_str(dz.shape()));
  const std::size_t b = z.dim(0), block = z.size() / b;
  Shape s = z.shape();
  s[1] *= 2;
  Tensor<T> out(s);
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(z.data() + i * block, block, out.data() + 2 * i * block);
    std::copy_n(dz.data() + i * block, block, out.data() + (2 * i + 1) * block);
  }
  return out;
}

/// Token count of a strided 3-D patching.
inline std::size_t token_count(std::size_t t, std::size_t h, std::size_t w, PatchSize p) {
  return (t / p.t) * (h / p.h) * (w / p.w);
}

inline void check_divisible(const Shape& s, PatchSize p) {
  if (s.size() != 5) throw ShapeError("expected (B, C, T, H, W), got " + shape_str(s));
  if (p.t == 0 || p.h == 0 || p.w == 0 || s[2] % p.t || s[3] % p.h || s[4] % p.w)
    throw ShapeError("volume " + shape_str(s) + " is not divisible by the patch size");
}

inline std::vector<Coord> grid_coords(std::size_t nt, std::size_t nh, std::size_t nw) {
  std::vector<Coord> c;
  c.reserve(nt * nh * nw);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t y = 0; y < nh; ++y)
      for (std::size_t x = 0; x < nw; ++x) c.push_back({t, y, x});
  return c;
}

/// (B, C, T, H, W) -> (B, L, C*pt*ph*pw); each patch vector is ordered (c, dt, dy, dx) like a conv kernel.
template <class T>
Var<T> patchify(const Var<T>& vol, PatchSize p) {
  check_divisible(vol.shape(), p);
  const auto& s = vol.shape();
  const std::size_t b = s[0], c = s[1], nt = s[2] / p.t, nh = s[3] / p.h, nw = s[4] / p.w;
  auto x = ad::reshape(vol, Shape{b, c, nt, p.t, nh, p.h, nw, p.w});
  x = ad::permute(x, {0, 2, 4, 6, 1, 3, 5, 7});
  return ad::reshape(x, Shape{b, nt * nh * nw, c * p.t * p.h * p.w});
}

/// Inverse of patchify: (B, L, C*pt*ph*pw) -> (B, C, T, H, W).
template <class T>
Var<T> unpatchify(const Var<T>& tok, std::size_t channels, std::size_t t_len, std::size_t h, std::size_t w,
                  PatchSize p) {
  const std::size_t b = tok.dim(0), nt = t_len / p.t, nh = h / p.h, nw = w / p.w;
  if (tok.dim(1) != nt * nh * nw || tok.dim(2) != channels * p.t * p.h * p.w)
    throw ShapeError("unpatchify: token shape " + shape_str(tok.shape()) + " does not match target volume");
  auto x = ad::reshape(tok, Shape{b, nt, nh, nw, channels, p.t, p.h, p.w});
  x = ad::permute(x, {0, 4, 1, 5, 2, 6, 3, 7});
  return ad::reshape(x, Shape{b, channels, t_len, h, w});
}

/// Strided 3-D patch embedding. The kernel (D, C_in, pt, ph, pw) is stored flattened as (D, C_in*pt*ph*pw).
template <class T>
struct PatchEmbed {
  PatchSize patch;
  std::size_t in_channels = 0;
  Var<T> weight;  // (D, C_in*pt*ph*pw)
  Var<T> bias;    // (D)

  static PatchEmbed create(ParamStore<T>& store, const std::string& name, std::size_t in_channels,
                           std::size_t width, PatchSize patch, bool trainable, Rng& rng) {
    PatchEmbed pe;
    pe.patch = patch;
    pe.in_channels = in_channels;
    const std::size_t fan_in = in_channels * patch.t * patch.h * patch.w;
    pe.weight = store.normal(name + ".weight", Shape{width, fan_in}, 1.0 / std::sqrt(double(fan_in)), trainable, rng);
    pe.bias = store.zeros(name + ".bias", Shape{width}, trainable);
    return pe;
  }

  std::size_t width() const { return weight.dim(0); }

  TokenSequence<T> operator()(const Var<T>& vol) const {
    if (vol.dim(1) != in_channels) throw ShapeError("patch_embed: channel count mismatch");
    TokenSequence<T> seq;
    seq.data = ad::linear(patchify(vol, patch), weight, bias);
    seq.coords = grid_coords(vol.dim(2) / patch.t, vol.dim(3) / patch.h, vol.dim(4) / patch.w);
    return seq;
  }
};

/// Rotation tables for 3-D rotary embedding over the first `rotated` channels, split into three
/// equal groups (t, y, x); each group uses standard rotary frequencies with base 10000.
template <class T>
void rope3d_tables(const std::vector<Coord>& coords, std::size_t rotated, Tensor<T>& cos_t, Tensor<T>& sin_t) {
  if (rotated == 0 || rotated % 6 != 0) throw ShapeError("rope3d: rotated width must be a positive multiple of 6");
  const std::size_t group = rotated / 3, half = group / 2, pairs = rotated / 2;
  cos_t = Tensor<T>(Shape{coords.size(), pairs});
  sin_t = Tensor<T>(Shape{coords.size(), pairs});
  for (std::size_t l = 0; l < coords.size(); ++l) {
    const std::array<double, 3> pos{double(coords[l].t), double(coords[l].y), double(coords[l].x)};
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, -2.0 * double(i) / double(group));
        const double ang = pos[a] * freq;
        cos_t[l * pairs + a * half + i] = static_cast<T>(std::cos(ang));
        sin_t[l * pairs + a * half + i] = static_cast<T>(std::sin(ang));
      }
  }
}

/// 3-D RoPE over all D channels; D must be divisible by 6.
template <class T>
TokenSequence<T> rope3d(const TokenSequence<T>& x) {
  Tensor<T> c, s;
  rope3d_tables<T>(x.coords, x.width(), c, s);
  return {ad::rotate_pairs(x.data, c, s), x.coords};
}

/// Largest rotary width usable for D channels (channels past it are left unrotated).
inline std::size_t rope_width(std::size_t d) { return d / 6 * 6; }

template <class T>
struct StsaLayer {
  Var<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;

  static StsaLayer create(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t layers,
                          bool trainable, Rng& rng) {
    StsaLayer l;
    const double s = 1.0 / std::sqrt(double(d));
    const double out_s = s / std::sqrt(2.0 * double(layers));
    l.ln1_g = store.ones(name + ".ln1.gamma", Shape{d}, trainable);
    l.ln1_b = store.zeros(name + ".ln1.beta", Shape{d}, trainable);
    l.wq = store.normal(name + ".attn.wq", Shape{d, d}, s, trainable, rng);
    l.bq = store.zeros(name + ".attn.bq", Shape{d}, trainable);
    l.wk = store.normal(name + ".attn.wk", Shape{d, d}, s, trainable, rng);
    l.bk = store.zeros(name + ".attn.bk", Shape{d}, trainable);
    l.wv = store.normal(name + ".attn.wv", Shape{d, d}, s, trainable, rng);
    l.bv = store.zeros(name + ".attn.bv", Shape{d}, trainable);
    l.wo = store.normal(name + ".attn.wo", Shape{d, d}, out_s, trainable, rng);
    l.bo = store.zeros(name + ".attn.bo", Shape{d}, trainable);
    l.ln2_g = store.ones(name + ".ln2.gamma", Shape{d}, trainable);
    l.ln2_b = store.zeros(name + ".ln2.beta", Shape{d}, trainable);
    l.w1 = store.normal(name + ".mlp.w1", Shape{4 * d, d}, s, trainable, rng);
    l.b1 = store.zeros(name + ".mlp.b1", Shape{4 * d}, trainable);
    l.w2 = store.normal(name + ".mlp.w2", Shape{d, 4 * d}, 0.5 * out_s, trainable, rng);
    l.b2 = store.zeros(name + ".mlp.b2", Shape{d}, trainable);
    return l;
  }
};

/// Pre-norm transformer stack with full self-attention over all tokens, 3-D RoPE on queries/keys.
template <class T>
struct Stsa {
  std::vector<StsaLayer<T>> layers;
  std::size_t heads = 16;

  static Stsa create(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t n_layers,
                     std::size_t heads, bool trainable, Rng& rng) {
    if (heads == 0 || d % heads) throw ShapeError("STSA: head count must divide the channel width");
    Stsa s;
    s.heads = heads;
    for (std::size_t i = 0; i < n_layers; ++i)
      s.layers.push_back(StsaLayer<T>::create(store, name + "." + std::to_string(i), d, n_layers, trainable, rng));
    return s;
  }

  TokenSequence<T> operator()(const TokenSequence<T>& in) const {
    const std::size_t d = in.width();
    if (d % heads) throw ShapeError("STSA: head count must divide the channel width");
    Tensor<T> cos_t, sin_t;
    rope3d_tables<T>(in.coords, rope_width(d), cos_t, sin_t);
    Var<T> x = in.data;
    for (const auto& l : layers) {
      auto h = ad::layer_norm(x, l.ln1_g, l.ln1_b);
      auto q = ad::rotate_pairs(ad::linear(h, l.wq, l.bq), cos_t, sin_t);
      auto k = ad::rotate_pairs(ad::linear(h, l.wk, l.bk), cos_t, sin_t);
      auto v = ad::linear(h, l.wv, l.bv);
      x = ad::add(x, ad::linear(ad::attention(q, k, v, heads), l.wo, l.bo));
      auto m = ad::gelu(ad::linear(ad::layer_norm(x, l.ln2_g, l.ln2_b), l.w1, l.b1));
      x = ad::add(x, ad::linear(m, l.w2, l.b2));
    }
    return {x, in.coords};
  }
};

}  // namespace slotid::tokens
