#pragma once

// Procedural identity clips: a head-like ellipse with eyes and a mouth whose colors and
// layout come from an identity code, and whose oscillation frequencies (mouth with head nod,
// blink with head sway) are identity-dependent. Plus anchor-frame selection, background neutralization, and a frozen
// linear toy latent codec.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include "slotid/rng.hpp"
#include "slotid/tensor.hpp"

namespace slotid::synth {

inline constexpr std::size_t kIdentityDim = 8;
/// Components of IdentityCode that only drive motion (mouth/nod and blink/sway frequency).
inline constexpr std::array<std::size_t, 2> kDynamicDims{6, 7};
inline constexpr std::size_t kLatentChannels = 4;
inline constexpr std::size_t kCodecStride = 8;

struct IdentityCode {
  std::vector<double> values;

  bool operator==(const IdentityCode&) const = default;
};

struct Pose {
  double tx = 0, ty = 0, rot = 0, scale = 1.0, expr = 0;

  bool operator==(const Pose&) const = default;
};

struct MotionScript {
  std::vector<Pose> poses;
  std::size_t canonical_index = 0;

  std::size_t length() const { return poses.size(); }
};

struct SyntheticClip {
  Tensor<double> frames;              // (T, 3, H, W), values in [0, 1]
  std::vector<std::uint8_t> background;  // (T, H, W), 1 on background pixels
  IdentityCode identity;
  MotionScript motion;

  std::size_t length() const { return frames.dim(0); }
  std::size_t height() const { return frames.dim(2); }
  std::size_t width() const { return frames.dim(3); }
};

inline IdentityCode gen_identity(std::uint64_t seed, std::size_t dim = kIdentityDim) {
  Rng rng(seed, "identity");
  IdentityCode id;
  id.values.resize(dim);
  for (auto& v : id.values) v = std::clamp(rng.uniform(-1.0, 1.0), -1.0, 1.0);
  return id;
}

/// Distance of a pose from the canonical pose (0, 0, 0, 1, 0); expression phase is circular.
inline double pose_distance(const Pose& p) {
  const double e = std::fmod(std::abs(p.expr), 2 * std::numbers::pi);
  const double de = std::min(e, 2 * std::numbers::pi - e);
  return std::sqrt(p.tx * p.tx + p.ty * p.ty + p.rot * p.rot + (p.scale - 1) * (p.scale - 1) + de * de);
}

/// Number of motion programs addressable by a prompt code.
inline constexpr std::size_t kMotionPrograms = 8;

/// Smooth random motion that passes through the canonical pose at one frame.
/// `program` picks the drift direction (bit 0), rotation sense (bit 1) and scale pulsing (bit 2);
/// the seed picks amplitudes, speeds and the canonical frame.
inline MotionScript gen_motion(std::uint64_t seed, std::size_t frames, std::size_t program = 0,
                               std::optional<std::size_t> canonical = std::nullopt) {
  if (frames == 0) throw std::invalid_argument("motion script needs at least one frame");
  Rng rng(seed, "motion");
  MotionScript m;
  m.canonical_index = canonical ? *canonical : rng.index(frames);
  if (m.canonical_index >= frames) throw std::invalid_argument("canonical index outside clip");
  const double sx = (program & 1) ? -1.0 : 1.0;
  const double sr = (program & 2) ? -1.0 : 1.0;
  const double pulse = (program & 4) ? 1.0 : 0.3;
  const double ax = rng.uniform(0.04, 0.12), ay = rng.uniform(0.0, 0.06);
  const double ar = rng.uniform(0.1, 0.35), as = rng.uniform(0.05, 0.15) * pulse;
  const double wx = rng.uniform(0.5, 1.2), wy = rng.uniform(0.5, 1.5), wr = rng.uniform(0.4, 1.0),
               ws = rng.uniform(0.8, 1.6);
  const double n = static_cast<double>(frames);
  m.poses.resize(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const double u = (static_cast<double>(t) - static_cast<double>(m.canonical_index)) / n * 2 * std::numbers::pi;
    Pose& p = m.poses[t];
    p.tx = std::clamp(sx * ax * std::sin(wx * u), -0.3, 0.3);
    p.ty = std::clamp(ay * std::sin(wy * u), -0.3, 0.3);
    p.rot = sr * ar * std::sin(wr * u);
    p.scale = std::clamp(1.0 + as * std::sin(ws * u), 0.7, 1.3);
    const double dt = std::abs(static_cast<double>(t) - static_cast<double>(m.canonical_index));
    p.expr = std::numbers::pi * std::min(1.0, dt / 2.0);
  }
  return m;
}

/// Every frame at the canonical pose with a static (zero) expression.
inline MotionScript canonical_motion(std::size_t frames) {
  MotionScript m;
  m.poses.assign(frames, Pose{});
  m.canonical_index = 0;
  return m;
}

struct Appearance {
  std::array<double, 3> head;
  std::array<double, 3> eye;
  std::array<double, 3> mouth;
  double half_w, half_h;     // head semi-axes (subject units)
  double eye_spacing, eye_radius;
  double mouth_half_w;
  double mouth_freq, blink_freq;  // cycles per 16 frames
};

inline Appearance appearance_of(const IdentityCode& id) {
  if (id.values.size() != kIdentityDim) throw std::invalid_argument("identity code must have 8 components");
  const auto& v = id.values;
  Appearance a;
  a.head = {0.5 + 0.35 * v[0], 0.5 + 0.35 * v[1], 0.5 + 0.35 * v[2]};
  a.eye = {0.08, 0.15 + 0.3 * (v[5] + 1.0), 0.3};
  a.mouth = {0.65, 0.08, 0.12};
  a.half_w = 0.22 * (1.0 + 0.25 * v[3]);
  a.half_h = 0.22 * (1.0 - 0.25 * v[3]);
  a.eye_spacing = 0.085 * (1.0 + 0.35 * v[4]);
  a.eye_radius = 0.05;
  a.mouth_half_w = 0.075;
  a.mouth_freq = 2.5 + 1.5 * v[6];
  a.blink_freq = 2.5 + 1.5 * v[7];
  return a;
}

/// Identity-dependent oscillation phase at frame t.
inline double identity_phase(double cycles_per_16, std::size_t t) {
  return 2 * std::numbers::pi * cycles_per_16 * static_cast<double>(t) / 16.0;
}

/// Renders one frame into `out` (3, H, W) and `bg` (H, W).
inline void render_frame(const Appearance& a, const Pose& p, std::size_t t, std::size_t h, std::size_t w, double* out,
                         std::uint8_t* bg) {
  // Expression activity: zero at a neutral expression, saturating once the phase reaches pi.
  const double activity = std::sin(std::clamp(p.expr, 0.0, std::numbers::pi) / 2.0);
  const double mouth_open = activity * 0.5 * (1.0 - std::cos(identity_phase(a.mouth_freq, t)));
  const double blink = activity * 0.5 * (1.0 - std::cos(identity_phase(a.blink_freq, t)));
  const double mouth_half_h = 0.012 + 0.055 * mouth_open;
  const double eye_ry = a.eye_radius * (1.0 - 0.8 * blink);
  // Identity-rate head sway and nod.
  const double cx = 0.5 + p.tx + 0.05 * activity * std::sin(identity_phase(a.blink_freq, t));
  const double cy = 0.5 + p.ty + 0.05 * activity * std::sin(identity_phase(a.mouth_freq, t));
  const double cr = std::cos(p.rot), sr = std::sin(p.rot);
  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      // Subject-local coordinates.
      const double dx = (u - cx) / p.scale, dy = (v - cy) / p.scale;
      const double lx = cr * dx + sr * dy, ly = -sr * dx + cr * dy;
      std::array<double, 3> c{0.35 + 0.2 * v, 0.4 + 0.1 * u, 0.5 - 0.15 * v};
      bool subject = false;
      if ((lx * lx) / (a.half_w * a.half_w) + (ly * ly) / (a.half_h * a.half_h) <= 1.0) {
        subject = true;
        c = a.head;
        const double ey = ly + 0.06;
        for (double side : {-1.0, 1.0}) {
          const double ex = lx - side * a.eye_spacing;
          if (eye_ry > 1e-6 && (ex * ex) / (a.eye_radius * a.eye_radius) + (ey * ey) / (eye_ry * eye_ry) <= 1.0)
            c = a.eye;
        }
        if (std::abs(lx) <= a.mouth_half_w && std::abs(ly - 0.1) <= mouth_half_h) c = a.mouth;
      }
      for (std::size_t ch = 0; ch < 3; ++ch) out[ch * plane + y * w + x] = std::clamp(c[ch], 0.0, 1.0);
      bg[y * w + x] = subject ? 0 : 1;
    }
}

inline SyntheticClip render_clip(const IdentityCode& id, const MotionScript& motion, std::size_t frames,
                                 std::size_t h, std::size_t w) {
  if (frames < 2 || h == 0 || w == 0) throw std::invalid_argument("render_clip: invalid dimensions");
  if (motion.length() != frames) throw std::invalid_argument("render_clip: motion length differs from clip length");
  const Appearance a = appearance_of(id);
  SyntheticClip clip;
  clip.frames = Tensor<double>(Shape{frames, 3, h, w});
  clip.background.assign(frames * h * w, 0);
  clip.identity = id;
  clip.motion = motion;
  for (std::size_t t = 0; t < frames; ++t)
    render_frame(a, motion.poses[t], t, h, w, clip.frames.data() + t * 3 * h * w, clip.background.data() + t * h * w);
  return clip;
}

/// Frame whose pose is nearest the canonical pose; ties go to the smallest index.
inline std::size_t select_anchor_frame(const SyntheticClip& clip) {
  const auto& poses = clip.motion.poses;
  std::size_t best = 0;
  double best_d = pose_distance(poses.at(0));
  for (std::size_t t = 1; t < poses.size(); ++t) {
    const double d = pose_distance(poses[t]);
    if (d < best_d) {
      best_d = d;
      best = t;
    }
  }
  return best;
}

/// The anchor frame with every background pixel set to white. The clip itself is untouched.
inline Tensor<double> neutralize_background(const SyntheticClip& clip, std::size_t idx) {
  const std::size_t h = clip.height(), w = clip.width();
  if (idx >= clip.length()) throw std::out_of_range("neutralize_background: frame index out of range");
  Tensor<double> img(Shape{3, h, w});
  const double* src = clip.frames.data() + idx * 3 * h * w;
  const std::uint8_t* mask = clip.background.data() + idx * h * w;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) img[ch * h * w + p] = mask[p] ? 1.0 : src[ch * h * w + p];
  return img;
}

/// Uniformly spaced subsample of `count` frames, presented in a seeded random order.
inline std::vector<std::size_t> shuffled_frame_order(std::size_t frames, std::size_t count, Rng& rng) {
  if (count == 0 || count > frames) throw std::invalid_argument("shuffle: frame count must be in [1, T]");
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) idx[k] = k * frames / count;
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

/// Frame gather: output frame k is input frame order[k].
inline SyntheticClip reorder_frames(const SyntheticClip& clip, const std::vector<std::size_t>& order) {
  const std::size_t h = clip.height(), w = clip.width(), n = order.size();
  SyntheticClip out;
  out.frames = Tensor<double>(Shape{n, 3, h, w});
  out.background.resize(n * h * w);
  out.identity = clip.identity;
  out.motion.poses.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = order[k];
    std::copy_n(clip.frames.data() + t * 3 * h * w, 3 * h * w, out.frames.data() + k * 3 * h * w);
    std::copy_n(clip.background.data() + t * h * w, h * w, out.background.data() + k * h * w);
    out.motion.poses[k] = clip.motion.poses[t];
    if (t == clip.motion.canonical_index) out.motion.canonical_index = k;
  }
  return out;
}

/// Ablation B reference: uniform K-frame subsample, randomly permuted.
inline SyntheticClip shuffle_reference(const SyntheticClip& clip, std::size_t count, Rng& rng) {
  return reorder_frames(clip, shuffled_frame_order(clip.length(), count, rng));
}

/// Frozen linear codec: each 8x8x3 pixel patch maps to C latent channels through a fixed matrix with
/// orthonormal rows; decoding applies the transpose, so encode(decode(encode(x))) == encode(x).
class ToyCodec {
 public:
  explicit ToyCodec(std::uint64_t seed = 0x5EEDC0DECULL, std::size_t channels = kLatentChannels)
      : channels_(channels), patch_(3 * kCodecStride * kCodecStride), basis_(channels * patch_) {
    if (channels == 0 || channels > patch_) throw std::invalid_argument("codec channel count out of range");
    Rng rng(seed, "codec");
    for (auto& v : basis_) v = rng.normal();
    // Gram-Schmidt, twice for numerical orthogonality.
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t i = 0; i < channels_; ++i) {
        double* ri = row(i);
        for (std::size_t j = 0; j < i; ++j) {
          const double* rj = row(j);
          double d = 0;
          for (std::size_t k = 0; k < patch_; ++k) d += ri[k] * rj[k];
          for (std::size_t k = 0; k < patch_; ++k) ri[k] -= d * rj[k];
        }
        double nrm = 0;
        for (std::size_t k = 0; k < patch_; ++k) nrm += ri[k] * ri[k];
        nrm = std::sqrt(nrm);
        for (std::size_t k = 0; k < patch_; ++k) ri[k] /= nrm;
      }
  }

  std::size_t channels() const { return channels_; }

  /// frames (T, 3, H, W) -> latents (C, T, H/8, W/8).
  Tensor<double> encode(const Tensor<double>& frames) const {
    if (frames.ndim() != 4 || frames.dim(1) != 3) throw ShapeError("encode expects (T, 3, H, W)");
    const std::size_t t_len = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    if (h % kCodecStride || w % kCodecStride) throw ShapeError("encode: H and W must be divisible by 8");
    const std::size_t hh = h / kCodecStride, ww = w / kCodecStride;
    Tensor<double> z(Shape{channels_, t_len, hh, ww});
    std::vector<double> patch(patch_);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t py = 0; py < hh; ++py)
        for (std::size_t px = 0; px < ww; ++px) {
          gather(frames.data() + t * 3 * h * w, h, w, py, px, patch.data());
          for (std::size_t c = 0; c < channels_; ++c) {
            const double* r = row(c);
            double acc = 0;
            for (std::size_t k = 0; k < patch_; ++k) acc += r[k] * patch[k];
            z[((c * t_len + t) * hh + py) * ww + px] = acc;
          }
        }
    return z;
  }

  /// latents (C, T, H', W') -> frames (T, 3, 8H', 8W').
  Tensor<double> decode(const Tensor<double>& z) const {
    if (z.ndim() != 4 || z.dim(0) != channels_) throw ShapeError("decode expects (C, T, H', W')");
    const std::size_t t_len = z.dim(1), hh = z.dim(2), ww = z.dim(3);
    const std::size_t h = hh * kCodecStride, w = ww * kCodecStride;
    Tensor<double> frames(Shape{t_len, 3, h, w});
    std::vector<double> patch(patch_);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t py = 0; py < hh; ++py)
        for (std::size_t px = 0; px < ww; ++px) {
          std::fill(patch.begin(), patch.end(), 0.0);
          for (std::size_t c = 0; c < channels_; ++c) {
            const double zc = z[((c * t_len + t) * hh + py) * ww + px];
            const double* r = row(c);
            for (std::size_t k = 0; k < patch_; ++k) patch[k] += zc * r[k];
          }
          scatter(patch.data(), frames.data() + t * 3 * h * w, h, w, py, px);
        }
    return frames;
  }

 private:
  double* row(std::size_t i) { return basis_.data() + i * patch_; }
  const double* row(std::size_t i) const { return basis_.data() + i * patch_; }

  static void gather(const double* frame, std::size_t h, std::size_t w, std::size_t py, std::size_t px, double* patch) {
    std::size_t k = 0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t dy = 0; dy < kCodecStride; ++dy)
        for (std::size_t dx = 0; dx < kCodecStride; ++dx)
          patch[k++] = frame[ch * h * w + (py * kCodecStride + dy) * w + px * kCodecStride + dx];
  }
  static void scatter(const double* patch, double* frame, std::size_t h, std::size_t w, std::size_t py, std::size_t px) {
    std::size_t k = 0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t dy = 0; dy < kCodecStride; ++dy)
        for (std::size_t dx = 0; dx < kCodecStride; ++dx)
          frame[ch * h * w + (py * kCodecStride + dy) * w + px * kCodecStride + dx] = patch[k++];
  }

  std::size_t channels_;
  std::size_t patch_;
  std::vector<double> basis_;
};

/// Single image (3, H, W) as a one-frame clip tensor (1, 3, H, W).
inline Tensor<double> as_single_frame(const Tensor<double>& image) {
  return image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)});
}

/// Hand-built clip statistics used to check that identity is recoverable from the raw pixels.
/// Colors, head aspect, eye spacing and eye color come from the anchor frame; the two motion
/// components come from the total variation of mouth/eye pixel counts over time.
inline std::vector<double> clip_statistics(const SyntheticClip& clip) {
  const std::size_t t_len = clip.length(), h = clip.height(), w = clip.width();
  const std::size_t plane = h * w;
  const std::size_t anchor = select_anchor_frame(clip);
  std::vector<double> feats;

  auto pixel = [&](std::size_t t, std::size_t ch, std::size_t p) { return clip.frames[(t * 3 + ch) * plane + p]; };
  auto is_subject = [&](std::size_t t, std::size_t p) { return clip.background[t * plane + p] == 0; };

  // Head color = most common subject color at the anchor frame (approximated by the median per channel).
  std::array<double, 3> head{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    std::vector<double> vals;
    for (std::size_t p = 0; p < plane; ++p)
      if (is_subject(anchor, p)) vals.push_back(pixel(anchor, ch, p));
    if (vals.empty()) vals.push_back(0.0);
    std::nth_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(vals.size() / 2), vals.end());
    head[ch] = vals[vals.size() / 2];
    feats.push_back(head[ch]);
  }
  auto differs_from_head = [&](std::size_t t, std::size_t p) {
    double d = 0;
    for (std::size_t ch = 0; ch < 3; ++ch) d += std::abs(pixel(t, ch, p) - head[ch]);
    return d > 1e-6;
  };

  // Geometry at the anchor frame.
  double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9, cx = 0, cy = 0, n = 0;
  for (std::size_t p = 0; p < plane; ++p)
    if (is_subject(anchor, p)) {
      const double x = static_cast<double>(p % w), y = static_cast<double>(p / w);
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      cx += x, cy += y, n += 1;
    }
  cx /= std::max(n, 1.0), cy /= std::max(n, 1.0);
  feats.push_back((x1 - x0) / static_cast<double>(w));
  feats.push_back((y1 - y0) / static_cast<double>(h));
  double eye_spread = 0, eye_n = 0, eye_g = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    const double x = static_cast<double>(p % w), y = static_cast<double>(p / w);
    if (is_subject(anchor, p) && y < cy && differs_from_head(anchor, p)) {
      eye_spread += std::abs(x - cx), eye_n += 1, eye_g += pixel(anchor, 1, p);
    }
  }
  feats.push_back(eye_spread / std::max(eye_n, 1.0) / static_cast<double>(w));
  feats.push_back(eye_g / std::max(eye_n, 1.0));

  // Temporal signatures: part areas per frame, relative to the per-frame subject centroid.
  std::vector<double> mouth(t_len, 0.0), eyes(t_len, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    double fx = 0, fy = 0, fn = 0;
    for (std::size_t p = 0; p < plane; ++p)
      if (is_subject(t, p)) fx += static_cast<double>(p % w), fy += static_cast<double>(p / w), fn += 1;
    fy /= std::max(fn, 1.0);
    for (std::size_t p = 0; p < plane; ++p)
      if (is_subject(t, p) && differs_from_head(t, p)) {
        if (static_cast<double>(p / w) > fy) mouth[t] += 1; else eyes[t] += 1;
      }
  }
  for (const auto* series : {&mouth, &eyes}) {
    const auto [mn, mx] = std::minmax_element(series->begin(), series->end());
    double tv = 0;
    for (std::size_t t = 1; t < t_len; ++t) tv += std::abs((*series)[t] - (*series)[t - 1]);
    feats.push_back(tv / std::max(*mx - *mn, 1.0) / static_cast<double>(t_len));
  }
  return feats;
}

}  // namespace slotid::synth
