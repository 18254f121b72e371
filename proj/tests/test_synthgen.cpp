#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "slotid/probe.hpp"
#include "slotid/synthgen.hpp"

using namespace slotid;
using namespace slotid::synth;

namespace {

SyntheticClip clip_for(std::uint64_t seed, std::size_t frames = 16, std::size_t program = 0) {
  return render_clip(gen_identity(seed), gen_motion(seed + 1000, frames, program), frames, 64, 64);
}

/// Power spectrum of a real series by direct DFT.
std::vector<double> power_spectrum(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> p(n / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) {
    double re = 0, im = 0;
    for (std::size_t t = 0; t < n; ++t) {
      re += x[t] * std::cos(2 * std::numbers::pi * k * t / n);
      im -= x[t] * std::sin(2 * std::numbers::pi * k * t / n);
    }
    p[k] = re * re + im * im;
  }
  return p;
}

/// Subject pixels whose color differs from the head color (eyes and mouth), per frame.
std::vector<double> part_area(const SyntheticClip& c) {
  const auto a = appearance_of(c.identity);
  const std::size_t plane = c.height() * c.width();
  std::vector<double> out(c.length());
  for (std::size_t t = 0; t < c.length(); ++t)
    for (std::size_t p = 0; p < plane; ++p) {
      if (c.background[t * plane + p]) continue;
      double d = 0;
      for (std::size_t ch = 0; ch < 3; ++ch) d += std::abs(c.frames[(t * 3 + ch) * plane + p] - a.head[ch]);
      out[t] += d > 1e-9 ? 1.0 : 0.0;
    }
  return out;
}

}  // namespace

TEST(Identity, DeterministicAndBounded) {
  EXPECT_EQ(gen_identity(0), gen_identity(0));
  EXPECT_NE(gen_identity(0), gen_identity(1));
  for (std::uint64_t s = 0; s < 200; ++s)
    for (double v : gen_identity(s).values) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Motion, CanonicalPoseAndRanges) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto m = gen_motion(s, 16, s % kMotionPrograms);
    ASSERT_EQ(m.length(), 16u);
    EXPECT_EQ(m.poses[m.canonical_index], (Pose{0, 0, 0, 1.0, 0}));
    for (const auto& p : m.poses) {
      EXPECT_LE(std::abs(p.tx), 0.3);
      EXPECT_LE(std::abs(p.ty), 0.3);
      EXPECT_GE(p.scale, 0.7);
      EXPECT_LE(p.scale, 1.3);
      EXPECT_GE(p.expr, 0.0);
      EXPECT_LT(p.expr, 2 * std::numbers::pi);
    }
  }
  EXPECT_THROW(gen_motion(1, 4, 0, 4), std::invalid_argument);
}

TEST(Render, DeterministicAndInRange) {
  const auto a = clip_for(3), b = clip_for(3);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.background, b.background);
  for (double v : a.frames.vec()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Render, StaticMotionGivesIdenticalFrames) {
  const auto c = render_clip(gen_identity(5), canonical_motion(8), 8, 32, 32);
  const std::size_t f = 3 * 32 * 32;
  for (std::size_t t = 1; t < 8; ++t)
    for (std::size_t k = 0; k < f; ++k) ASSERT_EQ(c.frames[t * f + k], c.frames[k]);
}

TEST(Render, DifferentIdentitiesDiffer) {
  const auto m = gen_motion(1, 16);
  const auto a = render_clip(gen_identity(1), m, 16, 64, 64), b = render_clip(gen_identity(2), m, 16, 64, 64);
  double d = 0;
  for (std::size_t i = 0; i < a.frames.size(); ++i) d += (a.frames[i] - b.frames[i]) * (a.frames[i] - b.frames[i]);
  EXPECT_GT(d, 0.0);
}

TEST(Render, MaskCoversExactlyTheBackground) {
  // Pixels outside the subject ellipse carry the identity-independent background gradient.
  const auto m = gen_motion(9, 16);
  const auto a = render_clip(gen_identity(10), m, 16, 64, 64), b = render_clip(gen_identity(11), m, 16, 64, 64);
  const std::size_t plane = 64 * 64;
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t p = 0; p < plane; ++p)
      if (a.background[t * plane + p] && b.background[t * plane + p]) {
        for (std::size_t ch = 0; ch < 3; ++ch)
          ASSERT_EQ(a.frames[(t * 3 + ch) * plane + p], b.frames[(t * 3 + ch) * plane + p]);
      }
}

TEST(Render, InvalidDimensions) {
  EXPECT_THROW(render_clip(gen_identity(1), gen_motion(1, 1), 1, 64, 64), std::invalid_argument);
  EXPECT_THROW(render_clip(gen_identity(1), gen_motion(1, 8), 16, 64, 64), std::invalid_argument);
}

TEST(Anchor, SelectsCanonicalFrame) {
  auto c = clip_for(4);
  MotionScript m;
  m.poses.assign(16, Pose{0.1, 0, 0.2, 1.1, 1.0});
  m.poses[5] = Pose{};
  m.canonical_index = 5;
  c.motion = m;
  EXPECT_EQ(select_anchor_frame(c), 5u);
  c.motion = canonical_motion(16);
  EXPECT_EQ(select_anchor_frame(c), 0u);
}

TEST(Anchor, MatchesExhaustiveScan) {
  const auto c = clip_for(7);
  std::size_t best = 0;
  for (std::size_t t = 0; t < c.length(); ++t) {
    const auto& p = c.motion.poses[t];
    const auto& q = c.motion.poses[best];
    auto d = [](const Pose& x) {
      const double e = std::min(x.expr, 2 * std::numbers::pi - x.expr);
      return x.tx * x.tx + x.ty * x.ty + x.rot * x.rot + (x.scale - 1) * (x.scale - 1) + e * e;
    };
    if (d(p) < d(q)) best = t;
  }
  EXPECT_EQ(select_anchor_frame(c), best);
}

TEST(Neutralize, SetsBackgroundToWhiteOnly) {
  auto c = clip_for(8);
  const std::size_t plane = 64 * 64, idx = 2;
  const auto img = neutralize_background(c, idx);
  std::size_t changed = 0, masked = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    masked += c.background[idx * plane + p];
    bool diff = false;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double src = c.frames[(idx * 3 + ch) * plane + p];
      if (c.background[idx * plane + p]) {
        EXPECT_EQ(img[ch * plane + p], 1.0);
      } else {
        EXPECT_EQ(img[ch * plane + p], src);
      }
      diff = diff || img[ch * plane + p] != src;
    }
    changed += diff;
  }
  EXPECT_EQ(changed, masked);  // background is never pure white in this renderer
  EXPECT_THROW(neutralize_background(c, 16), std::out_of_range);
}

TEST(Neutralize, CheckerMaskChangesExactlyMaskedPixels) {
  auto c = clip_for(12, 2);
  const std::size_t plane = 64 * 64;
  for (std::size_t p = 0; p < plane; ++p) c.background[p] = ((p % 64) + (p / 64)) % 2;
  const auto img = neutralize_background(c, 0);
  std::size_t changed = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    bool diff = false;
    for (std::size_t ch = 0; ch < 3; ++ch) diff = diff || img[ch * plane + p] != c.frames[ch * plane + p];
    changed += diff;
  }
  EXPECT_EQ(changed, plane / 2);
  for (std::size_t p = 0; p < plane; ++p) c.background[p] = 0;
  const auto same = neutralize_background(c, 0);
  for (std::size_t k = 0; k < 3 * plane; ++k) EXPECT_EQ(same[k], c.frames[k]);
}

TEST(Codec, ProjectionIdempotence) {
  ToyCodec codec(11);
  const auto c = clip_for(13, 4);
  const auto z = codec.encode(c.frames);
  EXPECT_EQ(z.shape(), (Shape{4, 4, 8, 8}));
  const auto z2 = codec.encode(codec.decode(z));
  EXPECT_LE(max_abs_diff(z, z2) / z.max_abs(), 1e-5);
}

TEST(Codec, LinearAndDeterministic) {
  ToyCodec a(11), b(11), other(12);
  Tensor<double> zero(Shape{2, 3, 16, 16});
  const auto z0 = a.encode(zero);
  for (double v : z0.vec()) EXPECT_EQ(v, 0.0);
  const auto c = clip_for(14, 2);
  EXPECT_EQ(a.encode(c.frames), b.encode(c.frames));
  EXPECT_NE(a.encode(c.frames), other.encode(c.frames));
  EXPECT_THROW(a.encode(Tensor<double>(Shape{1, 3, 12, 16})), ShapeError);
}

TEST(Shuffle, SubsampleIsUniformAndBijective) {
  Rng rng(1);
  auto order = shuffled_frame_order(16, 8, rng);
  std::sort(order.begin(), order.end());
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(order[k], 2 * k);
  Rng r1(2);
  EXPECT_EQ(shuffled_frame_order(16, 1, r1), std::vector<std::size_t>{0});
  EXPECT_THROW(shuffled_frame_order(4, 5, r1), std::invalid_argument);
}

TEST(Shuffle, ReorderGathersFrames) {
  const auto c = clip_for(15, 4);
  const auto r = reorder_frames(c, {2, 0, 3, 1});
  const std::size_t f = 3 * 64 * 64;
  for (std::size_t k = 0; k < f; ++k) {
    EXPECT_EQ(r.frames[k], c.frames[2 * f + k]);
    EXPECT_EQ(r.frames[3 * f + k], c.frames[f + k]);
  }
  const auto id = reorder_frames(c, {0, 1, 2, 3});
  EXPECT_EQ(id.frames, c.frames);
}

TEST(MotionSignature, ShufflingChangesTemporalSpectrum) {
  const auto c = clip_for(16);
  const auto series = part_area(c);
  EXPECT_EQ(power_spectrum(part_area(reorder_frames(c, [] {
              std::vector<std::size_t> o(16);
              std::iota(o.begin(), o.end(), 0);
              return o;
            }()))),
            power_spectrum(series));
  Rng rng(5);
  const auto shuffled = shuffle_reference(c, 16, rng);
  const auto a = power_spectrum(series), b = power_spectrum(part_area(shuffled));
  double diff = 0;
  for (std::size_t k = 1; k < a.size(); ++k) diff += std::abs(a[k] - b[k]);
  EXPECT_GT(diff, 1.0);
  // The DC term (total area) is order-free.
  EXPECT_NEAR(a[0], b[0], 1e-6 * a[0]);
}

TEST(Separability, LinearProbeOnClipStatistics) {
  auto collect = [](std::uint64_t base, std::size_t n) {
    Eigen::MatrixXd x, y(n, kIdentityDim);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t s = base + i;
      const auto c = render_clip(gen_identity(s), gen_motion(s ^ 0xABCDEF, 16, s % 8), 16, 64, 64);
      const auto f = clip_statistics(c);
      if (x.size() == 0) x.resize(n, f.size());
      for (std::size_t k = 0; k < f.size(); ++k) x(i, k) = f[k];
      for (std::size_t k = 0; k < kIdentityDim; ++k) y(i, k) = c.identity.values[k];
    }
    return std::pair{x, y};
  };
  const auto [xtr, ytr] = collect(1, 400);
  const auto [xte, yte] = collect(100000, 200);
  const auto r = eval::ridge_probe(xtr, ytr, xte, yte);
  EXPECT_GE(r.mean_r2(), 0.9);
}
