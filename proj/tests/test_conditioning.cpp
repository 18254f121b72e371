#include <gtest/gtest.h>

#include "oracles.hpp"
#include "slotid/model.hpp"
#include "test_util.hpp"

using namespace slotid;
using namespace slotid::cond;
using testutil::randn;
using LVec = std::vector<long double>;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.width = 12;
  c.blocks = 3;
  c.heads = 2;
  c.lora_rank = 2;
  c.lora_alpha = 4;
  c.out_init_std = 0.3;
  return c;
}

struct SmallBackbone {
  ParamStore<double> store;
  ToyBackbone<double> bb;
  explicit SmallBackbone(BackboneConfig cfg = small_config(), std::uint64_t seed = 1) {
    Rng rng(seed);
    bb = ToyBackbone<double>::create(store, cfg, 2, {1, 2, 2}, rng);
  }
  ConditionBundle<double> bundle(std::size_t b, std::uint64_t seed) const {
    ConditionBundle<double> c;
    c.prefix = ad::constant(randn({b, 3, bb.cfg.width}, seed));
    c.text = bb.embed_text(std::vector<std::vector<std::size_t>>(b, {8, 2}));
    c.g = ad::constant(randn({b, bb.cfg.width}, seed + 1));
    c.w.assign(b, 0.5);
    return c;
  }
  Tensor<double> run(const Tensor<double>& z, const ConditionBundle<double>& c) const {
    std::vector<double> t(z.dim(0), 0.4);
    return bb.forward(ad::constant(z), t, c).value();
  }
  /// Moves every trainable adapter and FiLM map away from its zero initialization.
  void perturb_trainable(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : store.all())
      if (p.trainable) p.var.mutable_value() = rng.normal_tensor<double>(p.var.shape(), 0.2);
  }
};

}  // namespace

TEST(Gate, EndpointsAndMidpoint) {
  const auto id = ad::constant(randn({2, 3, 4}, 1)), img = ad::constant(randn({2, 2, 4}, 2));
  const auto g0 = gate_tokens(id, img, 0.0);
  for (double v : g0.image.value().vec()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g0.identity.value(), id.value());
  const auto g1 = gate_tokens(id, img, 1.0);
  EXPECT_EQ(g1.image.value(), img.value());
  for (double v : g1.identity.value().vec()) EXPECT_EQ(v, 0.0);
  const auto gh = gate_tokens(id, img, std::vector<double>{0.25, 0.75});
  for (std::size_t k = 0; k < 12; ++k) {
    EXPECT_DOUBLE_EQ(gh.identity.value()[k], 0.75 * id.value()[k]);
    EXPECT_DOUBLE_EQ(gh.identity.value()[12 + k], 0.25 * id.value()[12 + k]);
  }
  for (std::size_t k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(gh.image.value()[k], 0.25 * img.value()[k]);
  EXPECT_THROW(gate_tokens(id, img, 1.5), std::invalid_argument);
  EXPECT_THROW(gate_tokens(id, img, -0.1), std::invalid_argument);
}

TEST(Gate, FuseGlobalIsConvexCombination) {
  const auto a = ad::constant(randn({3, 5}, 3)), b = ad::constant(randn({3, 5}, 4));
  const auto f = fuse_global(a, b, std::vector<double>{0.0, 1.0, 0.3}).value();
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(f[k], a.value()[k]);
    EXPECT_EQ(f[5 + k], b.value()[5 + k]);
    EXPECT_NEAR(f[10 + k], 0.7 * a.value()[10 + k] + 0.3 * b.value()[10 + k], 1e-15);
  }
  const auto same = fuse_global(a, a, 0.37).value();
  EXPECT_LT(max_abs_diff(same, a.value()), 1e-15);
}

TEST(Gate, ScheduleFollowsFlowTime) {
  EXPECT_EQ(gate_schedule(0.0), 0.0);
  EXPECT_EQ(gate_schedule(1.0), 1.0);
  double prev = -1;
  for (int i = 0; i <= 20; ++i) {
    const double w = gate_schedule(i / 20.0);
    EXPECT_GE(w, prev);
    prev = w;
  }
  EXPECT_THROW(gate_schedule(1.01), std::invalid_argument);
}

TEST(PrefixDropout, InferenceAndZeroRateAreIdentity) {
  const auto x = ad::constant(randn({2, 8, 4}, 5));
  Rng rng(6);
  EXPECT_EQ(prefix_dropout(x, 0.5, rng, false).value(), x.value());
  EXPECT_EQ(prefix_dropout(x, 0.0, rng, true).value(), x.value());
  EXPECT_THROW(prefix_dropout(x, 1.0, rng, true), std::invalid_argument);
}

TEST(PrefixDropout, DropsWholeTokensWithoutRescaling) {
  const std::size_t b = 50, n = 40, d = 3;
  const double p = 0.05;
  Tensor<double> ones(Shape{b, n, d}, 1.0);
  Rng rng(7);
  const auto y = prefix_dropout(ad::constant(ones), p, rng, true).value();
  std::size_t kept = 0;
  for (std::size_t t = 0; t < b * n; ++t) {
    const double v0 = y[t * d];
    EXPECT_TRUE(v0 == 0.0 || v0 == 1.0);
    for (std::size_t k = 1; k < d; ++k) EXPECT_EQ(y[t * d + k], v0);
    kept += v0 == 1.0;
  }
  const double total = double(b * n), mean = total * (1 - p), sd = std::sqrt(total * p * (1 - p));
  EXPECT_NEAR(double(kept), mean, 3 * sd);
}

TEST(Film, ZeroInitIsIdentityAndMatchesOracle) {
  ParamStore<double> store;
  auto f = Film<double>::create(store, "film", 4, true);
  const auto x = randn({2, 3, 4}, 8), g = randn({2, 4}, 9);
  EXPECT_EQ(f(ad::constant(x), ad::constant(g)).value(), x);
  Rng rng(10);
  for (auto& p : store.all()) p.var.mutable_value() = rng.normal_tensor<double>(p.var.shape());
  const auto y = f(ad::constant(x), ad::constant(g)).value();
  for (std::size_t b = 0; b < 2; ++b) {
    const LVec gv(g.data() + b * 4, g.data() + b * 4 + 4);
    const auto gamma = oracle::affine(f.gamma_w.value(), f.gamma_b.value(), gv);
    const auto beta = oracle::affine(f.beta_w.value(), f.beta_b.value(), gv);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t i = (b * 3 + l) * 4 + c;
        EXPECT_NEAR(y[i], double((1 + gamma[c]) * x[i] + beta[c]), 1e-13);
      }
  }
}

TEST(Lora, ZeroBIsBaseProjection) {
  ParamStore<double> store;
  Rng rng(11);
  auto l = LoraLinear<double>::create(store, "l", 6, 5, 3, 16, true, 0.5, rng);
  EXPECT_FALSE(store.get("l.weight").trainable);
  EXPECT_TRUE(store.get("l.lora_a").trainable);
  const auto x = ad::constant(randn({2, 4, 6}, 12));
  const auto base = ad::linear(x, l.weight, l.bias).value();
  EXPECT_EQ(l(x).value(), base);
  l.a.mutable_value() = randn(l.a.shape(), 13, 10.0);
  EXPECT_EQ(l(x).value(), base);
}

TEST(Lora, MatchesOracleWithScale) {
  const auto x = randn({1, 2, 4}, 14), w = randn({4, 3}, 15), a = randn({4, 2}, 16), b = randn({2, 3}, 17);
  const auto y = lora_linear(ad::constant(x), ad::constant(w), ad::constant(a), ad::constant(b), 16.0).value();
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t o = 0; o < 3; ++o) {
      long double base = 0, delta = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        base += (long double)x[r * 4 + i] * w[i * 3 + o];
        for (std::size_t k = 0; k < 2; ++k) delta += (long double)x[r * 4 + i] * a[i * 2 + k] * b[k * 3 + o];
      }
      EXPECT_NEAR(y[r * 3 + o], double(base + 8.0L * delta), 1e-12);
    }
  EXPECT_THROW(lora_linear(ad::constant(x), ad::constant(w), ad::constant(Tensor<double>(Shape{4, 0})),
                           ad::constant(Tensor<double>(Shape{0, 3})), 16.0),
               std::invalid_argument);
}

TEST(AnchorEncoder, AttentionPoolMatchesOracle) {
  ParamStore<double> store;
  Rng rng(18);
  auto enc = AnchorEncoder<double>::create(store, "anchor", 2, 6, 2, {1, 2, 2}, true, rng);
  const auto z = randn({1, 2, 1, 4, 4}, 19);
  const auto out = enc(ad::constant(z)).value();
  ASSERT_EQ(out.shape(), (Shape{1, 2, 6}));
  const auto tok = enc.embed(ad::constant(z)).data.value();  // (1, 4, 6)
  const auto& q = enc.queries.value();
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<long double> s(4);
    long double mx = -INFINITY, z_sum = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      for (std::size_t c = 0; c < 6; ++c) s[j] += (long double)q[k * 6 + c] * tok[j * 6 + c];
      s[j] /= std::sqrt(6.0L);
      mx = std::max(mx, s[j]);
    }
    for (auto& v : s) z_sum += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < 6; ++c) {
      long double acc = 0;
      for (std::size_t j = 0; j < 4; ++j) acc += s[j] / z_sum * tok[j * 6 + c];
      EXPECT_NEAR(out[k * 6 + c], double(acc), 1e-13);
    }
  }
  EXPECT_THROW(enc(ad::constant(randn({1, 2, 2, 4, 4}, 20))), ShapeError);
}

TEST(Backbone, TrainableGroupsAreAdaptersAndFilmOnly) {
  SmallBackbone s;
  std::size_t film_blocks = 0;
  for (const auto& p : s.store.all()) {
    const bool adapter = p.name.find("lora_") != std::string::npos || p.name.find(".film.") != std::string::npos;
    EXPECT_EQ(p.trainable, adapter) << p.name;
    if (p.name.find(".film.gamma.weight") != std::string::npos) ++film_blocks;
  }
  EXPECT_EQ(film_blocks, 2u);  // ceil(3 / 2)
  EXPECT_FALSE(s.bb.blocks[0].has_film);
  EXPECT_TRUE(s.bb.blocks[2].has_film);

  auto cfg = small_config();
  cfg.lora_on_output = false;
  SmallBackbone no_o(cfg);
  EXPECT_FALSE(no_o.store.contains("backbone.block0.cross.o.lora_a"));
  EXPECT_TRUE(no_o.store.contains("backbone.block0.cross.k.lora_a"));
}

TEST(Backbone, InitIdentitiesAreBitExact) {
  SmallBackbone s;
  const auto z = randn({2, 2, 2, 4, 4}, 21);
  auto c = s.bundle(2, 22);
  const auto base = s.run(z, c);
  c.g = ad::constant(randn({2, 12}, 23, 5.0));
  EXPECT_EQ(s.run(z, c), base);
  for (auto& p : s.store.all())
    if (p.name.find("lora_a") != std::string::npos) p.var.mutable_value() = randn(p.var.shape(), 24, 3.0);
  EXPECT_EQ(s.run(z, c), base);
  // The prefix still matters through the frozen cross-attention.
  c.prefix = ad::constant(randn({2, 3, 12}, 25));
  EXPECT_NE(s.run(z, c), base);
}

TEST(Backbone, AdaptersChangeOutputOnceMoved) {
  SmallBackbone s;
  const auto z = randn({1, 2, 2, 4, 4}, 26);
  auto c = s.bundle(1, 27);
  const auto base = s.run(z, c);
  s.perturb_trainable(28);
  EXPECT_GT(max_abs_diff(s.run(z, c), base), 1e-6);
}

TEST(Backbone, BatchItemsAreIndependent) {
  SmallBackbone s;
  s.perturb_trainable(29);
  const auto z1 = randn({1, 2, 2, 4, 4}, 30);
  Tensor<double> z2(Shape{2, 2, 2, 4, 4});
  std::copy_n(z1.data(), z1.size(), z2.data());
  std::copy_n(z1.data(), z1.size(), z2.data() + z1.size());
  auto c1 = s.bundle(1, 31);
  ConditionBundle<double> c2;
  c2.prefix = ad::concat<double>({c1.prefix, c1.prefix}, 0);
  c2.text = ad::concat<double>({c1.text, c1.text}, 0);
  c2.g = ad::concat<double>({c1.g, c1.g}, 0);
  c2.w = {0.5, 0.5};
  const auto y1 = s.run(z1, c1), y2 = s.run(z2, c2);
  for (std::size_t i = 0; i < y1.size(); ++i) {
    EXPECT_NEAR(y2[i], y2[y1.size() + i], 1e-12);
    EXPECT_NEAR(y2[i], y1[i], 1e-12);
  }
}

TEST(Backbone, OutputShapeAndErrors) {
  SmallBackbone s;
  const auto c = s.bundle(1, 32);
  EXPECT_EQ(s.run(randn({1, 2, 2, 4, 4}, 33), c).shape(), (Shape{1, 2, 2, 4, 4}));
  EXPECT_THROW(s.run(randn({1, 3, 2, 4, 4}, 34), c), ShapeError);
  EXPECT_THROW(s.run(randn({2, 2, 2, 4, 4}, 35), c), ShapeError);
  EXPECT_THROW(s.bb.embed_text({{16}}), std::out_of_range);
}

TEST(Backbone, GradientsThroughAdaptersAndFilm) {
  SmallBackbone s(small_config(), 36);
  s.perturb_trainable(37);
  const auto z = randn({1, 2, 2, 4, 4}, 38);
  const auto text = s.bb.embed_text({{8, 1}});
  auto f = [&](const std::vector<ad::Var<double>>& v) {
    ConditionBundle<double> c{v[0], text, v[1], {0.3}};
    return s.bb.forward(ad::constant(z), {0.3}, c);
  };
  EXPECT_LT(testutil::grad_error(f, {randn({1, 3, 12}, 39), randn({1, 12}, 40)}), 1e-5);
}

TEST(Conditioning, PathwayExclusivity) {
  ModelConfig mc;
  mc.width = 12;
  mc.stsa_layers = 1;
  mc.stsa_heads = 2;
  mc.slots = 3;
  mc.iterations = 2;
  mc.backbone = small_config();
  mc.backbone.film_fraction = 1.0;
  mc.latent_channels = 2;
  mc.patch = {2, 2, 2};
  SlotIdModel<double> model(mc, 41);
  for (auto& p : model.params().all())
    if (p.trainable && p.name.rfind("backbone.", 0) == 0) p.var.mutable_value() = randn(p.var.shape(), 42, 0.2);
  const auto z = randn({1, 2, 4, 4, 4}, 43);
  auto run = [&](std::uint64_t ref_seed, bool zero) {
    const auto id = model.encode_identity(randn({1, 2, 4, 4, 4}, ref_seed), 0);
    auto c = model.condition(id, randn({1, 2, 1, 4, 4}, ref_seed + 1), {{8, 3}}, {0.4}, nullptr);
    if (zero) {
      c.prefix = ad::constant(Tensor<double>(c.prefix.shape()));
      c.g = ad::constant(Tensor<double>(c.g.shape()));
    }
    return model.backbone().forward(ad::constant(z), {0.4}, c).value();
  };
  EXPECT_EQ(run(44, true), run(46, true));
  EXPECT_NE(run(44, false), run(46, false));
}

TEST(Conditioning, PrefixLayoutImageFirst) {
  ModelConfig mc;
  mc.width = 12;
  mc.stsa_layers = 1;
  mc.stsa_heads = 2;
  mc.slots = 3;
  mc.anchor_tokens = 2;
  mc.backbone = small_config();
  mc.latent_channels = 2;
  SlotIdModel<double> model(mc, 47);
  const auto id = model.encode_identity(randn({2, 2, 4, 4, 4}, 48), 0);
  const auto c = model.condition(id, randn({2, 2, 1, 4, 4}, 49), {{8, 0}, {8, 1}}, {1.0, 0.0}, nullptr);
  ASSERT_EQ(c.prefix.shape(), (Shape{2, 5, 12}));
  // Item 0 has w = 1: identity tokens vanish. Item 1 has w = 0: image tokens vanish.
  for (std::size_t k = 2 * 12; k < 5 * 12; ++k) EXPECT_EQ(c.prefix.value()[k], 0.0);
  for (std::size_t k = 0; k < 2 * 12; ++k) EXPECT_EQ(c.prefix.value()[60 + k], 0.0);
  // Unit-gated halves are layer-normalized.
  for (std::size_t t = 0; t < 2; ++t) {
    double m = 0;
    for (std::size_t k = 0; k < 12; ++k) m += c.prefix.value()[t * 12 + k] / 12;
    EXPECT_NEAR(m, 0.0, 1e-12);
  }
}
