#include <gtest/gtest.h>

#include "oracles.hpp"
#include "slotid/slot_reader.hpp"
#include "test_util.hpp"

using namespace slotid;
using namespace slotid::reader;
using testutil::randn;
using LVec = std::vector<long double>;

namespace {

struct Fixture {
  ParamStore<double> store;
  ReaderParams<double> params;
  Fixture(std::size_t slots, std::size_t d, std::size_t iters, std::uint64_t seed) {
    Rng rng(seed);
    params = ReaderParams<double>::create(store, "reader", slots, d, iters, true, rng);
    // Non-zero biases so the oracle exercises every term.
    for (auto& p : store.all())
      if (p.var.ndim() == 1) p.var.mutable_value() = rng.normal_tensor<double>(p.var.shape(), 0.3);
  }
};

LVec row(const Tensor<double>& t, std::size_t r, std::size_t d) {
  return LVec(t.data() + r * d, t.data() + (r + 1) * d);
}

LVec gru_oracle(const GruCell<double>& g, const LVec& x, const LVec& h) {
  auto lin = [](const Var<double>& w, const Var<double>& b, const LVec& v) { return oracle::affine(w.value(), b.value(), v); };
  const auto xr = lin(g.w_ir, g.b_ir, x), hr = lin(g.w_hr, g.b_hr, h);
  const auto xz = lin(g.w_iz, g.b_iz, x), hz = lin(g.w_hz, g.b_hz, h);
  const auto xn = lin(g.w_in, g.b_in, x), hn = lin(g.w_hn, g.b_hn, h);
  LVec out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const long double r = oracle::sigmoid(xr[i] + hr[i]), z = oracle::sigmoid(xz[i] + hz[i]);
    const long double n = std::tanh(xn[i] + r * hn[i]);
    out[i] = (1 - z) * n + z * h[i];
  }
  return out;
}

}  // namespace

TEST(Scores, MatchScaledDotProducts) {
  const auto q = randn({2, 3, 5}, 1), k = randn({2, 4, 5}, 2);
  const auto s = scores(ad::constant(q), ad::constant(k)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        long double acc = 0;
        for (std::size_t c = 0; c < 5; ++c) acc += (long double)q[(b * 3 + i) * 5 + c] * k[(b * 4 + j) * 5 + c];
        EXPECT_NEAR(s[(b * 3 + i) * 4 + j], double(acc / std::sqrt(5.0L)), 1e-13);
      }
  EXPECT_THROW(scores(ad::constant(q), ad::constant(randn({2, 4, 6}, 3))), ShapeError);
}

TEST(RouteStep, MatchesStraightLineOracle) {
  const std::size_t S = 2, L = 3, D = 4;
  Fixture f(S, D, 1, 4);
  ot::SinkhornConfig cfg;
  const long step = 250;
  const auto q = randn({1, S, D}, 5), x = randn({1, L, D}, 6);
  const auto res = route_step(ad::constant(q), ad::constant(x), step, cfg, f.params);

  const double tau = 1.0 + 0.25 * (0.3 - 1.0);
  std::vector<std::vector<double>> logits(S, std::vector<double>(L));
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      long double acc = 0;
      for (std::size_t c = 0; c < D; ++c) acc += (long double)q[i * D + c] * x[j * D + c];
      logits[i][j] = double(acc / 2.0L / tau);
    }
  const auto p = oracle::ipf(logits, cfg.n_iters);
  auto w = oracle::renormalize(p, 1e-8L);
  for (auto& r : w) {
    long double s = 0;
    for (auto v : r) s += v;
    for (auto& v : r) v /= s;
  }
  for (std::size_t i = 0; i < S; ++i) {
    LVec u(D, 0.0L);
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t c = 0; c < D; ++c) u[c] += w[i][j] * x[j * D + c];
    const auto h = gru_oracle(f.params.gru, u, row(q, i, D));
    for (std::size_t c = 0; c < D; ++c) EXPECT_NEAR(res.slots.value()[i * D + c], double(h[c]), 1e-10);
    for (std::size_t j = 0; j < L; ++j) {
      EXPECT_NEAR(res.weights.value()[i * L + j], double(w[i][j]), 1e-10);
      EXPECT_NEAR(res.raw[i * L + j], double(p[i][j]), 1e-12);
    }
  }
}

TEST(RouteStep, ZeroGruWeightsHalveQueries) {
  Fixture f(3, 6, 1, 7);
  for (auto& p : f.store.all())
    if (p.name.find(".gru.") != std::string::npos) p.var.mutable_value().fill(0.0);
  const auto q = randn({2, 3, 6}, 8);
  const auto res = route_step(ad::constant(q), ad::constant(randn({2, 5, 6}, 9)), 0, {}, f.params);
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(res.slots.value()[i], 0.5 * q[i], 1e-15);
}

TEST(RouteStep, IdenticalTokensAggregateToTheToken) {
  Fixture f(3, 6, 1, 10);
  for (auto& p : f.store.all())
    if (p.name.find(".gru.") != std::string::npos) p.var.mutable_value().fill(0.0);
  // With r = z = 1/2 and zero weights the update is q/2, so check the aggregation weights directly.
  const auto tok = randn({1, 1, 6}, 11);
  Tensor<double> x(Shape{1, 4, 6});
  for (std::size_t j = 0; j < 4; ++j) std::copy_n(tok.data(), 6, x.data() + j * 6);
  const auto res = route_step(ad::constant(randn({1, 3, 6}, 12)), ad::constant(x), 0, {}, f.params);
  for (double v : res.weights.value().vec()) EXPECT_NEAR(v, 0.25, 1e-12);
  const auto u = ad::bmm(res.weights, ad::constant(x)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(u[i * 6 + c], tok[c], 1e-12);
}

TEST(Read, BatchItemsAreIndependent) {
  Fixture f(4, 8, 3, 13);
  const auto a = randn({1, 10, 8}, 14), b = randn({1, 10, 8}, 15);
  Tensor<double> ab(Shape{2, 10, 8});
  std::copy_n(a.data(), a.size(), ab.data());
  std::copy_n(b.data(), b.size(), ab.data() + a.size());
  const auto ra = read(ad::constant(a), 0, {}, f.params).identity.value();
  const auto rb = read(ad::constant(b), 0, {}, f.params).identity.value();
  const auto rab = read(ad::constant(ab), 0, {}, f.params).identity.value();
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_NEAR(rab[i], ra[i], 1e-12);
    EXPECT_NEAR(rab[ra.size() + i], rb[i], 1e-12);
  }
}

TEST(Read, LoadBalancedCouplings) {
  Fixture f(6, 12, 3, 16);
  const auto out = read(ad::constant(randn({2, 32, 12}, 17, 2.0)), 2000, {}, f.params);
  ASSERT_EQ(out.diagnostics.size(), 3u);
  for (const auto& d : out.diagnostics) {
    EXPECT_LT(d.col_residual, 1e-12);
    EXPECT_LT(d.row_residual, 1e-3);
    for (double m : d.slot_mass) EXPECT_NEAR(m, 1.0 / 6, 1e-3);
    EXPECT_DOUBLE_EQ(d.temperature, 0.3);
  }
}

TEST(Read, TokenPermutationInvariance) {
  Fixture f(3, 6, 3, 18);
  const auto x = randn({1, 7, 6}, 19);
  const std::vector<std::size_t> perm{4, 2, 6, 0, 1, 5, 3};
  Tensor<double> xp(x.shape());
  for (std::size_t j = 0; j < 7; ++j) std::copy_n(x.data() + perm[j] * 6, 6, xp.data() + j * 6);
  const auto a = read(ad::constant(x), 10, {}, f.params).identity.value();
  const auto b = read(ad::constant(xp), 10, {}, f.params).identity.value();
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
}

TEST(Read, SlotPermutationEquivariance) {
  Fixture f(3, 6, 2, 20);
  const auto x = ad::constant(randn({1, 5, 6}, 21));
  const auto a = read(x, 10, {}, f.params).identity.value();
  const std::vector<std::size_t> perm{2, 0, 1};
  auto q = f.params.slots.value();
  for (std::size_t i = 0; i < 3; ++i) std::copy_n(q.data() + perm[i] * 6, 6, f.params.slots.mutable_value().data() + i * 6);
  const auto b = read(x, 10, {}, f.params).identity.value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(b[i * 6 + c], a[perm[i] * 6 + c], 1e-12);
}

TEST(Read, SmallTokenPerturbationGivesSmallChange) {
  Fixture f(4, 8, 3, 22);
  const auto x = randn({1, 12, 8}, 23);
  const auto base = read(ad::constant(x), 1000, {}, f.params).identity.value();
  double worst_ratio = 0;
  for (double eps : {1e-3, 1e-5, 1e-7}) {
    auto y = x;
    const auto d = randn(x.shape(), 24);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += eps * d[i];
    const auto out = read(ad::constant(y), 1000, {}, f.params).identity.value();
    const double ratio = max_abs_diff(out, base) / (eps * d.max_abs());
    if (eps < 1e-3) {
      EXPECT_NEAR(ratio, worst_ratio, 0.05 * worst_ratio);
    }
    worst_ratio = ratio;
  }
  EXPECT_TRUE(std::isfinite(worst_ratio));
}

TEST(Read, RejectsWidthMismatch) {
  Fixture f(2, 6, 1, 25);
  EXPECT_THROW(read(ad::constant(randn({1, 3, 5}, 26)), 0, {}, f.params), ShapeError);
  Rng rng(1);
  ParamStore<double> s;
  EXPECT_THROW(ReaderParams<double>::create(s, "r", 0, 6, 1, true, rng), std::invalid_argument);
  EXPECT_THROW(ReaderParams<double>::create(s, "r2", 2, 6, 0, true, rng), std::invalid_argument);
}

TEST(Read, GradientsOnInitialQueriesAndTokens) {
  Fixture f(2, 6, 2, 27);
  auto run = [&](const std::vector<Var<double>>& v) {
    ReaderParams<double> p = f.params;
    p.slots = v[0];
    return read(v[1], 500, ot::SinkhornConfig{1.0, 0.3, 1000, 10, 1e-8}, p).identity;
  };
  EXPECT_LT(testutil::grad_error(run, {f.params.slots.value(), randn({1, 4, 6}, 28)}), 1e-5);
}

TEST(GlobalSummary, MeanThenLinear) {
  const auto x = randn({2, 3, 4}, 29), w = randn({5, 4}, 30), b = randn({5}, 31);
  const auto g = global_summary(ad::constant(x), ad::constant(w), ad::constant(b)).value();
  ASSERT_EQ(g.shape(), (Shape{2, 5}));
  for (std::size_t n = 0; n < 2; ++n) {
    LVec m(4, 0.0L);
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t c = 0; c < 4; ++c) m[c] += x[(n * 3 + s) * 4 + c] / 3.0L;
    const auto y = oracle::affine(w, b, m);
    for (std::size_t o = 0; o < 5; ++o) EXPECT_NEAR(g[n * 5 + o], double(y[o]), 1e-13);
  }
}
