#include <gtest/gtest.h>

#include <cmath>

#include "sgpc/losses.hpp"
#include "sgpc/nn/gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace sgpc;
using sgpc::testing::brute_chamfer;
using sgpc::testing::brute_density;
using sgpc::testing::random_points;

namespace {

nn::Tensor<double> as_tensor(const std::vector<Vec3>& pts) {
  nn::Tensor<double> t;
  t.shape = {pts.size(), 3};
  for (const auto& p : pts) t.data.insert(t.data.end(), {p.x(), p.y(), p.z()});
  return t;
}

}  // namespace

TEST(Chamfer, Examples) {
  const std::vector<Vec3> a{{0, 0, 0}}, b{{1, 0, 0}};
  EXPECT_DOUBLE_EQ(chamfer_distance(a, b), 1.0);
  const auto r = random_points(50, 3);
  EXPECT_EQ(chamfer_distance(r, r), 0.0);
  EXPECT_THROW(chamfer_distance(a, {}), InputError);
}

TEST(Chamfer, MatchesBruteForce) {
  const auto a = random_points(200, 1), b = random_points(300, 2);
  EXPECT_NEAR(chamfer_distance(a, b), brute_chamfer(a, b), 1e-9);
  for (std::uint64_t s = 0; s < 120; ++s) {
    auto st = CounterRng(mix64(s, 1)).stream();
    const auto x = random_points(1 + st.below(512), mix64(s, 2), 1.0 + s % 5);
    const auto y = random_points(1 + st.below(512), mix64(s, 3), 1.0 + s % 3);
    ASSERT_NEAR(chamfer_distance(x, y), brute_chamfer(x, y), 1e-9) << s;
  }
  // Large enough to go through the tree.
  const auto big = random_points(3000, 8), other = random_points(700, 9);
  EXPECT_NEAR(chamfer_distance(big, other), brute_chamfer(big, other), 1e-9);
}

TEST(Chamfer, SymmetricAndNonNegative) {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto st = CounterRng(mix64(s, 11)).stream();
    const auto x = random_points(1 + st.below(40), mix64(s, 12));
    const auto y = random_points(1 + st.below(40), mix64(s, 13));
    const double ab = chamfer_distance(x, y);
    ASSERT_EQ(ab, chamfer_distance(y, x));
    ASSERT_GE(ab, 0.0);
    ASSERT_EQ(chamfer_distance(x, x), 0.0);
  }
}

TEST(Chamfer, TapeValueMatchesPlain) {
  const auto a = random_points(30, 4), b = random_points(45, 5);
  nn::Tape<double> t;
  const auto ta = as_tensor(a), tb = as_tensor(b);
  auto v = chamfer(t.constant(ta.shape, ta.data), t.constant(tb.shape, tb.data));
  EXPECT_NEAR(v.value()[0], chamfer_distance(a, b), 1e-12);
}

TEST(Chamfer, GradientCheck) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    nn::ParameterStore<double> store;
    store.add("a", as_tensor(random_points(12 + s, mix64(s, 1))));
    store.add("b", as_tensor(random_points(9 + 2 * s, mix64(s, 2))));
    const auto r = nn::gradient_check(store, [&](nn::Tape<double>& t) {
      return chamfer(t.parameter(store.at("a")), t.parameter(store.at("b")));
    });
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(Density, Examples) {
  const DensityGrid g2{{2, 2, 2}};
  const std::vector<Vec3> src{{-1, -1, -1}}, trg{{1, 1, 1}};
  EXPECT_DOUBLE_EQ(density_loss(src, trg, g2), 0.25);
  const auto r = random_points(100, 4);
  EXPECT_EQ(density_loss(r, r), 0.0);
}

TEST(Density, MatchesReimplementation) {
  for (std::uint64_t s = 0; s < 120; ++s) {
    auto st = CounterRng(mix64(s, 21)).stream();
    const DensityGrid g{{1 + st.below(8), 1 + st.below(8), 1 + st.below(8)}};
    // Scale 1.2 puts some points outside the unit cube to exercise clamping.
    const auto a = random_points(1 + st.below(512), mix64(s, 22), 1.2);
    const auto b = random_points(1 + st.below(512), mix64(s, 23), 0.9);
    const double v = density_loss(a, b, g);
    ASSERT_NEAR(v, brute_density(a, b, g), 1e-9) << s;
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 2.0 / static_cast<double>(g.cells()));
  }
}

TEST(Density, GradientCheck) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    nn::ParameterStore<double> store;
    store.add("a", as_tensor(random_points(10 + s, mix64(s, 5), 0.95)));
    store.add("b", as_tensor(random_points(14, mix64(s, 6), 0.95)));
    const auto r = nn::gradient_check(store, [&](nn::Tape<double>& t) {
      return density_loss(t.parameter(store.at("a")), t.parameter(store.at("b")), DensityGrid{{4, 3, 5}});
    });
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(MaskBce, Examples) {
  const std::vector<bool> m{true, false, true, true, false};
  std::vector<double> exact{1, 0, 1, 1, 0};
  EXPECT_LE(mask_bce(m, exact), 1e-6);
  std::vector<double> half(5, 0.5);
  EXPECT_NEAR(mask_bce(m, half), std::log(2.0), 1e-15);
  EXPECT_THROW(mask_bce(m, std::vector<double>(4, 0.5)), InputError);
}

TEST(MaskBce, MatchesFormula) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto st = CounterRng(s).stream();
    const std::size_t n = 1 + st.below(300);
    std::vector<bool> m(n);
    std::vector<double> p(n);
    double ref = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = st.uniform() < 0.5;
      p[i] = st.uniform(0.001, 0.999);
      ref += m[i] ? std::log(p[i]) : std::log(1.0 - p[i]);
    }
    ASSERT_NEAR(mask_bce(m, p), -ref / static_cast<double>(n), 1e-12);
  }
}

TEST(MaskBce, GradientCheck) {
  nn::ParameterStore<double> store;
  nn::Tensor<double> p;
  p.shape = {20};
  auto st = CounterRng(9).stream();
  std::vector<bool> m;
  for (int i = 0; i < 20; ++i) {
    p.data.push_back(st.uniform(0.05, 0.95));
    m.push_back(i % 3 == 0);
  }
  store.add("p", p);
  const auto r = nn::gradient_check(store, [&](nn::Tape<double>& t) { return mask_bce(t.parameter(store.at("p")), m); });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Schedule, Examples) {
  const auto w0 = schedule_lambdas(0);
  EXPECT_EQ(w0.lambda, (std::array<double, 4>{0.5, 10.0, 1.0, 0.5}));
  const auto flat = schedule_lambdas(37, {1, 2, 3, 4}, 1.0);
  EXPECT_EQ(flat.lambda, (std::array<double, 4>{1, 2, 3, 4}));
  const auto w100 = schedule_lambdas(100);
  EXPECT_NEAR(std::pow(0.98, 100), 0.1326, 5e-5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w100.lambda[i] / w0.lambda[i], 0.13262, 1e-5);
  EXPECT_THROW(schedule_lambdas(1, {1, 1, 1, 1}, 0.0), InputError);
  EXPECT_THROW(schedule_lambdas(1, {1, 1, 1, 1}, 1.5), InputError);
  for (std::size_t e = 0; e < 300; ++e) {
    for (double l : schedule_lambdas(e).lambda) ASSERT_GE(l, 0.0);
  }
}

TEST(CoarseMask, Prefix) {
  const auto m = coarse_target_mask(9, 5, 4);
  EXPECT_EQ(m, (std::vector<bool>{true, true, true, false, false}));
  EXPECT_EQ(coarse_target_mask(0, 3, 4), (std::vector<bool>{false, false, false}));
  EXPECT_EQ(coarse_target_mask(100, 3, 4), (std::vector<bool>{true, true, true}));
}

namespace {

struct FakeCase {
  Patch patch;
  DecoderConfig cfg;
  std::vector<Vec3> coarse, fine;
  std::vector<double> cconf, fconf;
};

FakeCase fake_case(std::uint64_t seed, bool perfect) {
  FakeCase f;
  f.cfg.coarse = 6;
  f.cfg.grid_side = 2;
  auto st = CounterRng(seed).stream();
  const std::size_t n = f.cfg.fine();
  f.patch.n_valid = perfect ? n : 5 + st.below(n - 5);
  f.patch.points_local = random_points(n, mix64(seed, 1), 0.9);
  for (std::size_t i = f.patch.n_valid; i < n; ++i) f.patch.points_local[i] = Vec3::Zero();
  f.patch.valid_mask.assign(n, false);
  std::fill_n(f.patch.valid_mask.begin(), f.patch.n_valid, true);
  if (perfect) {
    // Each coarse point folded onto itself G times.
    f.coarse = random_points(f.cfg.coarse, mix64(seed, 4), 0.9);
    for (std::size_t i = 0; i < n; ++i) f.patch.points_local[i] = f.coarse[i / 4];
    f.fine = f.patch.points_local;
    f.cconf.assign(f.cfg.coarse, 1.0);
    f.fconf.assign(n, 1.0);
  } else {
    f.fine = random_points(n, mix64(seed, 2));
    f.coarse = random_points(f.cfg.coarse, mix64(seed, 3));
    for (std::size_t i = 0; i < n; ++i) f.fconf.push_back(st.uniform(0.01, 0.99));
    for (std::size_t i = 0; i < f.cfg.coarse; ++i) f.cconf.push_back(st.uniform(0.01, 0.99));
  }
  return f;
}

LossTerms<double> fake_loss(nn::Tape<double>& t, const FakeCase& f, const LossWeights& w) {
  const auto ft = as_tensor(f.fine), ct = as_tensor(f.coarse);
  DecoderGraph<double> g{t.constant(ct.shape, ct.data), t.constant({f.cfg.coarse, 1}, f.cconf),
                         t.constant(ft.shape, ft.data), t.constant({f.cfg.fine()}, f.fconf)};
  return total_loss(t, f.patch, g, f.cfg, w);
}

}  // namespace

TEST(TotalLoss, ZeroWeightsLeaveFineChamfer) {
  const auto f = fake_case(1, false);
  nn::Tape<double> t;
  LossWeights w;
  w.lambda = {0, 0, 0, 0};
  const auto l = fake_loss(t, f, w);
  EXPECT_EQ(l.total.value()[0], l.fine_cd.value()[0]);
}

TEST(TotalLoss, PerfectReconstructionNearZero) {
  const auto f = fake_case(2, true);
  nn::Tape<double> t;
  EXPECT_LE(fake_loss(t, f, LossWeights{}).total.value()[0], 1e-5);
}

TEST(TotalLoss, Recomposition) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto f = fake_case(mix64(s, 4), false);
    nn::Tape<double> t;
    const auto w = schedule_lambdas(s);
    const auto l = fake_loss(t, f, w);
    const std::vector<Vec3> gt(f.patch.points_local.begin(), f.patch.points_local.begin() + f.patch.n_valid);
    const double fine = chamfer_distance(gt, f.fine);
    const double coarse = chamfer_distance(gt, f.coarse);
    const double dens = density_loss(f.fine, gt);
    const double mf = mask_bce(f.patch.valid_mask, f.fconf);
    const double mc = mask_bce(coarse_target_mask(f.patch.n_valid, f.cfg.coarse, 4), f.cconf);
    const double ref = fine + w.lambda[0] * coarse + w.lambda[1] * dens + w.lambda[2] * mf + w.lambda[3] * mc;
    ASSERT_NEAR(l.total.value()[0], ref, 1e-9) << s;
  }
}

TEST(TotalLoss, MonotoneInEachWeight) {
  const auto f = fake_case(3, false);
  for (std::size_t i = 0; i < 4; ++i) {
    double prev = -1.0;
    for (double lam : {0.0, 0.1, 1.0, 5.0}) {
      LossWeights w;
      w.lambda[i] = lam;
      nn::Tape<double> t;
      const double v = fake_loss(t, f, w).total.value()[0];
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(TotalLoss, CapacityMismatch) {
  auto f = fake_case(4, false);
  f.patch.points_local.push_back(Vec3::Zero());
  f.patch.valid_mask.push_back(false);
  nn::Tape<double> t;
  EXPECT_THROW(fake_loss(t, f, LossWeights{}), ConfigMismatch);
}
