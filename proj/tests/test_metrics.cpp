#include <gtest/gtest.h>

#include <set>

#include "sgpc/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace sgpc;
using sgpc::testing::brute_d_perp;
using sgpc::testing::random_points;
using sgpc::testing::random_unit_vectors;

namespace {

std::vector<Vec3> plane(double z, int side = 20, double step = 0.1, double shift = 0.0) {
  std::vector<Vec3> p;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) p.emplace_back(i * step + shift, j * step, z);
  return p;
}

LabeledPointCloud labeled(const std::vector<Vec3>& pts) {
  LabeledPointCloud c;
  for (const auto& p : pts) c.push_back(p, 0);
  return c;
}

}  // namespace

TEST(DPerp, ParallelPlanes) {
  const auto a = plane(0.0), b = plane(0.1);
  const std::vector<Vec3> na(a.size(), Vec3::UnitZ()), nb(b.size(), Vec3::UnitZ());
  EXPECT_NEAR(d_perp(a, b, nb, na), 0.1, 1e-12);
}

TEST(DPerp, TangentialShiftIsFree) {
  const auto a = plane(0.0), b = plane(0.0, 20, 0.1, 0.03);
  const std::vector<Vec3> n(a.size(), Vec3::UnitZ());
  EXPECT_NEAR(d_perp(a, b, n, n), 0.0, 1e-15);
  EXPECT_GT(chamfer_distance(a, b), 0.0);
}

TEST(DPerp, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 120; ++s) {
    auto st = CounterRng(mix64(s, 31)).stream();
    const auto src = random_points(1 + st.below(512), mix64(s, 1));
    const auto trg = random_points(1 + st.below(512), mix64(s, 2));
    const auto ns = random_unit_vectors(src.size(), mix64(s, 3));
    const auto nt = random_unit_vectors(trg.size(), mix64(s, 4));
    const double ref = brute_d_perp(src, trg, nt, ns);
    ASSERT_NEAR(d_perp(src, trg, nt, ns), ref, 1e-9) << s;
  }
  const auto big = random_points(2000, 5), small = random_points(600, 6);
  const auto nb = random_unit_vectors(big.size(), 7), ns = random_unit_vectors(small.size(), 8);
  EXPECT_NEAR(d_perp(big, small, ns, nb), brute_d_perp(big, small, ns, nb), 1e-9);
}

TEST(DPerp, Errors) {
  const auto a = random_points(5, 1);
  const auto n = random_unit_vectors(5, 2);
  EXPECT_THROW(d_perp(a, a, n, std::vector<Vec3>(4)), InputError);
  EXPECT_THROW(d_perp({}, a, n, {}), InputError);
}

TEST(Iou, Examples) {
  const auto a = random_points(300, 1, 3.0);
  EXPECT_EQ(occupancy_iou(a, a), 1.0);
  auto far = a;
  for (auto& p : far) p.x() += 100.0;
  EXPECT_EQ(occupancy_iou(a, far), 0.0);
  EXPECT_EQ(occupancy_iou({}, {}), 1.0);
  EXPECT_EQ(occupancy_iou(a, {}), 0.0);
  // Cells c1, c2 against c2, c3 along x at 0.2 m.
  const std::vector<Vec3> A{{0.05, 0.05, 0.05}, {0.25, 0.05, 0.05}, {0.26, 0.06, 0.02}};
  const std::vector<Vec3> B{{0.3, 0.1, 0.02}, {0.5, 0.1, 0.02}};
  EXPECT_DOUBLE_EQ(occupancy_iou(A, B), 1.0 / 3.0);
}

TEST(Iou, MatchesSetOracleAndIsSymmetric) {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto st = CounterRng(mix64(s, 41)).stream();
    auto a = random_points(1 + st.below(200), mix64(s, 1), 0.6);
    auto b = random_points(1 + st.below(200), mix64(s, 2), 0.6);
    for (auto& p : b) p += Vec3(0.3, -0.2, 0.1);
    const double v = occupancy_iou(a, b);
    ASSERT_EQ(v, occupancy_iou(b, a));
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
    if (s % 10 == 0) {
      Vec3 lo = Vec3::Constant(1e9);
      for (const auto& p : a) lo = lo.cwiseMin(p);
      for (const auto& p : b) lo = lo.cwiseMin(p);
      auto key = [&](const Vec3& p) {
        std::array<long, 3> k;
        for (int i = 0; i < 3; ++i) {
          const double o = std::floor(lo[i] / kIouResolution[i]) * kIouResolution[i];
          k[i] = static_cast<long>(std::floor((p[i] - o) / kIouResolution[i]));
        }
        return k;
      };
      std::set<std::array<long, 3>> sa, sb, su;
      for (const auto& p : a) sa.insert(key(p)), su.insert(key(p));
      for (const auto& p : b) sb.insert(key(p)), su.insert(key(p));
      std::size_t inter = 0;
      for (const auto& k : sa) inter += sb.count(k);
      ASSERT_DOUBLE_EQ(v, static_cast<double>(inter) / static_cast<double>(su.size()));
    }
  }
}

TEST(Evaluate, IdentityReport) {
  const auto c = labeled(random_points(800, 3, 2.0));
  const auto r = evaluate(c, c, 1000);
  EXPECT_EQ(r.d_cd, 0.0);
  EXPECT_EQ(r.d_perp, 0.0);
  EXPECT_EQ(r.iou, 1.0);
  EXPECT_DOUBLE_EQ(r.bpp, 10.0);
  EXPECT_DOUBLE_EQ(r.compression_rate, 1.0 - 10.0 / 112.0);
  EXPECT_EQ(r.original_points, 800u);
}

TEST(Evaluate, SinglePointTranslation) {
  const auto a = labeled({Vec3(0, 0, 0)}), b = labeled({Vec3(10, 0, 0)});
  const auto r = evaluate(a, b, 30);
  EXPECT_DOUBLE_EQ(r.d_cd, 100.0);
  EXPECT_EQ(r.iou, 0.0);
  EXPECT_GE(r.d_perp, 0.0);
  EXPECT_LE(r.d_perp, 10.0);
}

TEST(Evaluate, ErrorsAndDeterminism) {
  const auto a = labeled(random_points(100, 1));
  EXPECT_THROW(evaluate(a, LabeledPointCloud{}, 10), InputError);
  EXPECT_THROW(evaluate(LabeledPointCloud{}, a, 10), InputError);
  const auto b = labeled(random_points(90, 2));
  EXPECT_EQ(evaluate(a, b, 77).csv_row(), evaluate(a, b, 77).csv_row());
}

TEST(Report, Formats) {
  const auto a = labeled(random_points(100, 1)), b = labeled(random_points(90, 2));
  const auto r = evaluate(a, b, 500);
  const auto j = r.json();
  EXPECT_EQ(j["stream_bytes"], 500);
  EXPECT_DOUBLE_EQ(j["d_cd_m2"].get<double>(), r.d_cd);
  const auto head = MetricsReport::csv_header(), row = r.csv_row();
  EXPECT_EQ(std::count(head.begin(), head.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_NE(r.text().find("bpp"), std::string::npos);
}
