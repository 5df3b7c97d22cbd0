#include <gtest/gtest.h>

#include <set>

#include "sgpc/patching.hpp"
#include "sgpc/synth.hpp"
#include "invariants.hpp"
#include "test_util.hpp"

using namespace sgpc;
using sgpc::testing::random_points;

namespace {

GraphNode box_node(const Obb& obb, ClassId cls, int layer = kObjects) {
  GraphNode n;
  n.layer = layer;
  n.class_id = cls;
  n.obb = obb;
  return n;
}

Obb random_obb(std::uint64_t seed) {
  auto s = CounterRng(seed).stream();
  Obb b;
  b.center = Vec3(s.uniform(-5, 5), s.uniform(-5, 5), s.uniform(-1, 1));
  b.extent = Vec3(s.uniform(0.5, 4), s.uniform(0.5, 4), s.uniform(0.5, 4));
  b.rotation = Eigen::Quaterniond(s.normal(), s.normal(), s.normal(), s.normal()).normalized().toRotationMatrix();
  return b;
}

}  // namespace

TEST(ExtractPatch, Examples) {
  Obb b;
  b.extent = Vec3(2, 2, 2);
  LabeledPointCloud c;
  c.push_back(Vec3(0.5, 0, 0), 5);
  c.push_back(Vec3(2, 0, 0), 5);
  c.push_back(Vec3(0.1, 0, 0), 6);
  const auto out = extract_patch(c, box_node(b, 5), 0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], Vec3(0.5, 0, 0));
  EXPECT_THROW(extract_patch(c, box_node(b, 5), 1), InputError);
}

TEST(ExtractPatch, RotatedBoxMatchesDirectCheck) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Obb b = random_obb(seed);
    LabeledPointCloud c;
    auto s = CounterRng(seed + 50).stream();
    for (const auto& p : random_points(500, seed, 6.0)) c.push_back(p, static_cast<ClassId>(s.below(2)));
    const auto out = extract_patch(c, box_node(b, 1), 0);
    std::vector<Vec3> expected;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const Vec3 u = b.rotation.transpose() * (c.points[i] - b.center);
      bool in = c.labels[i] == 1;
      for (int a = 0; a < 3; ++a) in = in && std::abs(u[a]) <= b.extent[a] / 2 + 1e-6;
      if (in) expected.push_back(c.points[i]);
    }
    EXPECT_EQ(out, expected);
  }
}

TEST(ExtractPatch, TerrainCellUsesCellBox) {
  GraphNode n;
  n.layer = kTerrain;
  n.class_id = 0;
  n.obb.extent = Vec3(100, 100, 100);
  TerrainCell cell;
  cell.obb.extent = Vec3(1, 1, 1);
  n.terrain_cells.push_back(cell);
  LabeledPointCloud c;
  c.push_back(Vec3(0.2, 0, 0), 0);
  c.push_back(Vec3(3, 0, 0), 0);
  EXPECT_EQ(extract_patch(c, n, 0).size(), 1u);
  EXPECT_THROW(extract_patch(c, n, 1), InputError);
}

TEST(NormalizePatch, CenterAndCorner) {
  const Obb b = random_obb(3);
  const std::vector<Vec3> pts{b.center, b.center + b.rotation * (b.extent / 2)};
  const auto local = normalize_patch(pts, b);
  EXPECT_LT(local[0].norm(), 1e-12);
  EXPECT_LT((local[1] - Vec3::Ones()).norm(), 1e-12);
  Obb thin = b;
  thin.extent.z() = 1e-7;
  EXPECT_THROW(normalize_patch(pts, thin), InputError);
}

TEST(NormalizePatch, RoundTrip) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Obb b = random_obb(seed);
    const auto pts = random_points(100, seed + 9, 10.0);
    const auto back = denormalize_patch(normalize_patch(pts, b), b);
    for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_LT((back[i] - pts[i]).norm(), 1e-5);
  }
}

TEST(FixSize, PadAndExact) {
  const std::vector<Vec3> three{{0.1, 0, 0}, {0, 0.2, 0}, {0, 0, 0.3}};
  const auto p = fix_size(three, 5, 1);
  EXPECT_EQ(p.mask, (std::vector<bool>{true, true, true, false, false}));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(p.points[i], three[i]);
  EXPECT_EQ(p.points[3], Vec3::Zero());
  EXPECT_EQ(p.points[4], Vec3::Zero());

  const auto five = random_points(5, 2);
  const auto q = fix_size(five, 5, 9);
  EXPECT_EQ(q.points, five);
  EXPECT_EQ(q.mask, std::vector<bool>(5, true));
  EXPECT_THROW(fix_size(five, 0, 1), InputError);
}

TEST(FixSize, SubsampleIsReproducibleSubset) {
  const auto idx = sample_without_replacement(1000, 320, 42);
  EXPECT_EQ(idx, sample_without_replacement(1000, 320, 42));
  ASSERT_EQ(idx.size(), 320u);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 320u);
  EXPECT_LT(idx.back(), 1000u);
  EXPECT_NE(idx, sample_without_replacement(1000, 320, 43));

  const auto pts = random_points(1000, 8);
  const auto a = fix_size(pts, 320, 42);
  const auto b = fix_size(pts, 320, 42);
  EXPECT_EQ(a.points, b.points);
  for (std::size_t r = 0; r < 320; ++r) EXPECT_EQ(a.points[r], pts[idx[r]]);
}

TEST(FixSize, SeedIndependentWhenUnderCapacity) {
  const auto pts = random_points(40, 3);
  EXPECT_EQ(fix_size(pts, 64, 1).points, fix_size(pts, 64, 999).points);
}

TEST(FixSize, UniformInclusionFrequency) {
  // Each index should be picked with probability k/n.
  std::vector<int> hits(50, 0);
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    for (auto i : sample_without_replacement(50, 10, static_cast<std::uint64_t>(t))) ++hits[i];
  }
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(trials), 0.2, 0.035);
}

TEST(MakePatches, CanonicalAndCoverTerritory) {
  const auto table = SemanticClassTable::bundled();
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    SynthParams p;
    p.points = 10000;
    const auto cloud = synthesize_scene(p, seed);
    const auto g = build_scene_graph(cloud, table, {}, 3);
    const auto patches = make_patches(cloud, g);
    std::size_t expected = 0;
    for (const auto& n : g.nodes) expected += n.layer == kTerrain ? n.terrain_cells.size() : (n.members.empty() ? 0 : 1);
    ASSERT_EQ(patches.size(), expected);
    for (const auto& pt : patches) {
      EXPECT_TRUE(is_canonical(pt));
      EXPECT_EQ(pt.capacity(), kDefaultPatchCapacity[static_cast<std::size_t>(pt.layer - 1)]);
      const auto& node = g.nodes[pt.node_id];
      EXPECT_EQ(pt.class_id, node.class_id);
      const auto& members = node.layer == kTerrain ? node.terrain_cells[pt.cell_index].members : node.members;
      EXPECT_EQ(pt.n_valid, std::min(members.size(), pt.capacity()));
      // Territory points all pass the box membership test of their node.
      if (!node.catch_all) {
        const auto box_pts = extract_patch(cloud, node, pt.cell_index);
        std::set<std::array<double, 3>> inside;
        for (const auto& x : box_pts) inside.insert({x.x(), x.y(), x.z()});
        for (auto i : members) {
          const auto& x = cloud.points[i];
          EXPECT_TRUE(inside.count({x.x(), x.y(), x.z()}));
        }
      }
    }
    // Deterministic from (frame, node, cell).
    const auto again = make_patches(cloud, g);
    for (std::size_t k = 0; k < patches.size(); ++k) EXPECT_EQ(again[k].points_local, patches[k].points_local);
  }
}

TEST(MakePatches, RandomCloudsAreCanonical) {
  const auto table = SemanticClassTable::bundled();
  GraphParams gp;
  gp.min_points = 3;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto cloud = sgpc::testing::random_labeled_cloud(mix64(seed, 5));
    const auto g = build_scene_graph(cloud, table, gp);
    for (const auto& p : make_patches(cloud, g, {16, 32, 8, 24})) {
      ASSERT_EQ(sgpc::testing::patch_violation(p), "") << "seed " << seed << " node " << p.node_id;
      EXPECT_TRUE(is_canonical(p));
      ++checked;
    }
  }
  EXPECT_GT(checked, 200u);
}
