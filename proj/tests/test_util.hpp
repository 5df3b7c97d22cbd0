#pragma once

#include <cmath>
#include <vector>

#include "sgpc/bitstream.hpp"
#include "sgpc/geometry.hpp"
#include "sgpc/patching.hpp"

namespace sgpc::testing {

inline std::vector<Vec3> random_points(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  auto s = CounterRng(seed).stream();
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(s.uniform(-scale, scale), s.uniform(-scale, scale), s.uniform(-scale, scale));
  return pts;
}

inline std::vector<Vec3> random_unit_vectors(std::size_t n, std::uint64_t seed) {
  auto s = CounterRng(seed).stream();
  std::vector<Vec3> v(n);
  for (auto& x : v) x = Vec3(s.normal(), s.normal(), s.normal()).normalized();
  return v;
}

inline PackedBox random_box(CounterRng::Stream& s) {
  Eigen::Vector4d q(std::abs(s.normal()), s.normal(), s.normal(), s.normal());
  q.normalize();
  return pack_box(Obb{Vec3(s.uniform(-50, 50), s.uniform(-50, 50), s.uniform(-2, 5)),
                      Vec3(s.uniform(0.01, 20), s.uniform(0.01, 20), s.uniform(0.01, 8)),
                      quaternion_to_rotation(q)});
}

/// Random well-formed scene: up to `max_nodes` nodes over all four layers.
inline EncodedScene random_scene(std::uint64_t seed, std::size_t max_nodes = 12) {
  auto s = CounterRng(seed).stream();
  EncodedScene sc;
  sc.frame_id = static_cast<std::uint32_t>(s.below(1u << 31));
  sc.original_points = static_cast<std::uint32_t>(1 + s.below(200000));
  constexpr std::array<std::uint16_t, 5> dims{8, 16, 32, 64, 128};
  for (auto& d : sc.d_z) d = dims[s.below(dims.size())];
  const std::size_t n = s.below(max_nodes + 1);
  for (std::size_t k = 0; k < n; ++k) {
    EncodedNode node;
    node.id = static_cast<std::uint32_t>(k);
    node.layer = static_cast<std::uint8_t>(1 + s.below(4));
    node.class_id = static_cast<std::uint16_t>(s.below(8));
    node.parent = node.layer == kTerrain ? kNoParent : static_cast<std::uint32_t>(s.below(n));
    node.box = random_box(s);
    const std::size_t cells = node.layer == kTerrain ? s.below(5) : 1;
    for (std::size_t c = 0; c < cells; ++c) {
      EncodedCell cell;
      if (node.layer == kTerrain) cell.box = random_box(s);
      cell.n_valid = static_cast<std::uint16_t>(s.below(2000));
      cell.latent.resize(sc.latent_dim(node.layer));
      for (auto& v : cell.latent) v = static_cast<float>(s.normal());
      node.cells.push_back(std::move(cell));
    }
    sc.nodes.push_back(std::move(node));
  }
  return sc;
}

/// Canonical patch with `n_valid` uniform points in [-1, 1]^3.
inline Patch random_patch(std::size_t n_valid, std::size_t capacity, std::uint64_t seed, ClassId cls = 5,
                          int layer = kObjects) {
  Patch p;
  p.class_id = cls;
  p.layer = layer;
  p.points_local.assign(capacity, Vec3::Zero());
  p.valid_mask.assign(capacity, false);
  const auto pts = random_points(n_valid, seed);
  for (std::size_t i = 0; i < n_valid; ++i) {
    p.points_local[i] = pts[i];
    p.valid_mask[i] = true;
  }
  p.n_valid = n_valid;
  return p;
}

}  // namespace sgpc::testing
