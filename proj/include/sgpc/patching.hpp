#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "sgpc/scene_graph.hpp"

namespace sgpc {

/// Per-layer patch capacity, indexed by layer - 1.
inline constexpr std::array<std::size_t, 4> kDefaultPatchCapacity{720, 1720, 320, 1536};

/// Fixed-size patch in the box frame scaled to [-1, 1]^3. Valid rows form a
/// prefix; the remaining rows are zero.
struct Patch {
  std::uint32_t node_id = 0;
  std::uint32_t cell_index = 0;
  ClassId class_id = 0;
  int layer = kTerrain;
  std::vector<Vec3> points_local;  // size == capacity
  std::vector<bool> valid_mask;    // size == capacity
  std::size_t n_valid = 0;
  Obb obb;

  std::size_t capacity() const { return points_local.size(); }
};

/// Points sharing the node label that fall inside its box (or cell box).
inline std::vector<Vec3> extract_patch(const LabeledPointCloud& cloud, const GraphNode& node, std::size_t cell) {
  const Obb* box = &node.obb;
  if (node.layer == kTerrain) {
    if (cell >= node.terrain_cells.size()) throw InputError("terrain cell index out of range");
    box = &node.terrain_cells[cell].obb;
  } else if (cell != 0) {
    throw InputError("non-terrain nodes only have cell 0");
  }
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.labels[i] == node.class_id && box->contains(cloud.points[i], 1e-6)) out.push_back(cloud.points[i]);
  }
  return out;
}

inline void require_valid_extent(const Obb& obb) {
  if ((obb.extent.array() < 1e-6).any()) throw InputError("box extent below 1e-6");
}

inline std::vector<Vec3> normalize_patch(std::span<const Vec3> world, const Obb& obb) {
  require_valid_extent(obb);
  std::vector<Vec3> out;
  out.reserve(world.size());
  for (const auto& x : world) out.push_back((2.0 * obb.to_local(x)).cwiseQuotient(obb.extent));
  return out;
}

inline Vec3 denormalize_point(const Vec3& local, const Obb& obb) {
  return obb.to_world(0.5 * local.cwiseProduct(obb.extent));
}

inline std::vector<Vec3> denormalize_patch(std::span<const Vec3> local, const Obb& obb) {
  require_valid_extent(obb);
  std::vector<Vec3> out;
  out.reserve(local.size());
  for (const auto& u : local) out.push_back(denormalize_point(u, obb));
  return out;
}

/// Indices of a uniform `k`-subset of [0, n), ascending, from partial
/// Fisher-Yates on a counter-based stream.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const CounterRng rng(seed);
  for (std::size_t i = 0; i < k && i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(i, n - i));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(std::min(k, n));
  std::sort(perm.begin(), perm.end());
  return perm;
}

struct FixedPatch {
  std::vector<Vec3> points;
  std::vector<bool> mask;
};

/// Subsample (count > capacity) or zero-pad to exactly `capacity` rows.
inline FixedPatch fix_size(std::span<const Vec3> local, std::size_t capacity, std::uint64_t seed) {
  if (capacity < 1) throw InputError("patch capacity must be at least 1");
  FixedPatch out{std::vector<Vec3>(capacity, Vec3::Zero()), std::vector<bool>(capacity, false)};
  if (local.size() <= capacity) {
    std::copy(local.begin(), local.end(), out.points.begin());
    std::fill_n(out.mask.begin(), local.size(), true);
    return out;
  }
  const auto picked = sample_without_replacement(local.size(), capacity, seed);
  for (std::size_t r = 0; r < capacity; ++r) out.points[r] = local[picked[r]];
  std::fill(out.mask.begin(), out.mask.end(), true);
  return out;
}

inline std::uint64_t subsample_seed(std::uint32_t frame_id, std::uint32_t node_id, std::uint32_t cell_index) {
  return mix64(frame_id, node_id, cell_index);
}

/// Builds the patch for a set of member points of a node (or terrain cell).
inline Patch make_patch(const LabeledPointCloud& cloud, std::span<const std::size_t> members, const Obb& obb,
                        const GraphNode& node, std::uint32_t cell_index, std::size_t capacity,
                        std::uint32_t frame_id) {
  std::vector<Vec3> world;
  world.reserve(members.size());
  for (auto id : members) world.push_back(cloud.points[id]);
  auto local = normalize_patch(world, obb);
  // Absorb rounding at the box faces.
  for (auto& p : local) p = p.cwiseMax(-1.0).cwiseMin(1.0);
  auto fixed = fix_size(local, capacity, subsample_seed(frame_id, node.id, cell_index));
  Patch patch;
  patch.node_id = node.id;
  patch.cell_index = cell_index;
  patch.class_id = node.class_id;
  patch.layer = node.layer;
  patch.points_local = std::move(fixed.points);
  patch.valid_mask = std::move(fixed.mask);
  patch.n_valid = static_cast<std::size_t>(std::count(patch.valid_mask.begin(), patch.valid_mask.end(), true));
  patch.obb = obb;
  return patch;
}

/// One patch per non-terrain node and per terrain cell, in node-id then
/// cell order. Nodes without points yield no patch.
inline std::vector<Patch> make_patches(const LabeledPointCloud& cloud, const SceneGraph& graph,
                                       const std::array<std::size_t, 4>& capacity = kDefaultPatchCapacity) {
  std::vector<Patch> patches;
  for (const auto& node : graph.nodes) {
    const std::size_t cap = capacity[static_cast<std::size_t>(node.layer - 1)];
    if (node.layer == kTerrain) {
      for (std::size_t c = 0; c < node.terrain_cells.size(); ++c) {
        const auto& cell = node.terrain_cells[c];
        patches.push_back(
            make_patch(cloud, cell.members, cell.obb, node, static_cast<std::uint32_t>(c), cap, graph.frame_id));
      }
    } else if (!node.members.empty()) {
      patches.push_back(make_patch(cloud, node.members, node.obb, node, 0, cap, graph.frame_id));
    }
  }
  return patches;
}

/// Canonical-form check: mask is a prefix, invalid rows zero, coordinates in range.
inline bool is_canonical(const Patch& p) {
  if (p.valid_mask.size() != p.points_local.size()) return false;
  std::size_t count = 0;
  for (std::size_t i = 0; i < p.valid_mask.size(); ++i) {
    if (p.valid_mask[i]) {
      if (i != count) return false;
      ++count;
      if ((p.points_local[i].cwiseAbs().array() > 1.0 + 1e-6).any()) return false;
    } else if (!p.points_local[i].isZero(0.0)) {
      return false;
    }
  }
  return count == p.n_valid;
}

}  // namespace sgpc
