#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sgpc/binary_io.hpp"
#include "sgpc/geometry.hpp"

namespace sgpc {

// .oct layout: "OCT1" | depth u8 | origin 3 x f32 | root edge f32 | child masks,
// one byte per internal node in breadth-first order. Child k of a node sits
// at offset (k & 1, (k >> 1) & 1, (k >> 2) & 1) half-edges from its corner.

inline constexpr std::string_view kOctreeMagic = "OCT1";
inline constexpr int kMaxOctreeDepth = 16;

struct OctreeFrame {
  Vec3 origin = Vec3::Zero();
  double leaf = 1.0;  // power of two
  int depth = 1;

  double edge() const { return std::ldexp(leaf, depth); }
};

namespace detail {

inline bool lattice_fits(const Vec3& lo, const Vec3& hi, double leaf, int depth) {
  const double cells = std::ldexp(1.0, depth);
  for (int a = 0; a < 3; ++a) {
    if (std::floor(hi[a] / leaf) - std::floor(lo[a] / leaf) >= cells) return false;
  }
  return true;
}

inline std::uint64_t morton(std::uint32_t x, std::uint32_t y, std::uint32_t z, int depth) {
  std::uint64_t code = 0;
  for (int l = depth - 1; l >= 0; --l) {
    const std::uint64_t child = ((x >> l) & 1u) | (((y >> l) & 1u) << 1) | (((z >> l) & 1u) << 2);
    code = (code << 3) | child;
  }
  return code;
}

}  // namespace detail

/// Root cube: the smallest power-of-two leaf whose lattice, anchored at
/// multiples of the leaf, covers the cloud with 2^depth cells per axis.
inline OctreeFrame octree_frame(std::span<const Vec3> pts, int depth) {
  if (depth < 1 || depth > kMaxOctreeDepth) throw InputError("octree depth must lie in 1..16");
  if (pts.empty()) throw InputError("cannot build an octree over an empty cloud");
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double span = std::max((hi - lo).maxCoeff(), 1e-9);
  int k = static_cast<int>(std::ceil(std::log2(span))) - depth;
  // Keep the origin, a multiple of the leaf, exact in single precision.
  const double reach = std::max(lo.cwiseAbs().maxCoeff(), hi.cwiseAbs().maxCoeff());
  if (reach > 0.0) k = std::max(k, static_cast<int>(std::ceil(std::log2(reach))) - 23);
  while (!detail::lattice_fits(lo, hi, std::ldexp(1.0, k), depth)) ++k;
  OctreeFrame f;
  f.depth = depth;
  f.leaf = std::ldexp(1.0, k);
  for (int a = 0; a < 3; ++a) f.origin[a] = std::floor(lo[a] / f.leaf) * f.leaf;
  return f;
}

inline std::vector<std::uint8_t> octree_encode(std::span<const Vec3> pts, int depth) {
  const OctreeFrame f = octree_frame(pts, depth);
  const float ox = static_cast<float>(f.origin.x()), oy = static_cast<float>(f.origin.y()),
              oz = static_cast<float>(f.origin.z());
  if (Vec3(ox, oy, oz) != f.origin) throw InputError("octree origin is not representable in single precision");
  const std::uint32_t cells = 1u << depth;
  std::vector<std::uint64_t> codes;
  codes.reserve(pts.size());
  for (const auto& p : pts) {
    std::uint32_t c[3];
    for (int a = 0; a < 3; ++a) {
      const double i = std::floor((p[a] - f.origin[a]) / f.leaf);
      c[a] = static_cast<std::uint32_t>(std::clamp(i, 0.0, static_cast<double>(cells - 1)));
    }
    codes.push_back(detail::morton(c[0], c[1], c[2], depth));
  }
  std::sort(codes.begin(), codes.end());
  codes.erase(std::unique(codes.begin(), codes.end()), codes.end());

  ByteWriter w;
  w.raw(kOctreeMagic);
  w.u8(static_cast<std::uint8_t>(depth));
  w.f32(ox);
  w.f32(oy);
  w.f32(oz);
  w.f32(static_cast<float>(f.edge()));
  // Sorted Morton codes list the nodes of each level in breadth-first order.
  for (int level = 0; level < depth; ++level) {
    const int shift = 3 * (depth - level - 1);
    std::size_t i = 0;
    while (i < codes.size()) {
      const std::uint64_t parent = codes[i] >> (shift + 3);
      std::uint8_t mask = 0;
      while (i < codes.size() && (codes[i] >> (shift + 3)) == parent) {
        mask |= static_cast<std::uint8_t>(1u << ((codes[i] >> shift) & 7u));
        ++i;
      }
      w.u8(mask);
    }
  }
  return std::move(w).bytes();
}

inline std::vector<std::uint8_t> octree_encode(const LabeledPointCloud& cloud, int depth) {
  return octree_encode(std::span<const Vec3>(cloud.points), depth);
}

struct OctreeHeader {
  int depth = 1;
  Vec3 origin = Vec3::Zero();
  double edge = 1.0;
};

/// Occupied leaf centers in breadth-first order.
inline std::vector<Vec3> octree_decode(std::span<const std::uint8_t> bytes, OctreeHeader* header = nullptr) {
  using Kind = FormatError::Kind;
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.raw(4) != kOctreeMagic) throw FormatError(Kind::BadMagic, "not an OCT1 stream");
  OctreeHeader h;
  h.depth = r.u8();
  if (h.depth < 1 || h.depth > kMaxOctreeDepth) throw FormatError(Kind::Malformed, "octree depth outside 1..16");
  for (int a = 0; a < 3; ++a) h.origin[a] = r.f32();
  h.edge = r.f32();
  if (!(h.edge > 0.0) || !std::isfinite(h.edge) || !h.origin.allFinite()) {
    throw FormatError(Kind::Malformed, "invalid octree root cube");
  }
  std::vector<std::uint64_t> level{0};
  for (int l = 0; l < h.depth; ++l) {
    std::vector<std::uint64_t> next;
    for (auto node : level) {
      if (r.remaining() == 0) throw FormatError(Kind::Truncated, "octree stream truncated");
      const std::uint8_t mask = r.u8();
      if (mask == 0) throw FormatError(Kind::Malformed, "empty child mask");
      for (unsigned k = 0; k < 8; ++k) {
        if (mask & (1u << k)) next.push_back((node << 3) | k);
      }
    }
    level = std::move(next);
  }
  if (r.remaining() != 0) throw FormatError(Kind::Malformed, "trailing bytes after octree masks");
  const double leaf = std::ldexp(h.edge, -h.depth);
  std::vector<Vec3> out;
  out.reserve(level.size());
  for (auto code : level) {
    std::uint32_t c[3] = {0, 0, 0};
    for (int l = 0; l < h.depth; ++l) {
      const auto child = static_cast<std::uint32_t>((code >> (3 * l)) & 7u);
      for (int a = 0; a < 3; ++a) c[a] |= ((child >> a) & 1u) << l;
    }
    out.emplace_back(h.origin.x() + (c[0] + 0.5) * leaf, h.origin.y() + (c[1] + 0.5) * leaf,
                     h.origin.z() + (c[2] + 0.5) * leaf);
  }
  if (header) *header = h;
  return out;
}

/// Half of a leaf's space diagonal: the geometric error bound of the codec.
inline double octree_error_bound(const OctreeHeader& h) { return std::ldexp(h.edge, -h.depth) * std::sqrt(3.0) / 2.0; }

}  // namespace sgpc
