#pragma once

#include <Eigen/Core>
#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgpc/binary_io.hpp"
#include "sgpc/lpc_io.hpp"
#include "sgpc/scene_graph.hpp"

namespace sgpc {

// Stream layout (little-endian):
//   "SGPC" | version u8 | flags u8 | frame_id u32 | point count u32 | d_z u16 x4 | node count u32
//   per node:  id u32 | layer u8 | class u16 | parent u32 | box | cell count u16
//   per cell:  [box, terrain only] | n_valid u16 | latent (d_z x f32 or f16)
//   trailer:   CRC-32 of every preceding byte
// box = center 3 x f32 | extent 3 x f32 | quaternion (w, x, y, z) 4 x f32.

inline constexpr std::string_view kStreamMagic = "SGPC";
inline constexpr std::uint8_t kStreamVersion = 1;
inline constexpr std::uint8_t kFlagHalfLatents = 0x01;
inline constexpr std::uint32_t kNoParent = 0xFFFFFFFFu;
inline constexpr std::size_t kHeaderBytes = 4 + 1 + 1 + 4 + 4 + 8 + 4;
inline constexpr std::size_t kTrailerBytes = 4;
inline constexpr std::size_t kBoxBytes = 10 * 4;
inline constexpr std::size_t kNodeFixedBytes = 4 + 1 + 2 + 4 + kBoxBytes + 2;

enum class Precision { F32, F16 };

inline const char* precision_name(Precision p) { return p == Precision::F16 ? "f16" : "f32"; }

/// A box as transmitted: single precision, rotation as a unit quaternion
/// with non-negative scalar part.
struct PackedBox {
  std::array<float, 3> center{};
  std::array<float, 3> extent{};
  std::array<float, 4> quat{1.f, 0.f, 0.f, 0.f};  // w, x, y, z

  bool operator==(const PackedBox&) const = default;
};

inline PackedBox pack_box(const Obb& obb) {
  PackedBox b;
  const Eigen::Vector4d q = rotation_to_quaternion(obb.rotation);
  for (int a = 0; a < 3; ++a) {
    b.center[static_cast<std::size_t>(a)] = static_cast<float>(obb.center[a]);
    b.extent[static_cast<std::size_t>(a)] = static_cast<float>(obb.extent[a]);
  }
  for (int k = 0; k < 4; ++k) b.quat[static_cast<std::size_t>(k)] = static_cast<float>(q[k]);
  return b;
}

inline Obb unpack_box(const PackedBox& b) {
  Obb obb;
  obb.center = Vec3(b.center[0], b.center[1], b.center[2]);
  obb.extent = Vec3(b.extent[0], b.extent[1], b.extent[2]);
  obb.rotation = quaternion_to_rotation(Eigen::Vector4d(b.quat[0], b.quat[1], b.quat[2], b.quat[3]));
  return obb;
}

struct EncodedCell {
  PackedBox box;  // terrain cells only
  std::uint16_t n_valid = 0;
  std::vector<float> latent;

  bool operator==(const EncodedCell&) const = default;
};

struct EncodedNode {
  std::uint32_t id = 0;
  std::uint8_t layer = kTerrain;
  std::uint16_t class_id = 0;
  std::uint32_t parent = kNoParent;  // terrain node of the node's edge
  PackedBox box;
  std::vector<EncodedCell> cells;

  bool operator==(const EncodedNode&) const = default;
};

struct EncodedScene {
  std::uint32_t frame_id = 0;
  std::uint32_t original_points = 0;
  std::array<std::uint16_t, 4> d_z{16, 16, 16, 16};
  std::vector<EncodedNode> nodes;

  bool operator==(const EncodedScene&) const = default;

  std::uint16_t latent_dim(int layer) const { return d_z[static_cast<std::size_t>(layer - 1)]; }

  void validate() const {
    for (const auto& n : nodes) {
      if (n.layer < 1 || n.layer > 4) throw InputError("node " + std::to_string(n.id) + " has layer outside 1..4");
      if (n.layer != kTerrain && n.cells.size() != 1) {
        throw InputError("non-terrain node " + std::to_string(n.id) + " must carry exactly one latent");
      }
      if (n.cells.size() > 0xFFFF) throw InputError("too many cells in node " + std::to_string(n.id));
      for (const auto& c : n.cells) {
        if (c.latent.size() != latent_dim(n.layer)) {
          throw InputError("latent of node " + std::to_string(n.id) + " has length " +
                           std::to_string(c.latent.size()) + ", layer expects " +
                           std::to_string(latent_dim(n.layer)));
        }
      }
    }
  }
};

namespace detail {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large streams.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void write_box(ByteWriter& w, const PackedBox& b) {
  double norm2 = 0.0;
  for (float q : b.quat) norm2 += static_cast<double>(q) * q;
  if (std::abs(std::sqrt(norm2) - 1.0) > 1e-4) throw InputError("box quaternion is not normalized");
  if (b.quat[0] < 0.f) throw InputError("box quaternion has a negative scalar part");
  for (float v : b.center) w.f32(v);
  for (float v : b.extent) w.f32(v);
  for (float v : b.quat) w.f32(v);
}

inline PackedBox read_box(ByteReader& r) {
  PackedBox b;
  for (auto& v : b.center) v = r.f32();
  for (auto& v : b.extent) v = r.f32();
  for (auto& v : b.quat) v = r.f32();
  return b;
}

inline std::uint16_t to_half_bits(float v) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(v));
}

inline float from_half_bits(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

}  // namespace detail

/// Rounds latents through half precision, as an f16 stream would.
inline float round_to_half(float v) { return detail::from_half_bits(detail::to_half_bits(v)); }

inline std::vector<std::uint8_t> serialize(const EncodedScene& scene, Precision precision = Precision::F32) {
  scene.validate();
  if (scene.nodes.size() > 0xFFFFFFFFu) throw InputError("too many nodes");
  ByteWriter w;
  w.raw(kStreamMagic);
  w.u8(kStreamVersion);
  w.u8(precision == Precision::F16 ? kFlagHalfLatents : 0);
  w.u32(scene.frame_id);
  w.u32(scene.original_points);
  for (auto d : scene.d_z) w.u16(d);
  w.u32(static_cast<std::uint32_t>(scene.nodes.size()));
  for (const auto& n : scene.nodes) {
    w.u32(n.id);
    w.u8(n.layer);
    w.u16(n.class_id);
    w.u32(n.parent);
    detail::write_box(w, n.box);
    w.u16(static_cast<std::uint16_t>(n.cells.size()));
    for (const auto& c : n.cells) {
      if (n.layer == kTerrain) detail::write_box(w, c.box);
      w.u16(c.n_valid);
      for (float v : c.latent) {
        if (precision == Precision::F16) {
          w.u16(detail::to_half_bits(v));
        } else {
          w.f32(v);
        }
      }
    }
  }
  w.u32(detail::crc32_of(w.bytes()));
  return std::move(w).bytes();
}

/// Inverse of serialize. The checksum is verified before any node is parsed,
/// so a damaged stream of plausible length fails with BadChecksum.
inline EncodedScene deserialize(std::span<const std::uint8_t> bytes) {
  using Kind = FormatError::Kind;
  const std::size_t head = std::min(bytes.size(), kStreamMagic.size());
  const std::string_view prefix(reinterpret_cast<const char*>(bytes.data()), head);
  if (prefix != kStreamMagic.substr(0, head)) throw FormatError(Kind::BadMagic, "not an SGPC stream");
  if (bytes.size() < 5) throw FormatError(Kind::Truncated, "stream ends inside the header");
  if (bytes[4] != kStreamVersion) {
    throw FormatError(Kind::BadVersion, "unsupported stream version " + std::to_string(bytes[4]));
  }
  if (bytes.size() < kHeaderBytes + kTrailerBytes) throw FormatError(Kind::Truncated, "stream ends inside the header");
  const auto body = bytes.first(bytes.size() - kTrailerBytes);
  ByteReader trailer(bytes.last(kTrailerBytes));
  if (trailer.u32() != detail::crc32_of(body)) throw FormatError(Kind::BadChecksum, "stream checksum mismatch");

  ByteReader r(body);
  r.raw(5);
  const std::uint8_t flags = r.u8();
  if ((flags & ~kFlagHalfLatents) != 0) throw FormatError(Kind::Malformed, "unknown stream flags");
  const bool half = (flags & kFlagHalfLatents) != 0;
  EncodedScene scene;
  scene.frame_id = r.u32();
  scene.original_points = r.u32();
  for (auto& d : scene.d_z) d = r.u16();
  const std::uint32_t count = r.u32();
  // Every node needs at least kNodeFixedBytes, which bounds the reservation.
  if (count > r.remaining() / kNodeFixedBytes) throw FormatError(Kind::Truncated, "node table exceeds the stream");
  scene.nodes.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    EncodedNode n;
    n.id = r.u32();
    n.layer = r.u8();
    if (n.layer < 1 || n.layer > 4) throw FormatError(Kind::Malformed, "node layer outside 1..4");
    n.class_id = r.u16();
    n.parent = r.u32();
    n.box = detail::read_box(r);
    const std::uint16_t cells = r.u16();
    if (n.layer != kTerrain && cells != 1) throw FormatError(Kind::Malformed, "non-terrain node without one cell");
    const std::size_t dz = scene.latent_dim(n.layer);
    n.cells.resize(cells);
    for (auto& c : n.cells) {
      if (n.layer == kTerrain) c.box = detail::read_box(r);
      c.n_valid = r.u16();
      c.latent.resize(dz);
      for (auto& v : c.latent) v = half ? detail::from_half_bits(r.u16()) : r.f32();
    }
    scene.nodes.push_back(std::move(n));
  }
  if (r.remaining() != 0) throw FormatError(Kind::Malformed, "unexpected bytes before the checksum");
  return scene;
}

/// Stream size from the layout alone.
inline std::size_t stream_size(const EncodedScene& scene, Precision precision) {
  const std::size_t value_bytes = precision == Precision::F16 ? 2 : 4;
  std::size_t n = kHeaderBytes + kTrailerBytes;
  for (const auto& node : scene.nodes) {
    n += kNodeFixedBytes;
    const std::size_t per_cell = 2 + value_bytes * scene.latent_dim(node.layer) + (node.layer == kTerrain ? kBoxBytes : 0);
    n += per_cell * node.cells.size();
  }
  return n;
}

inline double compute_bpp(std::size_t byte_length, std::size_t original_point_count) {
  if (original_point_count == 0) throw InputError("bits per point needs a positive point count");
  return 8.0 * static_cast<double>(byte_length) / static_cast<double>(original_point_count);
}

/// 1 - bpp / 112, the raw .lpc cost per point.
inline double compression_rate(double bpp) { return 1.0 - bpp / kRawBitsPerPoint; }

}  // namespace sgpc
