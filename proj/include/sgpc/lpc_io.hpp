#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sgpc/binary_io.hpp"
#include "sgpc/geometry.hpp"

namespace sgpc {

// `.lpc`: "LPC1", u64 count, then per point 3 x f32 + u16 label, little-endian.
inline constexpr std::string_view kLpcMagic = "LPC1";
inline constexpr double kRawBitsPerPoint = 112.0;

inline std::vector<std::uint8_t> encode_lpc(const LabeledPointCloud& cloud) {
  cloud.validate();
  ByteWriter w;
  w.raw(kLpcMagic);
  w.u64(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) w.f32(static_cast<float>(cloud.points[i][a]));
    w.u16(cloud.labels[i]);
  }
  return std::move(w).bytes();
}

inline LabeledPointCloud decode_lpc(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.raw(4) != kLpcMagic) {
    throw FormatError(FormatError::Kind::BadMagic, "not an LPC1 point cloud");
  }
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 14) {
    throw FormatError(FormatError::Kind::Truncated, "point cloud payload shorter than its count");
  }
  LabeledPointCloud cloud;
  cloud.points.reserve(n);
  cloud.labels.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = r.f32();
    cloud.push_back(p, r.u16());
  }
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::Malformed, "trailing bytes after point cloud");
  return cloud;
}

/// Plain "x y z label" lines; blank lines and '#' comments are skipped.
inline LabeledPointCloud parse_xyzl(std::istream& in) {
  LabeledPointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double x, y, z;
    long label;
    if (!(ls >> x >> y >> z >> label) || label < 0 || label > 0xFFFF) {
      throw FormatError(FormatError::Kind::Malformed, "bad XYZL line " + std::to_string(lineno));
    }
    cloud.push_back(Vec3(x, y, z), static_cast<ClassId>(label));
  }
  cloud.validate();
  return cloud;
}

inline void write_xyzl(std::ostream& out, const LabeledPointCloud& cloud) {
  out.precision(9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out << cloud.points[i].x() << ' ' << cloud.points[i].y() << ' ' << cloud.points[i].z() << ' '
        << cloud.labels[i] << '\n';
  }
}

/// Reads `.lpc` by magic, otherwise falls back to ASCII XYZL.
inline LabeledPointCloud load_cloud(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 4 && std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) == kLpcMagic) {
    return decode_lpc(bytes);
  }
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  return parse_xyzl(in);
}

inline void save_cloud(const std::string& path, const LabeledPointCloud& cloud) {
  write_file(path, encode_lpc(cloud));
}

}  // namespace sgpc
