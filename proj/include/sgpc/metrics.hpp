#pragma once

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgpc/bitstream.hpp"
#include "sgpc/geometry.hpp"
#include "sgpc/losses.hpp"

namespace sgpc {

inline const Vec3 kIouResolution(0.2, 0.2, 0.1);
inline constexpr double kNormalRadius = 0.5;

namespace detail {

// Mean over `from` of |n_j . (x - y_j)| with y_j the nearest point of `to`.
inline double directed_plane_distance(std::span<const Vec3> from, std::span<const Vec3> to,
                                      std::span<const Vec3> to_normals) {
  double s = 0.0;
  if (to.size() > kBruteForceLimit) {
    const KdTree tree(to);
    for (const auto& x : from) {
      const auto j = tree.nearest(x).first;
      s += std::abs(to_normals[j].dot(x - to[j]));
    }
  } else {
    for (const auto& x : from) {
      const auto j = nearest_neighbor(x, to).first;
      s += std::abs(to_normals[j].dot(x - to[j]));
    }
  }
  return s / static_cast<double>(from.size());
}

}  // namespace detail

/// Symmetric point-to-plane distance in meters; each direction projects onto
/// the normal of the matched point in the target of that direction.
inline double d_perp(std::span<const Vec3> src, std::span<const Vec3> trg, std::span<const Vec3> trg_normals,
                     std::span<const Vec3> src_normals) {
  if (trg_normals.size() != trg.size() || src_normals.size() != src.size()) {
    throw InputError("normal count does not match point count");
  }
  if (src.empty() || trg.empty()) throw InputError("point-to-plane distance of an empty point set");
  return 0.5 * detail::directed_plane_distance(trg, src, src_normals) +
         0.5 * detail::directed_plane_distance(src, trg, trg_normals);
}

/// Grid origin shared by two clouds: the joint minimum corner floored onto
/// the resolution lattice.
inline Vec3 joint_grid_origin(std::span<const Vec3> a, std::span<const Vec3> b, const Vec3& resolution) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  for (const auto& p : a) lo = lo.cwiseMin(p);
  for (const auto& p : b) lo = lo.cwiseMin(p);
  for (int k = 0; k < 3; ++k) lo[k] = std::floor(lo[k] / resolution[k]) * resolution[k];
  return lo;
}

inline double occupancy_iou(std::span<const Vec3> src, std::span<const Vec3> trg,
                            const Vec3& resolution = kIouResolution) {
  if (src.empty() && trg.empty()) return 1.0;
  const Vec3 origin = joint_grid_origin(src, trg, resolution);
  const auto a = voxelize_occupancy(src, resolution, origin).cells;
  const auto b = voxelize_occupancy(trg, resolution, origin).cells;
  std::size_t inter = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++inter;
      ++i;
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MetricsReport {
  double d_cd = 0.0;    // m^2
  double d_perp = 0.0;  // m
  double iou = 0.0;
  double bpp = 0.0;
  double compression_rate = 0.0;
  std::size_t original_points = 0;
  std::size_t reconstructed_points = 0;
  std::size_t stream_bytes = 0;

  static std::string csv_header() {
    return "d_cd_m2,d_perp_m,iou,bpp,compression_rate,original_points,reconstructed_points,stream_bytes";
  }

  std::string csv_row() const {
    std::ostringstream o;
    o << std::setprecision(10) << d_cd << ',' << d_perp << ',' << iou << ',' << bpp << ',' << compression_rate
      << ',' << original_points << ',' << reconstructed_points << ',' << stream_bytes;
    return o.str();
  }

  std::string text() const {
    std::ostringstream o;
    o << std::setprecision(6);
    o << "D_CD               " << d_cd << " m^2\n"
      << "D_perp             " << d_perp << " m\n"
      << "IoU                " << iou << "\n"
      << "bpp                " << bpp << "\n"
      << "compression rate   " << compression_rate << " (vs 112 bits/point)\n"
      << "points             " << original_points << " original, " << reconstructed_points << " reconstructed\n"
      << "stream             " << stream_bytes << " bytes\n";
    return o.str();
  }

  nlohmann::ordered_json json() const {
    return {{"d_cd_m2", d_cd},
            {"d_perp_m", d_perp},
            {"iou", iou},
            {"bpp", bpp},
            {"compression_rate", compression_rate},
            {"original_points", original_points},
            {"reconstructed_points", reconstructed_points},
            {"stream_bytes", stream_bytes}};
  }
};

inline MetricsReport evaluate(const LabeledPointCloud& original, const LabeledPointCloud& reconstructed,
                              std::size_t stream_bytes) {
  if (original.empty()) throw InputError("original cloud is empty");
  if (reconstructed.empty()) throw InputError("reconstruction is empty");
  MetricsReport r;
  r.d_cd = chamfer_distance(original.points, reconstructed.points);
  const auto n_orig = estimate_normals(original, kNormalRadius);
  const auto n_rec = estimate_normals(reconstructed, kNormalRadius);
  r.d_perp = d_perp(reconstructed.points, original.points, n_orig, n_rec);
  r.iou = occupancy_iou(original.points, reconstructed.points);
  r.bpp = compute_bpp(stream_bytes, original.size());
  r.compression_rate = compression_rate(r.bpp);
  r.original_points = original.size();
  r.reconstructed_points = reconstructed.size();
  r.stream_bytes = stream_bytes;
  return r;
}

}  // namespace sgpc
