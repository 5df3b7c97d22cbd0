#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "sgpc/geometry.hpp"

namespace sgpc {

// Class ids of the bundled table.
namespace classes {
inline constexpr ClassId kRoad = 0, kSidewalk = 1, kOtherTerrain = 2, kBuilding = 3, kFence = 4, kPole = 5,
                         kTrunk = 6, kVehicle = 7;
}

struct SynthParams {
  std::size_t points = 50000;
  double half_size = 24.0;  // ground covers [-h, h]^2
  std::size_t walls = 4;
  std::size_t cars = 4;
  std::size_t cylinders = 6;
  std::size_t agents = 3;
  double height_noise = 0.02;

  void validate() const {
    if (points < 100) throw InputError("synthetic scene needs at least 100 points");
    if (!(half_size >= 12.0)) throw InputError("synthetic scene half size must be at least 12 m");
    if (walls == 0 || cars + agents == 0 || cylinders == 0) {
      throw InputError("synthetic scene needs walls, cylinders and at least one car or agent");
    }
  }
};

namespace detail {

// Shares of the point budget: terrain, walls, cars, cylinders, agents.
inline constexpr std::array<double, 5> kSynthShares{0.50, 0.20, 0.15, 0.09, 0.06};

inline double ground_height(double x, double y) {
  return 0.05 * std::sin(0.21 * x) * std::cos(0.17 * y);
}

inline Mat3 yaw(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

// Uniform sample on the surface of an upright box without its bottom face.
inline Vec3 box_surface_point(CounterRng::Stream& s, const Vec3& size) {
  const double ax = size.y() * size.z(), ay = size.x() * size.z(), az = size.x() * size.y();
  const double pick = s.uniform() * (2 * ax + 2 * ay + az);
  Vec3 u(s.uniform(-0.5, 0.5) * size.x(), s.uniform(-0.5, 0.5) * size.y(), s.uniform(0.0, 1.0) * size.z());
  if (pick < 2 * ax) {
    u.x() = (pick < ax ? -0.5 : 0.5) * size.x();
  } else if (pick < 2 * ax + 2 * ay) {
    u.y() = (pick < 2 * ax + ay ? -0.5 : 0.5) * size.y();
  } else {
    u.z() = size.z();
  }
  return u;
}

// Splits `total` over `parts` items as evenly as possible.
inline std::vector<std::size_t> split_even(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> out(parts, parts ? total / parts : 0);
  for (std::size_t i = 0; i < (parts ? total % parts : 0); ++i) ++out[i];
  return out;
}

}  // namespace detail

/// Street-like scene: a noisy ground plane split into road, sidewalks and
/// other terrain, walls behind the sidewalks, cylinders on the sidewalks,
/// car-sized boxes on the road and person-sized boxes on the sidewalks.
/// Produces exactly `points` points.
inline LabeledPointCloud synthesize_scene(const SynthParams& p, std::uint64_t seed) {
  p.validate();
  using namespace classes;
  std::array<std::size_t, 5> budget{};
  for (std::size_t k = 1; k < 5; ++k) {
    budget[k] = static_cast<std::size_t>(std::floor(detail::kSynthShares[k] * static_cast<double>(p.points)));
  }
  if (p.cars == 0) budget[2] = 0;
  if (p.agents == 0) budget[4] = 0;
  const std::size_t assigned = budget[1] + budget[2] + budget[3] + budget[4];
  budget[0] = p.points - assigned;

  LabeledPointCloud cloud;
  cloud.points.reserve(p.points);
  cloud.labels.reserve(p.points);
  const double h = p.half_size;
  const double road = 4.0, walk = 7.0;

  // Ground.
  {
    auto s = CounterRng(mix64(seed, 1)).stream();
    for (std::size_t i = 0; i < budget[0]; ++i) {
      const double x = s.uniform(-h, h), y = s.uniform(-h, h);
      const double z = detail::ground_height(x, y) + p.height_noise * s.normal();
      const double ay = std::abs(y);
      cloud.push_back({x, y, z}, ay < road ? kRoad : (ay < walk ? kSidewalk : kOtherTerrain));
    }
  }

  // Walls alternate sides of the street and building/fence classes.
  {
    const auto counts = detail::split_even(budget[1], p.walls);
    const double span = 2.0 * h - 4.0;
    const double slot = span / static_cast<double>((p.walls + 1) / 2);
    for (std::size_t w = 0; w < p.walls; ++w) {
      auto s = CounterRng(mix64(seed, 2, w)).stream();
      const bool building = (w / 2) % 2 == 0;
      const double side = w % 2 == 0 ? 1.0 : -1.0;
      const double length = std::min(slot - 2.0, s.uniform(8.0, 14.0));
      const double height = building ? s.uniform(4.0, 7.0) : s.uniform(1.2, 1.8);
      const double x0 = -h + 2.0 + slot * static_cast<double>(w / 2) + 0.5 * (slot - length);
      const double y0 = side * (walk + 1.5 + s.uniform(0.0, 1.0));
      for (std::size_t i = 0; i < counts[w]; ++i) {
        const double x = x0 + s.uniform() * length;
        const double y = y0 + s.uniform(-0.1, 0.1);
        const double z = detail::ground_height(x, y0) + s.uniform() * height;
        cloud.push_back({x, y, z}, building ? kBuilding : kFence);
      }
    }
  }

  // Cars on the road, agents on the sidewalks; both use box surfaces.
  const auto boxes = [&](std::size_t n, std::size_t share, std::uint64_t tag, bool car) {
    if (n == 0) return;
    const auto counts = detail::split_even(budget[share], n);
    const double slot = (2.0 * h - 4.0) / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
      auto s = CounterRng(mix64(seed, tag, b)).stream();
      const Vec3 size = car ? Vec3(s.uniform(3.8, 4.8), s.uniform(1.6, 1.9), s.uniform(1.3, 1.7))
                            : Vec3(s.uniform(0.5, 0.8), s.uniform(0.4, 0.7), s.uniform(1.5, 1.9));
      const double cx = -h + 2.0 + slot * (static_cast<double>(b) + 0.5) + s.uniform(-0.2, 0.2) * slot;
      const double cy = car ? (b % 2 == 0 ? -2.0 : 2.0) : (b % 2 == 0 ? -5.5 : 5.5);
      const Mat3 r = detail::yaw(car ? s.uniform(-0.2, 0.2) : s.uniform(0.0, std::numbers::pi));
      const Vec3 base(cx, cy, detail::ground_height(cx, cy) + 0.05);
      for (std::size_t i = 0; i < counts[b]; ++i) {
        cloud.push_back(base + r * detail::box_surface_point(s, size), kVehicle);
      }
    }
  };
  boxes(p.cars, 2, 3, true);

  // Poles and trunks along the sidewalks, offset from the agent slots.
  {
    const auto counts = detail::split_even(budget[3], p.cylinders);
    const double slot = (2.0 * h - 4.0) / static_cast<double>(p.cylinders);
    for (std::size_t c = 0; c < p.cylinders; ++c) {
      auto s = CounterRng(mix64(seed, 4, c)).stream();
      const bool pole = c % 2 == 0;
      const double radius = pole ? s.uniform(0.08, 0.15) : s.uniform(0.15, 0.35);
      const double height = pole ? s.uniform(4.0, 7.0) : s.uniform(2.5, 4.0);
      const double cx = -h + 2.0 + slot * static_cast<double>(c) + 0.25 * slot;
      const double cy = (c / 2) % 2 == 0 ? 6.4 : -6.4;
      const double z0 = detail::ground_height(cx, cy);
      for (std::size_t i = 0; i < counts[c]; ++i) {
        const double a = s.uniform(0.0, 2.0 * std::numbers::pi);
        cloud.push_back({cx + radius * std::cos(a), cy + radius * std::sin(a), z0 + s.uniform() * height},
                        pole ? kPole : kTrunk);
      }
    }
  }

  boxes(p.agents, 4, 5, false);
  if (cloud.size() != p.points) throw Error("synthetic scene point budget mismatch");
  return cloud;
}

}  // namespace sgpc
