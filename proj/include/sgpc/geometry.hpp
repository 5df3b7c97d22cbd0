#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sgpc/common.hpp"

namespace sgpc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using ClassId = std::uint16_t;

struct LabeledPointCloud {
  std::vector<Vec3> points;
  std::vector<ClassId> labels;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }

  void push_back(const Vec3& p, ClassId label) {
    points.push_back(p);
    labels.push_back(label);
  }

  void validate() const {
    if (points.size() != labels.size()) {
      throw InputError("point cloud has " + std::to_string(points.size()) + " points but " +
                       std::to_string(labels.size()) + " labels");
    }
    for (const auto& p : points) {
      if (!p.allFinite()) throw InputError("point cloud contains a non-finite coordinate");
    }
  }
};

/// Oriented bounding box. Columns of `rotation` are the box axes in world
/// coordinates; `extent` holds the full side lengths along those axes.
struct Obb {
  Vec3 center = Vec3::Zero();
  Vec3 extent = Vec3::Constant(0.01);
  Mat3 rotation = Mat3::Identity();

  Vec3 to_local(const Vec3& x) const { return rotation.transpose() * (x - center); }
  Vec3 to_world(const Vec3& u) const { return rotation * u + center; }

  bool contains(const Vec3& x, double tol = 1e-6) const {
    const Vec3 u = to_local(x);
    for (int a = 0; a < 3; ++a) {
      if (std::abs(u[a]) > 0.5 * extent[a] + tol) return false;
    }
    return true;
  }

  bool operator==(const Obb&) const = default;
};

inline constexpr double kMinObbExtent = 0.01;

inline LabeledPointCloud crop_radius(const LabeledPointCloud& cloud, double radius) {
  if (!(radius > 0.0)) throw InputError("crop radius must be positive");
  LabeledPointCloud out;
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.points[i].squaredNorm() <= r2) out.push_back(cloud.points[i], cloud.labels[i]);
  }
  return out;
}

namespace detail {

// Eigenvectors of a symmetric 3x3 matrix ordered by descending eigenvalue.
// Equal eigenvalues keep the solver's order, so a zero matrix yields I.
inline std::pair<Mat3, Vec3> sorted_eigen(const Mat3& cov) {
  Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
  const Vec3 vals = solver.eigenvalues();
  const Mat3 vecs = solver.eigenvectors();
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return vals[a] > vals[b]; });
  Mat3 r;
  Vec3 v;
  for (int k = 0; k < 3; ++k) {
    r.col(k) = vecs.col(order[k]);
    v[k] = vals[order[k]];
  }
  return {r, v};
}

inline Mat3 covariance(std::span<const Vec3> pts) {
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) {
    const Vec3 d = p - mean;
    cov.noalias() += d * d.transpose();
  }
  return cov / static_cast<double>(pts.size());
}

}  // namespace detail

/// PCA box: axes by descending variance, each axis signed so its largest
/// magnitude component is positive, last axis flipped if needed for det = +1.
inline Obb fit_obb(std::span<const Vec3> pts) {
  if (pts.empty()) throw InputError("fit_obb needs at least one point");
  auto [r, vals] = detail::sorted_eigen(detail::covariance(pts));
  (void)vals;
  for (int k = 0; k < 3; ++k) {
    Eigen::Index arg = 0;
    r.col(k).cwiseAbs().maxCoeff(&arg);
    if (r(arg, k) < 0.0) r.col(k) = -r.col(k);
  }
  if (r.determinant() < 0.0) r.col(2) = -r.col(2);

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& p : pts) {
    const Vec3 u = r.transpose() * p;
    lo = lo.cwiseMin(u);
    hi = hi.cwiseMax(u);
  }
  Obb box;
  box.rotation = r;
  box.center = r * (0.5 * (lo + hi));
  box.extent = (hi - lo).cwiseMax(kMinObbExtent);
  return box;
}

inline Obb fit_obb(const std::vector<Vec3>& pts) { return fit_obb(std::span<const Vec3>(pts)); }

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Static 3-d tree. Nearest queries reproduce the exhaustive scan exactly,
/// including the smallest-index tie break.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> pts, std::size_t leaf_size = 12)
      : pts_(pts), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    index_.resize(pts.size());
    std::iota(index_.begin(), index_.end(), std::size_t{0});
    if (!pts.empty()) build(0, pts.size());
  }

  std::size_t size() const noexcept { return pts_.size(); }

  std::pair<std::size_t, double> nearest(const Vec3& q) const {
    if (pts_.empty()) throw InputError("nearest neighbor query on an empty cloud");
    Best best{0, std::numeric_limits<double>::infinity()};
    search_nearest(0, q, best);
    return {best.index, best.dist2};
  }

  /// Indices within `radius` (inclusive), ascending.
  std::vector<std::size_t> radius(const Vec3& q, double radius) const {
    std::vector<std::size_t> out;
    if (!pts_.empty()) search_radius(0, q, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Node {
    std::size_t begin = 0;
    std::size_t end = 0;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0;
    std::size_t right = 0;
  };
  struct Best {
    std::size_t index;
    double dist2;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end});
    if (end - begin <= leaf_size_) return id;

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(pts_[index_[i]]);
      hi = hi.cwiseMax(pts_[index_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] <= lo[axis]) return id;  // all coincident

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                     [&](std::size_t a, std::size_t b) { return pts_[a][axis] < pts_[b][axis]; });
    const double split = pts_[index_[mid]][axis];
    const std::size_t l = build(begin, mid);
    const std::size_t r = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search_nearest(std::size_t id, const Vec3& q, Best& best) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = index_[i];
        const double d = squared_distance(q, pts_[idx]);
        if (d < best.dist2 || (d == best.dist2 && idx < best.index)) best = {idx, d};
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::size_t first = diff <= 0.0 ? n.left : n.right;
    const std::size_t second = diff <= 0.0 ? n.right : n.left;
    search_nearest(first, q, best);
    if (diff * diff <= best.dist2) search_nearest(second, q, best);
  }

  void search_radius(std::size_t id, const Vec3& q, double r2, std::vector<std::size_t>& out) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        if (squared_distance(q, pts_[index_[i]]) <= r2) out.push_back(index_[i]);
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    if (diff <= 0.0 || diff * diff <= r2) search_radius(n.left, q, r2, out);
    if (diff >= 0.0 || diff * diff <= r2) search_radius(n.right, q, r2, out);
  }

  std::span<const Vec3> pts_;
  std::size_t leaf_size_;
  std::vector<std::size_t> index_;
  std::vector<Node> nodes_;
};

inline constexpr std::size_t kBruteForceLimit = 512;

/// Nearest point by squared Euclidean distance; ties go to the smaller index.
inline std::pair<std::size_t, double> nearest_neighbor(const Vec3& query, std::span<const Vec3> cloud) {
  if (cloud.empty()) throw InputError("nearest neighbor query on an empty cloud");
  if (cloud.size() > kBruteForceLimit) return KdTree(cloud).nearest(query);
  std::size_t best = 0;
  double best_d = squared_distance(query, cloud[0]);
  for (std::size_t i = 1; i < cloud.size(); ++i) {
    const double d = squared_distance(query, cloud[i]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return {best, best_d};
}

/// Unit normals from the smallest-variance direction of each point's
/// radius neighborhood. Oriented z >= 0, then y >= 0, then x >= 0.
inline std::vector<Vec3> estimate_normals(std::span<const Vec3> pts, double radius) {
  if (!(radius > 0.0)) throw InputError("normal radius must be positive");
  std::vector<Vec3> normals(pts.size(), Vec3::UnitZ());
  if (pts.empty()) return normals;
  const KdTree tree(pts);
  std::vector<Vec3> nbrs;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto idx = tree.radius(pts[i], radius);
    if (idx.size() < 3) continue;
    nbrs.clear();
    for (auto j : idx) nbrs.push_back(pts[j]);
    Eigen::SelfAdjointEigenSolver<Mat3> solver(detail::covariance(nbrs));
    Vec3 n = solver.eigenvectors().col(0).normalized();
    const bool flip = n.z() < 0.0 || (n.z() == 0.0 && (n.y() < 0.0 || (n.y() == 0.0 && n.x() < 0.0)));
    if (flip) n = -n;
    normals[i] = n;
  }
  return normals;
}

inline std::vector<Vec3> estimate_normals(const LabeledPointCloud& cloud, double radius) {
  return estimate_normals(std::span<const Vec3>(cloud.points), radius);
}

using CellIndex = std::array<std::int64_t, 3>;

struct OccupancyGrid {
  Vec3 origin = Vec3::Zero();
  Vec3 resolution = Vec3::Ones();
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::vector<CellIndex> cells;  // sorted, unique
};

inline CellIndex cell_of(const Vec3& p, const Vec3& origin, const Vec3& resolution) {
  CellIndex c;
  for (int a = 0; a < 3; ++a) {
    c[a] = static_cast<std::int64_t>(std::floor((p[a] - origin[a]) / resolution[a]));
  }
  return c;
}

inline OccupancyGrid voxelize_occupancy(std::span<const Vec3> pts, const Vec3& resolution,
                                        const Vec3& origin) {
  if (!(resolution.array() > 0.0).all()) throw InputError("voxel resolution must be positive");
  OccupancyGrid grid;
  grid.origin = origin;
  grid.resolution = resolution;
  grid.cells.reserve(pts.size());
  for (const auto& p : pts) {
    const CellIndex c = cell_of(p, origin, resolution);
    for (int a = 0; a < 3; ++a) {
      if (c[a] < 0) throw InputError("point lies below the occupancy grid origin");
      grid.dims[a] = std::max(grid.dims[a], c[a] + 1);
    }
    grid.cells.push_back(c);
  }
  std::sort(grid.cells.begin(), grid.cells.end());
  grid.cells.erase(std::unique(grid.cells.begin(), grid.cells.end()), grid.cells.end());
  return grid;
}

inline OccupancyGrid voxelize_occupancy(const LabeledPointCloud& cloud, const Vec3& resolution,
                                        const Vec3& origin) {
  return voxelize_occupancy(std::span<const Vec3>(cloud.points), resolution, origin);
}

}  // namespace sgpc
