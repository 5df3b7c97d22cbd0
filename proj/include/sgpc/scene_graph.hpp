#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Geometry>

#include "sgpc/geometry.hpp"

namespace sgpc {

enum Layer : int { kTerrain = 1, kInfrastructure = 2, kObjects = 3, kAgents = 4 };
inline constexpr int kNumLayers = 4;

struct ClassInfo {
  std::string name;
  int layer = kTerrain;
};

/// Maps class ids to names and graph layers. `other_class` names the
/// terrain class used for the generic catch-all node.
struct SemanticClassTable {
  std::map<ClassId, ClassInfo> entries;
  ClassId other_class = 0;

  bool empty() const { return entries.empty(); }

  std::optional<int> layer_of(ClassId id) const {
    auto it = entries.find(id);
    if (it == entries.end()) return std::nullopt;
    return it->second.layer;
  }

  /// Rows needed by a class-embedding table indexed by class id.
  std::size_t embedding_rows() const {
    return entries.empty() ? 0 : static_cast<std::size_t>(entries.rbegin()->first) + 1;
  }

  void validate() const {
    if (entries.empty()) throw InputError("class table is empty");
    for (const auto& [id, info] : entries) {
      if (info.layer < 1 || info.layer > 4) {
        throw InputError("class " + std::to_string(id) + " has layer outside 1..4");
      }
    }
    auto it = entries.find(other_class);
    if (it == entries.end() || it->second.layer != kTerrain) {
      throw InputError("the 'other' class must be a terrain class present in the table");
    }
  }

  std::uint64_t digest() const {
    std::uint64_t h = mix64(other_class);
    for (const auto& [id, info] : entries) {
      h = mix64(h, id, info.layer);
      for (char c : info.name) h = mix64(h, static_cast<unsigned char>(c));
    }
    return h;
  }

  /// Eight classes spread over the four layers.
  static SemanticClassTable bundled() {
    SemanticClassTable t;
    t.entries = {{0, {"road", kTerrain}},          {1, {"sidewalk", kTerrain}},
                 {2, {"other-terrain", kTerrain}}, {3, {"building", kInfrastructure}},
                 {4, {"fence", kInfrastructure}},  {5, {"pole", kObjects}},
                 {6, {"vegetation-trunk", kObjects}}, {7, {"vehicle", kAgents}}};
    t.other_class = 2;
    return t;
  }

  /// Line format: "<id> <name> <layer>" per class and one "other <id>" line.
  static SemanticClassTable parse(std::istream& in) {
    SemanticClassTable t;
    bool have_other = false;
    std::string line;
    while (std::getline(in, line)) {
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      std::istringstream ls(line);
      std::string head;
      ls >> head;
      if (head == "other") {
        long id = -1;
        if (!(ls >> id) || id < 0 || id > 0xFFFF) throw InputError("bad 'other' line in class table");
        t.other_class = static_cast<ClassId>(id);
        have_other = true;
        continue;
      }
      long id = -1;
      ClassInfo info;
      try {
        id = std::stol(head);
      } catch (const std::exception&) {
        throw InputError("bad class table line: " + line);
      }
      if (!(ls >> info.name >> info.layer) || id < 0 || id > 0xFFFF) {
        throw InputError("bad class table line: " + line);
      }
      t.entries[static_cast<ClassId>(id)] = info;
    }
    if (!have_other) throw InputError("class table lacks an 'other <id>' line");
    t.validate();
    return t;
  }
};

struct GraphParams {
  /// Connectivity distance per layer (index 0 = terrain).
  std::array<double, 4> cluster_cell{2.0, 1.0, 0.5, 0.5};
  std::size_t min_points = 10;
  double terrain_cell = 8.0;
};

struct TerrainCell {
  Obb obb;
  std::vector<std::size_t> members;  // ascending point indices
};

struct GraphNode {
  std::uint32_t id = 0;
  int layer = kTerrain;
  ClassId class_id = 0;
  Obb obb;
  std::vector<TerrainCell> terrain_cells;  // layer 1 only
  std::vector<std::size_t> members;        // ascending point indices
  bool catch_all = false;                  // the generic "other" terrain node
};

/// Node-to-node edge, terrain endpoint first. The frame (layer 0) links to
/// every terrain node implicitly.
struct Edge {
  std::uint32_t terrain = 0;
  std::uint32_t node = 0;
  auto operator<=>(const Edge&) const = default;
};

struct SceneGraph {
  std::uint32_t frame_id = 0;
  std::vector<GraphNode> nodes;
  std::vector<Edge> edges;

  std::vector<std::uint32_t> terrain_ids() const {
    std::vector<std::uint32_t> ids;
    for (const auto& n : nodes) {
      if (n.layer == kTerrain) ids.push_back(n.id);
    }
    return ids;
  }
};

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<unsigned char> rank_;
};

struct CellHash {
  std::size_t operator()(const CellIndex& c) const noexcept {
    return static_cast<std::size_t>(mix64(c[0], c[1], c[2]));
  }
};

// Groups component roots, drops small groups, orders by size then min index.
inline std::vector<std::vector<std::size_t>> collect_components(DisjointSets& sets,
                                                                std::span<const std::size_t> ids,
                                                                std::size_t min_points) {
  std::unordered_map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t k = 0; k < ids.size(); ++k) groups[sets.find(k)].push_back(ids[k]);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [root, members] : groups) {
    if (members.size() < min_points) continue;
    std::sort(members.begin(), members.end());
    out.push_back(std::move(members));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a.front() < b.front();
  });
  return out;
}

}  // namespace detail

/// Euclidean connected components over a point subset: two points join when
/// their distance is at most `cell`.
inline std::vector<std::vector<std::size_t>> cluster_indices(std::span<const Vec3> pts,
                                                             std::span<const std::size_t> ids,
                                                             double cell, std::size_t min_points) {
  if (!(cell > 0.0)) throw InputError("cluster cell must be positive");
  if (min_points < 1) throw InputError("min_points must be at least 1");
  std::unordered_map<CellIndex, std::vector<std::size_t>, detail::CellHash> grid;
  const Vec3 res = Vec3::Constant(cell);
  for (std::size_t k = 0; k < ids.size(); ++k) grid[cell_of(pts[ids[k]], Vec3::Zero(), res)].push_back(k);

  detail::DisjointSets sets(ids.size());
  const double r2 = cell * cell;
  for (const auto& [key, bucket] : grid) {
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const CellIndex nkey{key[0] + dx, key[1] + dy, key[2] + dz};
          if (nkey < key) continue;  // visit each unordered cell pair once
          auto it = grid.find(nkey);
          if (it == grid.end()) continue;
          const bool same = nkey == key;
          for (std::size_t a = 0; a < bucket.size(); ++a) {
            const Vec3& pa = pts[ids[bucket[a]]];
            for (std::size_t b = same ? a + 1 : 0; b < it->second.size(); ++b) {
              if (squared_distance(pa, pts[ids[it->second[b]]]) <= r2) sets.unite(bucket[a], it->second[b]);
            }
          }
        }
      }
    }
  }
  return detail::collect_components(sets, ids, min_points);
}

inline std::vector<std::vector<std::size_t>> cluster_class(const LabeledPointCloud& cloud, ClassId class_id,
                                                           double cell, std::size_t min_points) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.labels[i] == class_id) ids.push_back(i);
  }
  return cluster_indices(cloud.points, ids, cell, min_points);
}

/// Tiles the box footprint (its first two axes) into cell_size columns of full
/// height; each occupied column becomes a cell with a tight box.
inline std::vector<TerrainCell> subdivide_terrain(std::span<const Vec3> pts, std::span<const std::size_t> ids,
                                                  const Obb& obb, double cell_size) {
  if (!(cell_size > 0.0)) throw InputError("terrain cell size must be positive");
  const auto columns = [&](double extent) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(extent / cell_size - 1e-6)));
  };
  const std::int64_t nx = columns(obb.extent[0]);
  const std::int64_t ny = columns(obb.extent[1]);
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> buckets;
  for (auto id : ids) {
    const Vec3 u = obb.to_local(pts[id]);
    const auto bin = [&](int axis, std::int64_t n) {
      const auto b = static_cast<std::int64_t>(std::floor((u[axis] + 0.5 * obb.extent[axis]) / cell_size));
      return std::clamp<std::int64_t>(b, 0, n - 1);
    };
    buckets[{bin(0, nx), bin(1, ny)}].push_back(id);
  }
  std::vector<TerrainCell> cells;
  std::vector<Vec3> sub;
  for (auto& [key, members] : buckets) {
    std::sort(members.begin(), members.end());
    sub.clear();
    for (auto id : members) sub.push_back(pts[id]);
    cells.push_back({fit_obb(sub), std::move(members)});
  }
  return cells;
}

/// Links each layer >= 2 node to the terrain node with the nearest (x, y)
/// center; ties go to the lower terrain id.
inline std::vector<Edge> connect_edges(const std::vector<GraphNode>& nodes) {
  std::vector<const GraphNode*> terrain;
  for (const auto& n : nodes) {
    if (n.layer == kTerrain) terrain.push_back(&n);
  }
  std::sort(terrain.begin(), terrain.end(), [](auto* a, auto* b) { return a->id < b->id; });
  std::vector<Edge> edges;
  if (terrain.empty()) {
    for (const auto& n : nodes) {
      if (n.layer != kTerrain) throw InputError("scene graph has non-terrain nodes but no terrain node");
    }
    return edges;
  }
  for (const auto& n : nodes) {
    if (n.layer == kTerrain) continue;
    const GraphNode* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto* t : terrain) {
      const double dx = n.obb.center.x() - t->obb.center.x();
      const double dy = n.obb.center.y() - t->obb.center.y();
      const double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        best = t;
      }
    }
    edges.push_back({best->id, n.id});
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

inline SceneGraph build_scene_graph(const LabeledPointCloud& cloud, const SemanticClassTable& table,
                                    const GraphParams& params = {}, std::uint32_t frame_id = 0) {
  table.validate();
  if (cloud.empty()) throw InputError("cannot build a scene graph from an empty cloud");

  struct Candidate {
    int layer;
    ClassId class_id;
    std::size_t rank;
    std::vector<std::size_t> members;
  };
  std::vector<Candidate> candidates;
  std::vector<bool> claimed(cloud.size(), false);

  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (table.entries.count(cloud.labels[i])) by_class[cloud.labels[i]].push_back(i);
  }
  for (const auto& [cls, ids] : by_class) {
    const int layer = table.entries.at(cls).layer;
    auto clusters = cluster_indices(cloud.points, ids, params.cluster_cell[layer - 1], params.min_points);
    for (std::size_t r = 0; r < clusters.size(); ++r) {
      for (auto id : clusters[r]) claimed[id] = true;
      candidates.push_back({layer, cls, r, std::move(clusters[r])});
    }
  }

  std::vector<std::size_t> leftovers;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!claimed[i]) leftovers.push_back(i);
  }
  const bool has_terrain = std::any_of(candidates.begin(), candidates.end(),
                                       [](const Candidate& c) { return c.layer == kTerrain; });
  const bool catch_all = !leftovers.empty() || !has_terrain;
  if (catch_all) {
    candidates.push_back({kTerrain, table.other_class, std::numeric_limits<std::size_t>::max(), leftovers});
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.layer, a.class_id, a.rank) < std::tie(b.layer, b.class_id, b.rank);
  });

  SceneGraph graph;
  graph.frame_id = frame_id;
  std::vector<Vec3> sub;
  for (auto& c : candidates) {
    GraphNode node;
    node.id = static_cast<std::uint32_t>(graph.nodes.size());
    node.layer = c.layer;
    node.class_id = c.class_id;
    node.catch_all = c.rank == std::numeric_limits<std::size_t>::max();
    node.members = std::move(c.members);
    if (!node.members.empty()) {
      sub.clear();
      for (auto id : node.members) sub.push_back(cloud.points[id]);
      node.obb = fit_obb(sub);
    }
    if (node.layer == kTerrain) {
      node.terrain_cells = subdivide_terrain(cloud.points, node.members, node.obb, params.terrain_cell);
    }
    graph.nodes.push_back(std::move(node));
  }
  graph.edges = connect_edges(graph.nodes);
  return graph;
}

/// Unit quaternion (w, x, y, z) with w >= 0.
inline Eigen::Vector4d rotation_to_quaternion(const Mat3& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  return {q.w(), q.x(), q.y(), q.z()};
}

inline Mat3 quaternion_to_rotation(const Eigen::Vector4d& wxyz) {
  return Eigen::Quaterniond(wxyz[0], wxyz[1], wxyz[2], wxyz[3]).normalized().toRotationMatrix();
}

/// "NODE id layer class cx cy cz ex ey ez qw qx qy qz" and "EDGE a b" lines.
inline void dump_graph(std::ostream& out, const SceneGraph& graph) {
  std::ostringstream s;
  s << std::setprecision(9);
  for (const auto& n : graph.nodes) {
    const auto q = rotation_to_quaternion(n.obb.rotation);
    s << "NODE " << n.id << ' ' << n.layer << ' ' << n.class_id;
    for (int a = 0; a < 3; ++a) s << ' ' << n.obb.center[a];
    for (int a = 0; a < 3; ++a) s << ' ' << n.obb.extent[a];
    for (int a = 0; a < 4; ++a) s << ' ' << q[a];
    s << '\n';
  }
  for (const auto& e : graph.edges) s << "EDGE " << e.terrain << ' ' << e.node << '\n';
  out << s.str();
}

}  // namespace sgpc
