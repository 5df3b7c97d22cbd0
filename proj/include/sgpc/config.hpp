#pragma once

#include <array>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "sgpc/bitstream.hpp"
#include "sgpc/decoder.hpp"
#include "sgpc/encoder.hpp"
#include "sgpc/losses.hpp"
#include "sgpc/octree.hpp"
#include "sgpc/scene_graph.hpp"
#include "sgpc/synth.hpp"

namespace sgpc {

struct LayerConfig {
  EncoderConfig enc;
  DecoderConfig dec;
  std::size_t capacity = 320;  // N
};

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 1e-6;
  std::size_t epochs = 150;
  std::size_t batch_size = 4;
  std::array<double, 4> lambda{0.5, 10.0, 1.0, 0.5};
  double lambda_decay = 0.98;
  DensityGrid density;
};

/// Everything a command needs besides its file arguments.
struct RunConfig {
  std::array<LayerConfig, 4> layers;
  TrainConfig train;
  GraphParams graph;
  SynthParams synth;
  std::string class_table;  // empty: the bundled table
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;
  std::vector<int> octree_depths{6, 7, 8, 9, 10};
  std::size_t bench_epochs = 1;

  RunConfig() {
    for (std::size_t l = 0; l < 4; ++l) {
      layers[l].capacity = kDefaultPatchCapacity[l];
      layers[l].dec.coarse = kDefaultPatchCapacity[l] / layers[l].dec.grid_points();
    }
  }

  LayerConfig& layer(int l) { return layers[static_cast<std::size_t>(l - 1)]; }
  const LayerConfig& layer(int l) const { return layers[static_cast<std::size_t>(l - 1)]; }

  std::array<std::size_t, 4> capacities() const {
    return {layers[0].capacity, layers[1].capacity, layers[2].capacity, layers[3].capacity};
  }

  std::array<std::uint16_t, 4> latent_dims() const {
    std::array<std::uint16_t, 4> d{};
    for (std::size_t l = 0; l < 4; ++l) d[l] = static_cast<std::uint16_t>(layers[l].enc.d_z);
    return d;
  }

  void set_latent_dims(std::size_t d) {
    for (auto& l : layers) l.enc.d_z = d;
  }

  SemanticClassTable load_class_table() const {
    if (class_table.empty()) return SemanticClassTable::bundled();
    std::ifstream in(class_table);
    if (!in) throw InputError("cannot open class table '" + class_table + "'");
    return SemanticClassTable::parse(in);
  }

  void validate() const {
    for (std::size_t l = 0; l < 4; ++l) {
      const auto& c = layers[l];
      const std::string tag = "layer " + std::to_string(l + 1);
      c.enc.validate();
      c.dec.validate();
      if (!is_release_latent_dim(c.enc.d_z)) {
        throw InputError(tag + ": d_z " + std::to_string(c.enc.d_z) + " is not one of 8, 16, 32, 64, 128");
      }
      if (c.capacity == 0 || c.capacity > 0xFFFF) throw InputError(tag + ": capacity must lie in 1..65535");
      if (c.capacity != c.dec.fine()) {
        throw ConfigMismatch(tag + ": capacity " + std::to_string(c.capacity) + " differs from coarse * grid = " +
                             std::to_string(c.dec.fine()));
      }
    }
    if (!(train.lr > 0.0)) throw InputError("lr must be positive");
    if (train.weight_decay < 0.0) throw InputError("weight_decay must be non-negative");
    if (train.batch_size == 0) throw InputError("batch_size must be positive");
    for (double v : train.lambda) {
      if (!(v >= 0.0)) throw InputError("lambda values must be non-negative");
    }
    if (!(train.lambda_decay > 0.0 && train.lambda_decay <= 1.0)) throw InputError("lambda_decay must lie in (0, 1]");
    for (auto d : train.density.dims) {
      if (d == 0) throw InputError("density grid dimensions must be positive");
    }
    for (int d : octree_depths) {
      if (d < 1 || d > kMaxOctreeDepth) throw InputError("octree depths must lie in 1..16");
    }
    if (!(graph.terrain_cell > 0.0)) throw InputError("terrain_cell must be positive");
    for (double c : graph.cluster_cell) {
      if (!(c > 0.0)) throw InputError("cluster_cell values must be positive");
    }
    synth.validate();
  }

  /// Line-oriented "key = value". Model keys set all four layers unless
  /// prefixed with "layerK.". Later lines win.
  static RunConfig parse(std::istream& in);

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config '" + path + "'");
    return parse(in);
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw InputError("config key '" + key + "': bad value '" + text + "'");
  return v;
}

template <typename T, std::size_t N>
std::array<T, N> parse_array(const std::string& key, const std::string& text) {
  const auto items = split_list(text);
  std::array<T, N> out{};
  if (items.size() == 1) {
    out.fill(parse_number<T>(key, items[0]));
  } else if (items.size() == N) {
    for (std::size_t i = 0; i < N; ++i) out[i] = parse_number<T>(key, items[i]);
  } else {
    throw InputError("config key '" + key + "' expects 1 or " + std::to_string(N) + " comma-separated values");
  }
  return out;
}

}  // namespace detail

inline RunConfig RunConfig::parse(std::istream& in) {
  using detail::parse_array;
  using detail::parse_number;
  RunConfig cfg;
  std::array<bool, 4> coarse_set{};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError("config line " + std::to_string(lineno) + " lacks '='");
    std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));

    // Per-layer model keys.
    std::vector<std::size_t> targets{0, 1, 2, 3};
    std::string model_key = key;
    if (key.rfind("layer", 0) == 0 && key.size() > 7 && key[6] == '.' && key[5] >= '1' && key[5] <= '4') {
      targets = {static_cast<std::size_t>(key[5] - '1')};
      model_key = key.substr(7);
    }
    const auto each = [&](auto&& set) {
      for (auto t : targets) set(cfg.layers[t], t);
    };
    const bool per_layer_only = targets.size() == 1;
    const auto sz = [&](const std::string& v) { return parse_number<std::size_t>(key, v); };

    if (model_key == "d_z" && !per_layer_only) {
      const auto v = parse_array<std::size_t, 4>(key, value);
      for (std::size_t l = 0; l < 4; ++l) cfg.layers[l].enc.d_z = v[l];
    } else if (model_key == "capacity" && !per_layer_only) {
      const auto v = parse_array<std::size_t, 4>(key, value);
      for (std::size_t l = 0; l < 4; ++l) cfg.layers[l].capacity = v[l];
    } else if (model_key == "d_z") {
      each([&](LayerConfig& c, std::size_t) { c.enc.d_z = sz(value); });
    } else if (model_key == "capacity") {
      each([&](LayerConfig& c, std::size_t) { c.capacity = sz(value); });
    } else if (model_key == "d_f") {
      each([&](LayerConfig& c, std::size_t) { c.enc.d_f = sz(value); });
    } else if (model_key == "d_p") {
      each([&](LayerConfig& c, std::size_t) { c.enc.d_p = sz(value); });
    } else if (model_key == "d_s") {
      each([&](LayerConfig& c, std::size_t) { c.enc.d_s = sz(value); });
    } else if (model_key == "blocks") {
      each([&](LayerConfig& c, std::size_t) { c.enc.blocks = sz(value); });
    } else if (model_key == "heads") {
      each([&](LayerConfig& c, std::size_t) { c.enc.heads = sz(value); });
    } else if (model_key == "dropout") {
      each([&](LayerConfig& c, std::size_t) { c.enc.dropout = parse_number<double>(key, value); });
    } else if (model_key == "coarse") {
      each([&](LayerConfig& c, std::size_t t) {
        c.dec.coarse = sz(value);
        coarse_set[t] = true;
      });
    } else if (model_key == "grid_side") {
      each([&](LayerConfig& c, std::size_t) { c.dec.grid_side = sz(value); });
    } else if (model_key == "d_fc") {
      each([&](LayerConfig& c, std::size_t) { c.dec.d_fc = sz(value); });
    } else if (model_key == "coarse_hidden") {
      each([&](LayerConfig& c, std::size_t) { c.dec.coarse_hidden = sz(value); });
    } else if (model_key == "head_hidden") {
      each([&](LayerConfig& c, std::size_t) { c.dec.head_hidden = sz(value); });
    } else if (model_key == "fold_hidden") {
      each([&](LayerConfig& c, std::size_t) { c.dec.fold_hidden = sz(value); });
    } else if (per_layer_only) {
      throw InputError("config key '" + key + "' has no per-layer form");
    } else if (key == "lr") {
      cfg.train.lr = parse_number<double>(key, value);
    } else if (key == "weight_decay") {
      cfg.train.weight_decay = parse_number<double>(key, value);
    } else if (key == "epochs") {
      cfg.train.epochs = sz(value);
    } else if (key == "batch_size") {
      cfg.train.batch_size = sz(value);
    } else if (key == "lambda") {
      cfg.train.lambda = parse_array<double, 4>(key, value);
    } else if (key == "lambda_decay") {
      cfg.train.lambda_decay = parse_number<double>(key, value);
    } else if (key == "density_grid") {
      cfg.train.density.dims = parse_array<std::size_t, 3>(key, value);
    } else if (key == "seed") {
      cfg.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "class_table") {
      cfg.class_table = value;
    } else if (key == "precision") {
      if (value == "f32") {
        cfg.precision = Precision::F32;
      } else if (value == "f16") {
        cfg.precision = Precision::F16;
      } else {
        throw InputError("precision must be f32 or f16");
      }
    } else if (key == "cluster_cell") {
      cfg.graph.cluster_cell = parse_array<double, 4>(key, value);
    } else if (key == "min_points") {
      cfg.graph.min_points = sz(value);
    } else if (key == "terrain_cell") {
      cfg.graph.terrain_cell = parse_number<double>(key, value);
    } else if (key == "octree_depths") {
      cfg.octree_depths.clear();
      for (const auto& d : detail::split_list(value)) cfg.octree_depths.push_back(parse_number<int>(key, d));
    } else if (key == "bench_epochs") {
      cfg.bench_epochs = sz(value);
    } else if (key == "synth.points") {
      cfg.synth.points = sz(value);
    } else if (key == "synth.half_size") {
      cfg.synth.half_size = parse_number<double>(key, value);
    } else if (key == "synth.walls") {
      cfg.synth.walls = sz(value);
    } else if (key == "synth.cars") {
      cfg.synth.cars = sz(value);
    } else if (key == "synth.cylinders") {
      cfg.synth.cylinders = sz(value);
    } else if (key == "synth.agents") {
      cfg.synth.agents = sz(value);
    } else if (key == "synth.height_noise") {
      cfg.synth.height_noise = parse_number<double>(key, value);
    } else {
      throw InputError("unknown config key '" + key + "'");
    }
  }
  // Unless given, M follows from N = M * G.
  for (std::size_t l = 0; l < 4; ++l) {
    auto& c = cfg.layers[l];
    if (!coarse_set[l] && c.dec.grid_points() > 0) c.dec.coarse = c.capacity / c.dec.grid_points();
  }
  cfg.validate();
  return cfg;
}

}  // namespace sgpc
