#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sgpc/encoder.hpp"
#include "sgpc/nn/layers.hpp"
#include "sgpc/patching.hpp"

namespace sgpc {

struct DecoderConfig {
  std::size_t coarse = 80;         // M
  std::size_t grid_side = 2;       // g, G = g * g
  std::size_t d_fc = 32;           // coarse feature width
  std::size_t coarse_hidden = 128;  // hidden width of the latent -> features map
  std::size_t head_hidden = 32;    // offset and mask heads
  std::size_t fold_hidden = 64;
  double coarse_offset_scale = 1.0;
  double fold_offset_scale = 0.5;

  std::size_t grid_points() const { return grid_side * grid_side; }
  std::size_t fine() const { return coarse * grid_points(); }

  void validate() const {
    if (coarse == 0 || grid_side == 0 || d_fc == 0 || coarse_hidden == 0 || head_hidden == 0 || fold_hidden == 0) {
      throw InputError("decoder dimensions must be positive");
    }
  }
};

/// Decoder output in world coordinates.
struct Reconstruction {
  std::vector<Vec3> points_world;
  std::vector<float> confidence;
  std::vector<Vec3> coarse_points_world;
  std::vector<float> coarse_confidence;

  /// Points with confidence >= threshold, in slot order.
  std::vector<Vec3> pruned(double threshold = 0.5) const {
    std::vector<Vec3> out;
    for (std::size_t i = 0; i < points_world.size(); ++i) {
      if (confidence[i] >= threshold) out.push_back(points_world[i]);
    }
    return out;
  }
};

template <typename T>
void add_decoder_params(nn::ParameterStore<T>& store, const EncoderConfig& enc, const DecoderConfig& cfg,
                        std::uint64_t seed) {
  cfg.validate();
  nn::add_mlp(store, "dec.coarse", enc.d_z, cfg.coarse_hidden, cfg.coarse * cfg.d_fc, seed);
  nn::add_mlp(store, "dec.offset", cfg.d_fc, cfg.head_hidden, 3, seed);
  nn::add_mlp(store, "dec.cmask", cfg.d_fc, cfg.head_hidden, 1, seed);
  nn::add_mlp(store, "dec.fold", cfg.d_fc + 2, cfg.fold_hidden, 3, seed);
  nn::add_mlp(store, "dec.fmask", cfg.d_fc + 1, cfg.head_hidden, cfg.grid_points(), seed);
}

/// M points uniform in [-1, 1]^3; coordinate a of point m uses counter 3m + a.
inline std::vector<Vec3> sample_coarse_init(std::size_t m, std::uint64_t seed) {
  if (m < 1) throw InputError("coarse point count must be at least 1");
  const CounterRng rng(seed);
  std::vector<Vec3> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (int a = 0; a < 3; ++a) out[i][a] = 2.0 * rng.uniform(3 * i + static_cast<std::size_t>(a)) - 1.0;
  }
  return out;
}

/// Seed of the coarse initialization shared by every patch of a layer.
inline std::uint64_t coarse_init_seed(int layer) { return mix64(0x53475043'494E4954ull, layer); }

/// The g x g lattice over [-0.25, 0.25]^2, row-major.
inline std::vector<std::array<double, 2>> folding_grid(std::size_t side) {
  std::vector<std::array<double, 2>> grid;
  const auto coord = [side](std::size_t i) {
    return side == 1 ? 0.0 : -0.25 + 0.5 * static_cast<double>(i) / static_cast<double>(side - 1);
  };
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) grid.push_back({coord(i), coord(j)});
  }
  return grid;
}

template <typename T>
struct CoarseOutput {
  nn::Var<T> points;      // [M, 3] local
  nn::Var<T> features;    // [M, d_fc]
  nn::Var<T> confidence;  // [M, 1]
};

template <typename T>
CoarseOutput<T> decode_coarse(nn::Tape<T>& tape, nn::ParameterStore<T>& store, const DecoderConfig& cfg,
                              nn::Var<T> z, const std::vector<Vec3>& init) {
  if (init.size() != cfg.coarse) throw InputError("coarse init size does not match the decoder config");
  auto f = nn::reshape(nn::mlp(tape, store, "dec.coarse", z), {cfg.coarse, cfg.d_fc});
  auto offset = nn::scale(nn::tanh(nn::mlp(tape, store, "dec.offset", f)), static_cast<T>(cfg.coarse_offset_scale));
  auto points = nn::add(nn::points_constant(tape, init, cfg.coarse), offset);
  auto conf = nn::sigmoid(nn::mlp(tape, store, "dec.cmask", f));
  return {points, f, conf};
}

/// Fine point m * G + n = coarse_m + fold(f_m, g_n).
template <typename T>
nn::Var<T> fold_upsample(nn::Tape<T>& tape, nn::ParameterStore<T>& store, const DecoderConfig& cfg,
                         nn::Var<T> coarse, nn::Var<T> features) {
  const std::size_t g = cfg.grid_points();
  const auto grid = folding_grid(cfg.grid_side);
  std::vector<T> tiled(cfg.coarse * g * 2);
  for (std::size_t m = 0; m < cfg.coarse; ++m) {
    for (std::size_t n = 0; n < g; ++n) {
      tiled[(m * g + n) * 2] = static_cast<T>(grid[n][0]);
      tiled[(m * g + n) * 2 + 1] = static_cast<T>(grid[n][1]);
    }
  }
  auto in = nn::concat<T>({nn::repeat_rows(features, g), tape.constant({cfg.coarse * g, 2}, std::move(tiled))}, -1);
  auto offset = nn::scale(nn::tanh(nn::mlp(tape, store, "dec.fold", in)), static_cast<T>(cfg.fold_offset_scale));
  return nn::add(nn::repeat_rows(coarse, g), offset);
}

/// Per coarse row, G logits from (f_m, mu_m); fine slot m * G + n takes logit n.
template <typename T>
nn::Var<T> predict_fine_mask(nn::Tape<T>& tape, nn::ParameterStore<T>& store, const DecoderConfig& cfg,
                             nn::Var<T> features, nn::Var<T> coarse_conf) {
  auto logits = nn::mlp(tape, store, "dec.fmask", nn::concat<T>({features, coarse_conf}, -1));
  return nn::reshape(nn::sigmoid(logits), {cfg.fine()});
}

template <typename T>
struct DecoderGraph {
  nn::Var<T> coarse;             // [M, 3] local
  nn::Var<T> coarse_confidence;  // [M, 1]
  nn::Var<T> fine;               // [N, 3] local
  nn::Var<T> fine_confidence;    // [N]
};

template <typename T>
DecoderGraph<T> decode_graph(nn::Tape<T>& tape, nn::ParameterStore<T>& store, const DecoderConfig& cfg,
                             nn::Var<T> z, const std::vector<Vec3>& init) {
  auto c = decode_coarse(tape, store, cfg, z, init);
  auto fine = fold_upsample(tape, store, cfg, c.points, c.features);
  auto mask = predict_fine_mask(tape, store, cfg, c.features, c.confidence);
  return {c.points, c.confidence, fine, mask};
}

/// Eval-mode decoding of one latent into world coordinates through `obb`.
template <typename T>
Reconstruction decode_patch(const Latent& z, const Obb& obb, const EncoderConfig& enc, const DecoderConfig& cfg,
                            nn::ParameterStore<T>& store) {
  if (z.values.size() != enc.d_z) throw ConfigMismatch("latent length does not match the decoder input width");
  nn::Tape<T> tape(false);
  auto zv = tape.constant({1, enc.d_z}, std::vector<T>(z.values.begin(), z.values.end()));
  const auto g = decode_graph(tape, store, cfg, zv, sample_coarse_init(cfg.coarse, coarse_init_seed(z.layer)));
  Reconstruction out;
  const auto& fine = g.fine.value();
  const auto& coarse = g.coarse.value();
  for (std::size_t i = 0; i < cfg.fine(); ++i) {
    out.points_world.push_back(denormalize_point(Vec3(fine[3 * i], fine[3 * i + 1], fine[3 * i + 2]), obb));
  }
  for (std::size_t i = 0; i < cfg.coarse; ++i) {
    out.coarse_points_world.push_back(
        denormalize_point(Vec3(coarse[3 * i], coarse[3 * i + 1], coarse[3 * i + 2]), obb));
  }
  out.confidence.assign(g.fine_confidence.value().begin(), g.fine_confidence.value().end());
  out.coarse_confidence.assign(g.coarse_confidence.value().begin(), g.coarse_confidence.value().end());
  return out;
}

}  // namespace sgpc
