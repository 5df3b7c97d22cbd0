#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "sgpc/nn/layers.hpp"
#include "sgpc/patching.hpp"

namespace sgpc {

struct EncoderConfig {
  std::size_t d_f = 128;
  std::size_t d_p = 64;
  std::size_t d_s = 32;
  std::size_t d_z = 16;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  double dropout = 0.1;
  std::size_t num_classes = 8;

  void validate() const {
    if (d_f == 0 || d_p == 0 || d_s == 0 || d_z == 0 || heads == 0 || num_classes == 0) {
      throw InputError("encoder dimensions must be positive");
    }
    if (d_f % heads != 0) throw InputError("encoder width must be divisible by the head count");
    if (dropout < 0.0 || dropout >= 1.0) throw InputError("dropout rate must lie in [0, 1)");
  }
};

inline constexpr std::array<std::size_t, 5> kReleaseLatentDims{8, 16, 32, 64, 128};

inline bool is_release_latent_dim(std::size_t d) {
  return std::find(kReleaseLatentDims.begin(), kReleaseLatentDims.end(), d) != kReleaseLatentDims.end();
}

struct Latent {
  std::vector<float> values;
  int layer = kTerrain;
};

template <typename T>
void add_encoder_params(nn::ParameterStore<T>& store, const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  nn::add_linear(store, "enc.point", 3, cfg.d_f, seed);
  nn::add_linear(store, "enc.pos", 3, cfg.d_p, seed);
  nn::add_linear(store, "enc.pos_proj", cfg.d_p, cfg.d_f, seed);
  store.add("enc.class_embed", nn::normal_init<T>({cfg.num_classes, cfg.d_s}, 0.02,
                                                  nn::name_seed(seed, "enc.class_embed")));
  // FiLM heads start as the identity modulation: gamma == 1, beta == 0.
  for (const char* head : {"enc.film.gamma", "enc.film.beta"}) {
    nn::add_mlp(store, head, cfg.d_s, cfg.d_s, cfg.d_f, seed);
    auto& w = store.at(std::string(head) + ".1.w");
    std::fill(w.data.begin(), w.data.end(), T(0));
  }
  auto& gamma_bias = store.at("enc.film.gamma.1.b");
  std::fill(gamma_bias.data.begin(), gamma_bias.data.end(), T(1));

  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "enc.block" + std::to_string(b);
    for (const char* proj : {".q", ".k", ".v", ".o"}) nn::add_linear(store, p + proj, cfg.d_f, cfg.d_f, seed);
    nn::add_layer_norm(store, p + ".ln1", cfg.d_f);
    nn::add_mlp(store, p + ".ffn", cfg.d_f, 4 * cfg.d_f, cfg.d_f, seed);
    nn::add_layer_norm(store, p + ".ln2", cfg.d_f);
  }
  nn::add_mlp(store, "enc.pool", 3 + cfg.d_p, cfg.d_f, 1, seed);
  nn::add_linear(store, "enc.latent", cfg.d_f, cfg.d_z, seed);
}

template <typename T>
struct PointEmbedding {
  nn::Var<T> features;    // H0 = f + p'  [n, d_f]
  nn::Var<T> positional;  // P            [n, d_p]
};

/// h_j = point(x_j) + pos_proj(pos(x_j)); also returns pos(x_j) for pooling.
template <typename T>
PointEmbedding<T> embed_points(nn::Tape<T>& tape, nn::ParameterStore<T>& store, nn::Var<T> x) {
  auto f = nn::linear(tape, store, "enc.point", x);
  auto p = nn::linear(tape, store, "enc.pos", x);
  return {nn::add(f, nn::linear(tape, store, "enc.pos_proj", p)), p};
}

/// gamma(s) * h + beta(s) with s the class embedding, shared by all rows.
template <typename T>
nn::Var<T> film_modulate(nn::Tape<T>& tape, nn::ParameterStore<T>& store, nn::Var<T> h, ClassId class_id) {
  const std::size_t ids[] = {class_id};
  auto s = nn::embedding_lookup(tape.parameter(store.at("enc.class_embed")), std::span<const std::size_t>(ids));
  auto gamma = nn::mlp(tape, store, "enc.film.gamma", s);
  auto beta = nn::mlp(tape, store, "enc.film.beta", s);
  return nn::add(nn::mul(h, gamma), beta);
}

namespace detail {
inline bool all_valid(const std::vector<bool>& m) {
  return std::all_of(m.begin(), m.end(), [](bool b) { return b; });
}
}  // namespace detail

/// Post-norm transformer block; padded rows are excluded as keys and zeroed
/// on output.
template <typename T>
nn::Var<T> transformer_block(nn::Tape<T>& tape, nn::ParameterStore<T>& store, const EncoderConfig& cfg,
                             std::size_t index, nn::Var<T> h, const std::vector<bool>& valid) {
  const std::string p = "enc.block" + std::to_string(index);
  auto q = nn::linear(tape, store, p + ".q", h);
  auto k = nn::linear(tape, store, p + ".k", h);
  auto v = nn::linear(tape, store, p + ".v", h);
  auto attn = nn::linear(tape, store, p + ".o", nn::attention(q, k, v, valid, cfg.heads));
  auto h1 = nn::affine_layer_norm(tape, store, p + ".ln1", nn::add(h, nn::dropout(attn, cfg.dropout)));
  auto ff = nn::mlp(tape, store, p + ".ffn", h1);
  auto out = nn::affine_layer_norm(tape, store, p + ".ln2", nn::add(h1, nn::dropout(ff, cfg.dropout)));
  if (!detail::all_valid(valid)) {
    std::vector<bool> padded(valid.size());
    for (std::size_t i = 0; i < valid.size(); ++i) padded[i] = !valid[i];
    out = nn::masked_fill(out, nn::expand_row_mask(padded, cfg.d_f), T(0));
  }
  return out;
}

template <typename T>
struct PoolResult {
  nn::Var<T> global;   // [1, d_f]
  nn::Var<T> weights;  // [n, 1], zero on padded rows, sums to 1
};

/// Scores each row from (x_j || p_j), softmaxes over valid rows only and
/// returns the weighted sum of the final features.
template <typename T>
PoolResult<T> spatial_attention_pool(nn::Tape<T>& tape, nn::ParameterStore<T>& store, nn::Var<T> x,
                                     nn::Var<T> pos, nn::Var<T> h, const std::vector<bool>& valid) {
  if (std::none_of(valid.begin(), valid.end(), [](bool b) { return b; })) {
    throw InputError("spatial attention pooling needs at least one valid row");
  }
  auto scores = nn::mlp(tape, store, "enc.pool", nn::concat<T>({x, pos}, -1));
  if (!detail::all_valid(valid)) {
    std::vector<bool> padded(valid.size());
    for (std::size_t i = 0; i < valid.size(); ++i) padded[i] = !valid[i];
    scores = nn::masked_fill(scores, padded, -std::numeric_limits<T>::infinity());
  }
  auto w = nn::softmax(scores, 0);
  return {nn::matmul(nn::transpose(w), h), w};
}

/// Full encoder graph for one patch; returns z as [1, d_z]. With `pack_valid`
/// only the valid prefix is processed, which is equivalent because padded
/// rows never influence valid rows or the pooled result.
template <typename T>
nn::Var<T> encode_graph(nn::Tape<T>& tape, nn::ParameterStore<T>& store, const EncoderConfig& cfg,
                        const Patch& patch, bool pack_valid = true) {
  if (patch.n_valid == 0) throw InputError("cannot encode a patch without valid points");
  if (patch.class_id >= cfg.num_classes) {
    throw InputError("class id " + std::to_string(patch.class_id) + " outside the class embedding table");
  }
  const std::size_t rows = pack_valid ? patch.n_valid : patch.capacity();
  std::vector<bool> valid = pack_valid ? std::vector<bool>(rows, true) : patch.valid_mask;
  auto x = nn::points_constant(tape, patch.points_local, rows);
  auto emb = embed_points(tape, store, x);
  auto h = film_modulate(tape, store, emb.features, patch.class_id);
  if (!detail::all_valid(valid)) {
    std::vector<bool> padded(rows);
    for (std::size_t i = 0; i < rows; ++i) padded[i] = !valid[i];
    h = nn::masked_fill(h, nn::expand_row_mask(padded, cfg.d_f), T(0));
  }
  for (std::size_t b = 0; b < cfg.blocks; ++b) h = transformer_block(tape, store, cfg, b, h, valid);
  auto pooled = spatial_attention_pool(tape, store, x, emb.positional, h, valid);
  return nn::linear(tape, store, "enc.latent", pooled.global);
}

/// Eval-mode encoding (dropout off).
template <typename T>
Latent encode_patch(const Patch& patch, const EncoderConfig& cfg, nn::ParameterStore<T>& store) {
  nn::Tape<T> tape(false);
  auto z = encode_graph(tape, store, cfg, patch);
  Latent out;
  out.layer = patch.layer;
  out.values.assign(z.value().begin(), z.value().end());
  for (float v : out.values) {
    if (!std::isfinite(v)) throw Error("encoder produced a non-finite latent");
  }
  return out;
}

}  // namespace sgpc
