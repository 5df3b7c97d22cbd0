#pragma once

#include "sgpc/losses.hpp"
#include "sgpc/nn/gradcheck.hpp"
#include "test_util.hpp"

namespace sgpc::testing {

/// Tiny autoencoder over a 16-slot patch (M = 4, G = 4) in double precision.
struct TinyAutoencoder {
  EncoderConfig enc;
  DecoderConfig dec;
  nn::ParameterStore<double> store;
  Patch patch;
  std::vector<Vec3> init;

  explicit TinyAutoencoder(std::uint64_t seed, std::size_t n_valid = 13) {
    enc.d_f = 8;
    enc.d_p = 4;
    enc.d_s = 4;
    enc.d_z = 8;
    enc.blocks = 1;
    enc.heads = 2;
    enc.num_classes = 8;
    dec.coarse = 4;
    dec.d_fc = 6;
    dec.coarse_hidden = 8;
    dec.head_hidden = 6;
    dec.fold_hidden = 6;
    add_encoder_params(store, enc, seed);
    add_decoder_params(store, enc, dec, seed);
    // Move FiLM off the identity so its heads carry gradient signal.
    const CounterRng rng(mix64(seed, 17));
    std::uint64_t k = 0;
    for (const char* n : {"enc.film.gamma.1.w", "enc.film.beta.1.w", "enc.film.gamma.1.b", "enc.film.beta.1.b"}) {
      for (auto& v : store.at(n).data) v += 0.1 * rng.normal(k++);
    }
    patch = random_patch(n_valid, dec.fine(), mix64(seed, 3), 4, kObjects);
    init = sample_coarse_init(dec.coarse, coarse_init_seed(kObjects));
  }

  nn::Var<double> loss(nn::Tape<double>& t) {
    auto z = encode_graph(t, store, enc, patch);
    auto g = decode_graph(t, store, dec, z, init);
    return total_loss(t, patch, g, dec, LossWeights{}, DensityGrid{{4, 4, 4}}).total;
  }

  nn::GradCheckResult check() {
    return nn::gradient_check(store, [this](nn::Tape<double>& t) { return loss(t); });
  }
};

}  // namespace sgpc::testing
