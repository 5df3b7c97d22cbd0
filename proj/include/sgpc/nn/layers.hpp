#pragma once

#include <cmath>
#include <string>

#include "sgpc/nn/optim.hpp"

namespace sgpc::nn {

// Parameter initializers. Each tensor draws from its own counter stream keyed
// by (seed, name), so values do not depend on registration order.

inline std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = mix64(seed, name.size());
  for (char c : name) h = mix64(h, static_cast<unsigned char>(c));
  return h;
}

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, std::uint64_t seed) {
  Tensor<T> t(std::move(shape));
  const CounterRng rng(seed);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<T>((2.0 * rng.uniform(i) - 1.0) * bound);
  return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, double sigma, std::uint64_t seed) {
  Tensor<T> t(std::move(shape));
  const CounterRng rng(seed);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<T>(sigma * rng.normal(2 * i));
  return t;
}

/// Glorot-uniform weight [in, out] plus zero bias [out] under `prefix`.
template <typename T>
void add_linear(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                std::uint64_t seed) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  store.add(prefix + ".w", uniform_init<T>({in, out}, bound, name_seed(seed, prefix + ".w")));
  store.add(prefix + ".b", Tensor<T>({out}));
}

/// Two linear layers with a relu between them.
template <typename T>
void add_mlp(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t hidden,
             std::size_t out, std::uint64_t seed) {
  add_linear(store, prefix + ".0", in, hidden, seed);
  add_linear(store, prefix + ".1", hidden, out, seed);
}

template <typename T>
void add_layer_norm(ParameterStore<T>& store, const std::string& prefix, std::size_t width) {
  store.add(prefix + ".g", Tensor<T>({width}, T(1)));
  store.add(prefix + ".b", Tensor<T>({width}));
}

template <typename T>
Var<T> linear(Tape<T>& tape, ParameterStore<T>& store, const std::string& prefix, Var<T> x) {
  return add(matmul(x, tape.parameter(store.at(prefix + ".w"))), tape.parameter(store.at(prefix + ".b")));
}

template <typename T>
Var<T> mlp(Tape<T>& tape, ParameterStore<T>& store, const std::string& prefix, Var<T> x) {
  return linear(tape, store, prefix + ".1", relu(linear(tape, store, prefix + ".0", x)));
}

template <typename T>
Var<T> affine_layer_norm(Tape<T>& tape, ParameterStore<T>& store, const std::string& prefix, Var<T> x) {
  return add(mul(layer_norm(x), tape.parameter(store.at(prefix + ".g"))), tape.parameter(store.at(prefix + ".b")));
}

/// Constant [rows, 3] tensor from 3-vectors.
template <typename T, typename Points>
Var<T> points_constant(Tape<T>& tape, const Points& pts, std::size_t rows) {
  std::vector<T> v(rows * 3);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int a = 0; a < 3; ++a) v[r * 3 + static_cast<std::size_t>(a)] = static_cast<T>(pts[r][a]);
  }
  return tape.constant({rows, 3}, std::move(v));
}

}  // namespace sgpc::nn
