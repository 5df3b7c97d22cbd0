#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sgpc/binary_io.hpp"
#include "sgpc/nn/tensor.hpp"

namespace sgpc::nn {

/// Named trainable tensors plus their Adam moments.
template <typename T>
class ParameterStore {
 public:
  struct Moments {
    std::vector<T> first;
    std::vector<T> second;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) throw InputError("duplicate parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Tensor<T>>& params() { return params_; }
  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, t] : params_) out.add(name, t.template cast<U>());
    return out;
  }

  /// Copies values from a store of another precision with identical layout.
  template <typename U>
  void assign_from(const ParameterStore<U>& other) {
    for (auto& [name, t] : params_) {
      const auto& src = other.at(name);
      if (src.shape != t.shape) throw ShapeError("assign_from '" + name + "'", t.shape, src.shape);
      t.data.assign(src.data.begin(), src.data.end());
    }
  }

 private:
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, Moments> moments_;
  std::uint64_t step_ = 0;
};

struct AdamOptions {
  double lr = 5e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam; weight decay is decoupled and applied first.
template <typename T>
void adam_step(ParameterStore<T>& store, const AdamOptions& opt = {}) {
  for (const auto& [name, t] : store.params()) {
    if (!t.has_grad()) throw InputError("adam_step: parameter '" + name + "' has no gradient");
  }
  const std::uint64_t step = store.step() + 1;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const T decay = static_cast<T>(1.0 - opt.lr * opt.weight_decay);
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (auto& [name, t] : store.params()) {
    auto& m = store.moments()[name];
    if (m.first.size() != t.numel()) {
      m.first.assign(t.numel(), T(0));
      m.second.assign(t.numel(), T(0));
    }
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const T g = t.grad[i];
      m.first[i] = b1 * m.first[i] + (T(1) - b1) * g;
      m.second[i] = b2 * m.second[i] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m.first[i]) / c1;
      const double vhat = static_cast<double>(m.second[i]) / c2;
      t.data[i] = t.data[i] * decay - static_cast<T>(opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
  store.set_step(step);
}

// Checkpoint: "SGWT", version u8, count u32, per parameter name (u16 length +
// UTF-8), rank u8, dims u32..., f32 data; then a flag byte and, when set, the
// Adam step count u64 followed by first/second moments per parameter.
inline constexpr std::string_view kCheckpointMagic = "SGWT";
inline constexpr std::uint8_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore<T>& store, bool with_adam) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(store.params().size()));
  for (const auto& [name, t] : store.params()) {
    if (name.size() > 0xFFFF) throw InputError("parameter name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (T x : t.data) w.f32(static_cast<float>(x));
  }
  w.u8(with_adam ? 1 : 0);
  if (with_adam) {
    w.u64(store.step());
    for (const auto& [name, t] : store.params()) {
      auto it = store.moments().find(name);
      for (std::size_t i = 0; i < t.numel(); ++i) {
        w.f32(it == store.moments().end() ? 0.f : static_cast<float>(it->second.first[i]));
      }
      for (std::size_t i = 0; i < t.numel(); ++i) {
        w.f32(it == store.moments().end() ? 0.f : static_cast<float>(it->second.second[i]));
      }
    }
  }
  return std::move(w).bytes();
}

template <typename T>
ParameterStore<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.raw(4) != kCheckpointMagic) {
    throw FormatError(FormatError::Kind::BadMagic, "not an SGWT checkpoint");
  }
  if (const auto v = r.u8(); v != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::BadVersion, "unsupported checkpoint version " + std::to_string(v));
  }
  ParameterStore<T> store;
  const std::uint32_t count = r.u32();
  std::vector<std::string> order;
  for (std::uint32_t p = 0; p < count; ++p) {
    std::string name = r.raw(r.u16());
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    const std::size_t n = numel(shape);
    if (n > r.remaining() / 4) throw FormatError(FormatError::Kind::Truncated, "checkpoint truncated in '" + name + "'");
    Tensor<T> t(shape);
    for (auto& x : t.data) x = static_cast<T>(r.f32());
    store.add(name, std::move(t));
    order.push_back(std::move(name));
  }
  if (r.u8() != 0) {
    store.set_step(r.u64());
    for (const auto& name : order) {
      auto& m = store.moments()[name];
      const std::size_t n = store.at(name).numel();
      m.first.resize(n);
      m.second.resize(n);
      for (auto& x : m.first) x = static_cast<T>(r.f32());
      for (auto& x : m.second) x = static_cast<T>(r.f32());
    }
  }
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::Malformed, "trailing bytes in checkpoint");
  return store;
}

}  // namespace sgpc::nn
