#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "sgpc/common.hpp"

namespace sgpc::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream o;
  o << '[';
  for (std::size_t i = 0; i < s.size(); ++i) o << (i ? "," : "") << s[i];
  o << ']';
  return o.str();
}

class ShapeError : public InputError {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : InputError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b)) {}
  ShapeError(const std::string& op, const Shape& a) : InputError(op + ": invalid shape " + shape_str(a)) {}
};

/// Dense row-major array with an optional gradient buffer.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches the tensor

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(nn::numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != nn::numel(shape)) throw ShapeError("Tensor", shape);
  }

  std::size_t numel() const { return data.size(); }
  bool has_grad() const { return grad.size() == data.size(); }
  void zero_grad() { grad.assign(data.size(), T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Shape& shape() const { return tape->node(id).shape; }
  const std::vector<T>& value() const { return tape->node(id).value; }
  std::size_t numel() const { return value().size(); }
  T item() const {
    if (numel() != 1) throw ShapeError("item", shape());
    return value()[0];
  }
};

/// Reverse-mode tape. Ops append nodes in evaluation order; backward walks
/// them in reverse. One tape per thread; a tape is consumed by backward.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    Backward backward;
    Tensor<T>* param = nullptr;
    bool needs_grad = false;
  };

  explicit Tape(bool training = false, std::uint64_t dropout_seed = 0)
      : training_(training), dropout_seed_(dropout_seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const { return training_; }
  std::uint64_t next_dropout_seed() { return mix64(dropout_seed_, dropout_ops_++); }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Shape shape, std::vector<T> value) {
    if (value.size() != numel(shape)) throw ShapeError("constant", shape);
    return push(std::move(shape), std::move(value), {}, false);
  }

  /// Registers a trainable tensor; repeated registration returns the same node.
  Var<T> parameter(Tensor<T>& t) {
    check_open();
    if (auto it = param_ids_.find(&t); it != param_ids_.end()) return {this, it->second};
    Var<T> v = push(t.shape, t.data, {}, true);
    nodes_[v.id].param = &t;
    param_ids_[&t] = v.id;
    return v;
  }

  Var<T> push(Shape shape, std::vector<T> value, Backward backward, bool needs_grad) {
    check_open();
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, std::move(backward), nullptr, needs_grad});
    return {this, nodes_.size() - 1};
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer of a node, allocated on first use.
  std::vector<T>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  /// Accumulates d(loss)/d(param) into every registered Tensor::grad.
  void backward(Var<T> loss) {
    if (consumed_) throw Error("backward called on a consumed tape");
    if (loss.tape != this) throw InputError("loss belongs to another tape");
    if (nodes_[loss.id].value.size() != 1) throw ShapeError("backward (loss must be scalar)", nodes_[loss.id].shape);
    consumed_ = true;
    grad(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty() || !n.needs_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& pg = n.param->grad;
        if (pg.size() != n.grad.size()) pg.assign(n.grad.size(), T(0));
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  bool consumed() const { return consumed_; }

 private:
  void check_open() const {
    if (consumed_) throw Error("tape already consumed by backward");
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> param_ids_;
  bool training_;
  bool consumed_ = false;
  std::uint64_t dropout_seed_;
  std::uint64_t dropout_ops_ = 0;
};

namespace detail {

inline std::size_t rows_of(const Shape& s) { return s.empty() ? 1 : numel(s) / s.back(); }
inline std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

// (outer, axis length, inner) decomposition for reductions along `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, int axis, const char* op) {
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + " (axis out of range)", s);
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
  a.len = s[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < rank; ++i) a.inner *= s[static_cast<std::size_t>(i)];
  return a;
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw InputError(std::string(op) + ": operands on different tapes");
}

enum class Broadcast { Same, Rows };

// b either matches a exactly or matches a's trailing axis (repeated over rows).
inline Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::Same;
  if (!a.empty() && numel(b) == a.back() && (b.size() == 1 || (b.size() == 2 && b[0] == 1))) return Broadcast::Rows;
  throw ShapeError(op, a, b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [..., k] x [k, n] -> [..., n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "matmul");
  Tape<T>& t = *a.tape;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[0]) throw ShapeError("matmul", sa, sb);
  const std::size_t r = detail::rows_of(sa), k = sb[0], n = sb[1];
  std::vector<T> out(r * n);
  MatMap<T>(out.data(), r, n).noalias() = CMatMap<T>(a.value().data(), r, k) * CMatMap<T>(b.value().data(), k, n);
  Shape so = sa;
  so.back() = n;
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(so), std::move(out),
                [ia, ib, r, k, n](Tape<T>& tp, std::size_t self) {
                  CMatMap<T> g(tp.node(self).grad.data(), r, n);
                  if (tp.needs_grad(ia)) {
                    MatMap<T>(tp.grad(ia).data(), r, k).noalias() +=
                        g * CMatMap<T>(tp.node(ib).value.data(), k, n).transpose();
                  }
                  if (tp.needs_grad(ib)) {
                    MatMap<T>(tp.grad(ib).data(), k, n).noalias() +=
                        CMatMap<T>(tp.node(ia).value.data(), r, k).transpose() * g;
                  }
                },
                t.needs_grad(ia) || t.needs_grad(ib));
}

/// [r, k] x [s, k]^T -> [r, s]
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "matmul_nt");
  Tape<T>& t = *a.tape;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1]) throw ShapeError("matmul_nt", sa, sb);
  const std::size_t r = sa[0], k = sa[1], s = sb[0];
  std::vector<T> out(r * s);
  MatMap<T>(out.data(), r, s).noalias() =
      CMatMap<T>(a.value().data(), r, k) * CMatMap<T>(b.value().data(), s, k).transpose();
  const std::size_t ia = a.id, ib = b.id;
  return t.push({r, s}, std::move(out),
                [ia, ib, r, k, s](Tape<T>& tp, std::size_t self) {
                  CMatMap<T> g(tp.node(self).grad.data(), r, s);
                  if (tp.needs_grad(ia)) {
                    MatMap<T>(tp.grad(ia).data(), r, k).noalias() += g * CMatMap<T>(tp.node(ib).value.data(), s, k);
                  }
                  if (tp.needs_grad(ib)) {
                    MatMap<T>(tp.grad(ib).data(), s, k).noalias() +=
                        g.transpose() * CMatMap<T>(tp.node(ia).value.data(), r, k);
                  }
                },
                t.needs_grad(ia) || t.needs_grad(ib));
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("transpose", s);
  const std::size_t r = s[0], c = s[1];
  std::vector<T> out(r * c);
  MatMap<T>(out.data(), c, r) = CMatMap<T>(a.value().data(), r, c).transpose();
  const std::size_t ia = a.id;
  return a.tape->push({c, r}, std::move(out),
                      [ia, r, c](Tape<T>& tp, std::size_t self) {
                        MatMap<T>(tp.grad(ia).data(), r, c) +=
                            CMatMap<T>(tp.node(self).grad.data(), c, r).transpose();
                      },
                      a.tape->needs_grad(ia));
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with row broadcasting of the second operand.

namespace detail {

template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary(Var<T> a, Var<T> b, const char* op, Fwd fwd, DA da, DB db) {
  same_tape(a, b, op);
  Tape<T>& t = *a.tape;
  const Broadcast kind = broadcast_kind(a.shape(), b.shape(), op);
  const std::size_t n = a.numel(), cols = kind == Broadcast::Same ? n : b.numel();
  const auto& va = a.value();
  const auto& vb = b.value();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(va[i], vb[i % cols]);
  const std::size_t ia = a.id, ib = b.id;
  return t.push(a.shape(), std::move(out),
                [ia, ib, n, cols, da, db](Tape<T>& tp, std::size_t self) {
                  const auto& g = tp.node(self).grad;
                  const auto& x = tp.node(ia).value;
                  const auto& y = tp.node(ib).value;
                  if (tp.needs_grad(ia)) {
                    auto& gx = tp.grad(ia);
                    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * da(x[i], y[i % cols]);
                  }
                  if (tp.needs_grad(ib)) {
                    auto& gy = tp.grad(ib);
                    for (std::size_t i = 0; i < n; ++i) gy[i % cols] += g[i] * db(x[i], y[i % cols]);
                  }
                },
                t.needs_grad(ia) || t.needs_grad(ib));
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(Var<T> a, Fwd fwd, Deriv deriv) {
  Tape<T>& t = *a.tape;
  const auto& va = a.value();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i]);
  const std::size_t ia = a.id;
  // deriv(x, y) receives the input and the output value.
  return t.push(a.shape(), std::move(out),
                [ia, deriv](Tape<T>& tp, std::size_t self) {
                  const auto& g = tp.node(self).grad;
                  const auto& x = tp.node(ia).value;
                  const auto& y = tp.node(self).value;
                  auto& gx = tp.grad(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(x[i], y[i]);
                },
                t.needs_grad(ia));
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Var<T> scale(Var<T> a, std::type_identity_t<T> s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Softmax along `axis` with max subtraction. -inf entries get probability 0.
template <typename T>
Var<T> softmax(Var<T> a, int axis = -1) {
  const auto sp = detail::split_axis(a.shape(), axis, "softmax");
  const auto& x = a.value();
  std::vector<T> y(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      if (mx == -std::numeric_limits<T>::infinity()) throw InputError("softmax over an all -inf slice");
      T sum = T(0);
      for (std::size_t k = 0; k < sp.len; ++k) {
        const T e = std::exp(x[base + k * sp.inner] - mx);
        y[base + k * sp.inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < sp.len; ++k) y[base + k * sp.inner] /= sum;
    }
  }
  const std::size_t ia = a.id;
  return a.tape->push(a.shape(), std::move(y),
                      [ia, sp](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        const auto& p = tp.node(self).value;
                        auto& gx = tp.grad(ia);
                        for (std::size_t o = 0; o < sp.outer; ++o) {
                          for (std::size_t in = 0; in < sp.inner; ++in) {
                            const std::size_t base = o * sp.len * sp.inner + in;
                            T dot = T(0);
                            for (std::size_t k = 0; k < sp.len; ++k) {
                              dot += g[base + k * sp.inner] * p[base + k * sp.inner];
                            }
                            for (std::size_t k = 0; k < sp.len; ++k) {
                              const std::size_t i = base + k * sp.inner;
                              gx[i] += p[i] * (g[i] - dot);
                            }
                          }
                        }
                      },
                      a.tape->needs_grad(ia));
}

inline constexpr double kLayerNormEps = 1e-5;

/// Zero-mean unit-variance normalization along `axis` (no affine part).
template <typename T>
Var<T> layer_norm(Var<T> a, int axis = -1) {
  const auto sp = detail::split_axis(a.shape(), axis, "layer_norm");
  const auto& x = a.value();
  std::vector<T> y(x.size());
  std::vector<T> inv_std(sp.outer * sp.inner);
  const T n = static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mean = T(0);
      for (std::size_t k = 0; k < sp.len; ++k) mean += x[base + k * sp.inner];
      mean /= n;
      T var = T(0);
      for (std::size_t k = 0; k < sp.len; ++k) {
        const T d = x[base + k * sp.inner] - mean;
        var += d * d;
      }
      var /= n;
      const T is = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
      inv_std[o * sp.inner + in] = is;
      for (std::size_t k = 0; k < sp.len; ++k) y[base + k * sp.inner] = (x[base + k * sp.inner] - mean) * is;
    }
  }
  const std::size_t ia = a.id;
  return a.tape->push(a.shape(), std::move(y),
                      [ia, sp, inv_std = std::move(inv_std)](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        const auto& yv = tp.node(self).value;
                        auto& gx = tp.grad(ia);
                        const T n = static_cast<T>(sp.len);
                        for (std::size_t o = 0; o < sp.outer; ++o) {
                          for (std::size_t in = 0; in < sp.inner; ++in) {
                            const std::size_t base = o * sp.len * sp.inner + in;
                            T mg = T(0), mgy = T(0);
                            for (std::size_t k = 0; k < sp.len; ++k) {
                              const std::size_t i = base + k * sp.inner;
                              mg += g[i];
                              mgy += g[i] * yv[i];
                            }
                            mg /= n;
                            mgy /= n;
                            const T is = inv_std[o * sp.inner + in];
                            for (std::size_t k = 0; k < sp.len; ++k) {
                              const std::size_t i = base + k * sp.inner;
                              gx[i] += is * (g[i] - mg - yv[i] * mgy);
                            }
                          }
                        }
                      },
                      a.tape->needs_grad(ia));
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::size_t> ids) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw ShapeError("embedding_lookup", s);
  const std::size_t rows = s[0], d = s[1];
  std::vector<T> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) {
      throw InputError("embedding_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(table.value().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t it = table.id;
  return table.tape->push({ids.size(), d}, std::move(out),
                          [it, d, idv = std::vector<std::size_t>(ids.begin(), ids.end())](Tape<T>& tp,
                                                                                          std::size_t self) {
                            const auto& g = tp.node(self).grad;
                            auto& gt = tp.grad(it);
                            for (std::size_t r = 0; r < idv.size(); ++r) {
                              for (std::size_t c = 0; c < d; ++c) gt[idv[r] * d + c] += g[r * d + c];
                            }
                          },
                          table.tape->needs_grad(it));
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw InputError("concat of zero tensors");
  Tape<T>& t = *parts[0].tape;
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat (axis out of range)", s0);
  const auto ax = static_cast<std::size_t>(axis);
  Shape so = s0;
  so[ax] = 0;
  std::vector<std::size_t> widths, ids;
  bool any_grad = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "concat");
    const Shape& sp = p.shape();
    if (sp.size() != s0.size()) throw ShapeError("concat", s0, sp);
    for (std::size_t i = 0; i < sp.size(); ++i) {
      if (i != ax && sp[i] != s0[i]) throw ShapeError("concat", s0, sp);
    }
    so[ax] += sp[ax];
    ids.push_back(p.id);
    any_grad = any_grad || t.needs_grad(p.id);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  for (const auto& p : parts) widths.push_back(p.shape()[ax] * inner);
  const std::size_t row = so[ax] * inner;
  std::vector<T> out(numel(so));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + off));
    }
    off += widths[k];
  }
  return t.push(std::move(so), std::move(out),
                [ids, widths, outer, row](Tape<T>& tp, std::size_t self) {
                  const auto& g = tp.node(self).grad;
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (tp.needs_grad(ids[k])) {
                      auto& gk = tp.grad(ids[k]);
                      for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t c = 0; c < widths[k]; ++c) gk[o * widths[k] + c] += g[o * row + off + c];
                      }
                    }
                    off += widths[k];
                  }
                },
                any_grad);
}

/// Contiguous range [start, start + len) along `axis`.
template <typename T>
Var<T> slice(Var<T> a, int axis, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  const auto sp = detail::split_axis(s, axis, "slice");
  if (start + len > sp.len) throw ShapeError("slice (range " + std::to_string(start) + "+" + std::to_string(len) + ")", s);
  Shape so = s;
  so[static_cast<std::size_t>(axis < 0 ? axis + static_cast<int>(s.size()) : axis)] = len;
  std::vector<T> out(sp.outer * len * sp.inner);
  const auto& v = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), len * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner));
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(so), std::move(out),
                      [ia, sp, start, len](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        auto& gx = tp.grad(ia);
                        for (std::size_t o = 0; o < sp.outer; ++o) {
                          for (std::size_t c = 0; c < len * sp.inner; ++c) {
                            gx[(o * sp.len + start) * sp.inner + c] += g[o * len * sp.inner + c];
                          }
                        }
                      },
                      a.tape->needs_grad(ia));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(shape), a.value(),
                      [ia](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        auto& gx = tp.grad(ia);
                        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                      },
                      a.tape->needs_grad(ia));
}

/// Each row of a [r, c] tensor repeated `times` times consecutively.
template <typename T>
Var<T> repeat_rows(Var<T> a, std::size_t times) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("repeat_rows", s);
  const std::size_t r = s[0], c = s[1];
  std::vector<T> out(r * times * c);
  const auto& v = a.value();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k < times; ++k) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * c), c,
                  out.begin() + static_cast<std::ptrdiff_t>((i * times + k) * c));
    }
  }
  const std::size_t ia = a.id;
  return a.tape->push({r * times, c}, std::move(out),
                      [ia, r, c, times](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        auto& gx = tp.grad(ia);
                        for (std::size_t i = 0; i < r; ++i) {
                          for (std::size_t k = 0; k < times; ++k) {
                            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[(i * times + k) * c + j];
                          }
                        }
                      },
                      a.tape->needs_grad(ia));
}

/// Replaces entries where mask is true by `value`; masked entries pass no gradient.
template <typename T>
Var<T> masked_fill(Var<T> a, const std::vector<bool>& mask, std::type_identity_t<T> value) {
  if (mask.size() != a.numel()) throw ShapeError("masked_fill (mask of " + std::to_string(mask.size()) + ")", a.shape());
  std::vector<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = value;
  }
  const std::size_t ia = a.id;
  return a.tape->push(a.shape(), std::move(out),
                      [ia, mask](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        auto& gx = tp.grad(ia);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (!mask[i]) gx[i] += g[i];
                        }
                      },
                      a.tape->needs_grad(ia));
}

/// Row mask expanded to every element of a [rows, cols] tensor.
inline std::vector<bool> expand_row_mask(const std::vector<bool>& row_mask, std::size_t cols) {
  std::vector<bool> m(row_mask.size() * cols);
  for (std::size_t r = 0; r < row_mask.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] = row_mask[r];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Reductions (sequential, row-major order)

template <typename T>
Var<T> sum(Var<T> a) {
  T s = T(0);
  for (T x : a.value()) s += x;
  const std::size_t ia = a.id;
  return a.tape->push({1}, {s},
                      [ia](Tape<T>& tp, std::size_t self) {
                        const T g = tp.node(self).grad[0];
                        for (auto& gx : tp.grad(ia)) gx += g;
                      },
                      a.tape->needs_grad(ia));
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Sum along `axis`, which is removed from the shape.
template <typename T>
Var<T> sum_axis(Var<T> a, int axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "sum_axis");
  Shape so = a.shape();
  so.erase(so.begin() + (axis < 0 ? axis + static_cast<int>(so.size()) : axis));
  if (so.empty()) so = {1};
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const auto& x = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.len; ++k) {
      for (std::size_t in = 0; in < sp.inner; ++in) out[o * sp.inner + in] += x[(o * sp.len + k) * sp.inner + in];
    }
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(so), std::move(out),
                      [ia, sp](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        auto& gx = tp.grad(ia);
                        for (std::size_t o = 0; o < sp.outer; ++o) {
                          for (std::size_t k = 0; k < sp.len; ++k) {
                            for (std::size_t in = 0; in < sp.inner; ++in) {
                              gx[(o * sp.len + k) * sp.inner + in] += g[o * sp.inner + in];
                            }
                          }
                        }
                      },
                      a.tape->needs_grad(ia));
}

// ---------------------------------------------------------------------------
// Regularization

/// Inverted dropout with a counter-based Bernoulli mask; identity when the
/// tape is not in training mode or rate == 0.
template <typename T>
Var<T> dropout(Var<T> a, double rate) {
  if (!a.tape->training() || rate <= 0.0) return a;
  if (rate >= 1.0) throw InputError("dropout rate must be below 1");
  const CounterRng rng(a.tape->next_dropout_seed());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(a.numel());
  for (std::size_t i = 0; i < factor.size(); ++i) factor[i] = rng.uniform(i) < rate ? T(0) : keep_scale;
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor[i];
  const std::size_t ia = a.id;
  return a.tape->push(a.shape(), std::move(out),
                      [ia, factor = std::move(factor)](Tape<T>& tp, std::size_t self) {
                        const auto& g = tp.node(self).grad;
                        auto& gx = tp.grad(ia);
                        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
                      },
                      a.tape->needs_grad(ia));
}

// ---------------------------------------------------------------------------
// Fused multi-head scaled dot-product attention.

namespace detail {

template <typename T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedMutMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

// Row-softmax of Q_h K_h^T * scale with invalid key columns at probability 0.
template <typename T>
void attention_probs(const T* q, const T* k, std::size_t n, std::size_t width, std::size_t head,
                     std::size_t dh, const std::vector<bool>& key_valid, RowMat<T>& p) {
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  StridedMap<T> qh(q + head * dh, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dh),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(width)));
  StridedMap<T> kh(k + head * dh, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dh),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(width)));
  p.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  p.noalias() = (qh * kh.transpose()) * sc;
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (key_valid[j]) mx = std::max(mx, p(i, j));
    }
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T e = key_valid[j] ? std::exp(p(i, j) - mx) : T(0);
      p(i, j) = e;
      s += e;
    }
    p.row(static_cast<Eigen::Index>(i)) /= s;
  }
}

}  // namespace detail

/// softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, heads concatenated along the
/// feature axis. Keys with key_valid[j] == false receive exactly zero weight.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const std::vector<bool>& key_valid, std::size_t heads) {
  detail::same_tape(q, k, "attention");
  detail::same_tape(q, v, "attention");
  const Shape& s = q.shape();
  if (s.size() != 2 || k.shape() != s || v.shape() != s) throw ShapeError("attention", s, k.shape());
  const std::size_t n = s[0], width = s[1];
  if (heads == 0 || width % heads != 0) throw ShapeError("attention (heads must divide width)", s);
  if (key_valid.size() != n) throw ShapeError("attention (key mask)", s);
  if (std::none_of(key_valid.begin(), key_valid.end(), [](bool b) { return b; })) {
    throw InputError("attention: every key is masked");
  }
  const std::size_t dh = width / heads;
  std::vector<RowMat<T>> probs(heads);
  std::vector<T> out(n * width);
  for (std::size_t h = 0; h < heads; ++h) {
    detail::attention_probs(q.value().data(), k.value().data(), n, width, h, dh, key_valid, probs[h]);
    detail::StridedMap<T> vh(v.value().data() + h * dh, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dh),
                             Eigen::OuterStride<>(static_cast<Eigen::Index>(width)));
    detail::StridedMutMap<T> oh(out.data() + h * dh, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dh),
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(width)));
    oh.noalias() = probs[h] * vh;
  }
  Tape<T>& t = *q.tape;
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return t.push(s, std::move(out),
                [iq, ik, iv, n, width, heads, dh, probs = std::move(probs)](Tape<T>& tp, std::size_t self) {
                  using SM = detail::StridedMap<T>;
                  using SMM = detail::StridedMutMap<T>;
                  const auto rows = static_cast<Eigen::Index>(n);
                  const auto cols = static_cast<Eigen::Index>(dh);
                  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
                  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
                  const T* g = tp.node(self).grad.data();
                  auto& gq = tp.grad(iq);
                  auto& gk = tp.grad(ik);
                  auto& gv = tp.grad(iv);
                  RowMat<T> dp, ds;
                  for (std::size_t h = 0; h < heads; ++h) {
                    const auto& p = probs[h];
                    SM go(g + h * dh, rows, cols, stride);
                    SM qh(tp.node(iq).value.data() + h * dh, rows, cols, stride);
                    SM kh(tp.node(ik).value.data() + h * dh, rows, cols, stride);
                    SM vh(tp.node(iv).value.data() + h * dh, rows, cols, stride);
                    SMM(gv.data() + h * dh, rows, cols, stride).noalias() += p.transpose() * go;
                    dp.noalias() = go * vh.transpose();
                    ds.resize(rows, rows);
                    for (Eigen::Index i = 0; i < rows; ++i) {
                      const T dot = dp.row(i).dot(p.row(i));
                      ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
                    }
                    ds *= sc;
                    SMM(gq.data() + h * dh, rows, cols, stride).noalias() += ds * kh;
                    SMM(gk.data() + h * dh, rows, cols, stride).noalias() += ds.transpose() * qh;
                  }
                },
                t.needs_grad(iq) || t.needs_grad(ik) || t.needs_grad(iv));
}

/// Attention probabilities of one head, for inspection.
template <typename T>
RowMat<T> attention_weights(const std::vector<T>& q, const std::vector<T>& k, std::size_t n, std::size_t width,
                            std::size_t heads, std::size_t head, const std::vector<bool>& key_valid) {
  RowMat<T> p;
  detail::attention_probs(q.data(), k.data(), n, width, head, width / heads, key_valid, p);
  return p;
}

}  // namespace sgpc::nn
