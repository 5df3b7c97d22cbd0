#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "sgpc/decoder.hpp"
#include "sgpc/geometry.hpp"
#include "sgpc/nn/tensor.hpp"
#include "sgpc/patching.hpp"

namespace sgpc {

// ---------------------------------------------------------------------------
// Plain-value forms (64-bit), used for evaluation.

/// Mean over `from` of the squared distance to the nearest point of `to`.
inline double directed_sq_distance(std::span<const Vec3> from, std::span<const Vec3> to) {
  if (from.empty() || to.empty()) throw InputError("chamfer distance of an empty point set");
  double s = 0.0;
  if (to.size() > kBruteForceLimit) {
    const KdTree tree(to);
    for (const auto& p : from) s += tree.nearest(p).second;
  } else {
    for (const auto& p : from) s += nearest_neighbor(p, to).second;
  }
  return s / static_cast<double>(from.size());
}

/// Symmetric Chamfer distance in squared units.
inline double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b) {
  return 0.5 * directed_sq_distance(b, a) + 0.5 * directed_sq_distance(a, b);
}

inline double mask_bce(const std::vector<bool>& truth, std::span<const double> predicted) {
  if (truth.size() != predicted.size()) throw InputError("mask_bce length mismatch");
  if (truth.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double p = std::clamp(predicted[i], 1e-7, 1.0 - 1e-7);
    s += truth[i] ? std::log(p) : std::log(1.0 - p);
  }
  return -s / static_cast<double>(truth.size());
}

struct DensityGrid {
  std::array<std::size_t, 3> dims{8, 8, 8};
  std::size_t cells() const { return dims[0] * dims[1] * dims[2]; }
};

namespace detail {

// Linear weights along one axis of [-1, 1] split into `d` cells, interpolating
// between cell centers; positions beyond the outer centers clamp to the edge cell.
struct AxisWeights {
  std::size_t lo = 0, hi = 0;
  double w_lo = 1.0, w_hi = 0.0;
  double dw = 0.0;  // d(w_hi)/du; d(w_lo)/du = -dw
};

inline AxisWeights axis_weights(double u, std::size_t d) {
  const double t = (u + 1.0) * 0.5 * static_cast<double>(d) - 0.5;
  AxisWeights w;
  if (t <= 0.0) return w;
  if (t >= static_cast<double>(d - 1)) {
    w.lo = w.hi = d - 1;
    return w;
  }
  const double fl = std::floor(t);
  w.lo = static_cast<std::size_t>(fl);
  w.hi = w.lo + 1;
  w.w_hi = t - fl;
  w.w_lo = 1.0 - w.w_hi;
  w.dw = 0.5 * static_cast<double>(d);
  return w;
}

template <typename T>
std::vector<double> soft_occupancy(const std::vector<T>& pts, const DensityGrid& grid) {
  std::vector<double> occ(grid.cells(), 0.0);
  const std::size_t n = pts.size() / 3;
  for (std::size_t i = 0; i < n; ++i) {
    AxisWeights w[3];
    for (std::size_t a = 0; a < 3; ++a) w[a] = axis_weights(static_cast<double>(pts[3 * i + a]), grid.dims[a]);
    for (int cx = 0; cx < 2; ++cx) {
      for (int cy = 0; cy < 2; ++cy) {
        for (int cz = 0; cz < 2; ++cz) {
          const double wx = cx ? w[0].w_hi : w[0].w_lo;
          const double wy = cy ? w[1].w_hi : w[1].w_lo;
          const double wz = cz ? w[2].w_hi : w[2].w_lo;
          const double wt = wx * wy * wz;
          if (wt == 0.0) continue;
          const std::size_t ix = cx ? w[0].hi : w[0].lo;
          const std::size_t iy = cy ? w[1].hi : w[1].lo;
          const std::size_t iz = cz ? w[2].hi : w[2].lo;
          occ[(ix * grid.dims[1] + iy) * grid.dims[2] + iz] += wt;
        }
      }
    }
  }
  for (auto& o : occ) o /= static_cast<double>(n);
  return occ;
}

// d(loss)/d(points) given d(loss)/d(occupancy).
template <typename T>
void soft_occupancy_backward(const std::vector<T>& pts, const DensityGrid& grid, const std::vector<double>& docc,
                             std::vector<T>& gpts) {
  const std::size_t n = pts.size() / 3;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    AxisWeights w[3];
    for (std::size_t a = 0; a < 3; ++a) w[a] = axis_weights(static_cast<double>(pts[3 * i + a]), grid.dims[a]);
    double g[3] = {0.0, 0.0, 0.0};
    for (int cx = 0; cx < 2; ++cx) {
      for (int cy = 0; cy < 2; ++cy) {
        for (int cz = 0; cz < 2; ++cz) {
          const std::size_t ix = cx ? w[0].hi : w[0].lo;
          const std::size_t iy = cy ? w[1].hi : w[1].lo;
          const std::size_t iz = cz ? w[2].hi : w[2].lo;
          const double d = docc[(ix * grid.dims[1] + iy) * grid.dims[2] + iz] * inv_n;
          const double wx = cx ? w[0].w_hi : w[0].w_lo, dx = cx ? w[0].dw : -w[0].dw;
          const double wy = cy ? w[1].w_hi : w[1].w_lo, dy = cy ? w[1].dw : -w[1].dw;
          const double wz = cz ? w[2].w_hi : w[2].w_lo, dz = cz ? w[2].dw : -w[2].dw;
          g[0] += d * dx * wy * wz;
          g[1] += d * wx * dy * wz;
          g[2] += d * wx * wy * dz;
        }
      }
    }
    for (std::size_t a = 0; a < 3; ++a) gpts[3 * i + a] += static_cast<T>(g[a]);
  }
}

}  // namespace detail

/// Mean squared difference of the normalized soft occupancy grids over [-1, 1]^3.
inline double density_loss(std::span<const Vec3> src, std::span<const Vec3> trg, const DensityGrid& grid = {}) {
  if (src.empty() || trg.empty()) throw InputError("density loss of an empty point set");
  const auto flat = [](std::span<const Vec3> p) {
    std::vector<double> v;
    for (const auto& x : p) v.insert(v.end(), {x[0], x[1], x[2]});
    return v;
  };
  const auto os = detail::soft_occupancy(flat(src), grid);
  const auto ot = detail::soft_occupancy(flat(trg), grid);
  double s = 0.0;
  for (std::size_t v = 0; v < os.size(); ++v) s += (ot[v] - os[v]) * (ot[v] - os[v]);
  return s / static_cast<double>(grid.cells());
}

// ---------------------------------------------------------------------------
// Tape forms.

namespace detail {

template <typename T>
std::pair<std::size_t, T> nearest_row(const std::vector<T>& set, std::size_t count, const T* q) {
  std::size_t best = 0;
  T best_d = std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < count; ++j) {
    const T dx = q[0] - set[3 * j], dy = q[1] - set[3 * j + 1], dz = q[2] - set[3 * j + 2];
    const T d = dx * dx + dy * dy + dz * dz;
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return {best, best_d};
}

}  // namespace detail

/// Symmetric Chamfer between two [n, 3] sets; gradients flow through the
/// nearest-neighbor assignment of this evaluation.
template <typename T>
nn::Var<T> chamfer(nn::Var<T> a, nn::Var<T> b) {
  nn::detail::same_tape(a, b, "chamfer");
  if (a.shape().size() != 2 || a.shape()[1] != 3 || b.shape().size() != 2 || b.shape()[1] != 3) {
    throw nn::ShapeError("chamfer", a.shape(), b.shape());
  }
  const std::size_t n = a.shape()[0], m = b.shape()[0];
  if (n == 0 || m == 0) throw InputError("chamfer distance of an empty point set");
  const auto& va = a.value();
  const auto& vb = b.value();
  std::vector<std::size_t> a_to_b(n), b_to_a(m);
  T sa = T(0), sb = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    auto [j, d] = detail::nearest_row(vb, m, &va[3 * i]);
    a_to_b[i] = j;
    sa += d;
  }
  for (std::size_t j = 0; j < m; ++j) {
    auto [i, d] = detail::nearest_row(va, n, &vb[3 * j]);
    b_to_a[j] = i;
    sb += d;
  }
  const T value = sa / (T(2) * static_cast<T>(n)) + sb / (T(2) * static_cast<T>(m));
  nn::Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.push({1}, {value},
                [ia, ib, n, m, a_to_b = std::move(a_to_b), b_to_a = std::move(b_to_a)](nn::Tape<T>& tp,
                                                                                       std::size_t self) {
                  const T g = tp.node(self).grad[0];
                  const auto& xa = tp.node(ia).value;
                  const auto& xb = tp.node(ib).value;
                  const bool ga = tp.needs_grad(ia), gb = tp.needs_grad(ib);
                  std::vector<T>* da = ga ? &tp.grad(ia) : nullptr;
                  std::vector<T>* db = gb ? &tp.grad(ib) : nullptr;
                  const T ka = g / static_cast<T>(n), kb = g / static_cast<T>(m);
                  for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t j = a_to_b[i];
                    for (std::size_t c = 0; c < 3; ++c) {
                      const T diff = ka * (xa[3 * i + c] - xb[3 * j + c]);
                      if (da) (*da)[3 * i + c] += diff;
                      if (db) (*db)[3 * j + c] -= diff;
                    }
                  }
                  for (std::size_t j = 0; j < m; ++j) {
                    const std::size_t i = b_to_a[j];
                    for (std::size_t c = 0; c < 3; ++c) {
                      const T diff = kb * (xb[3 * j + c] - xa[3 * i + c]);
                      if (db) (*db)[3 * j + c] += diff;
                      if (da) (*da)[3 * i + c] -= diff;
                    }
                  }
                },
                t.needs_grad(ia) || t.needs_grad(ib));
}

template <typename T>
nn::Var<T> density_loss(nn::Var<T> src, nn::Var<T> trg, const DensityGrid& grid = {}) {
  nn::detail::same_tape(src, trg, "density_loss");
  if (src.shape().size() != 2 || src.shape()[1] != 3 || trg.shape().size() != 2 || trg.shape()[1] != 3) {
    throw nn::ShapeError("density_loss", src.shape(), trg.shape());
  }
  if (src.numel() == 0 || trg.numel() == 0) throw InputError("density loss of an empty point set");
  const auto os = detail::soft_occupancy(src.value(), grid);
  const auto ot = detail::soft_occupancy(trg.value(), grid);
  const double v = static_cast<double>(grid.cells());
  double s = 0.0;
  std::vector<double> diff(os.size());
  for (std::size_t k = 0; k < os.size(); ++k) {
    diff[k] = os[k] - ot[k];
    s += diff[k] * diff[k];
  }
  nn::Tape<T>& t = *src.tape;
  const std::size_t is = src.id, it = trg.id;
  return t.push({1}, {static_cast<T>(s / v)},
                [is, it, grid, v, diff = std::move(diff)](nn::Tape<T>& tp, std::size_t self) {
                  const double g = static_cast<double>(tp.node(self).grad[0]);
                  std::vector<double> d(diff.size());
                  for (std::size_t k = 0; k < d.size(); ++k) d[k] = g * 2.0 * diff[k] / v;
                  if (tp.needs_grad(is)) detail::soft_occupancy_backward(tp.node(is).value, grid, d, tp.grad(is));
                  if (tp.needs_grad(it)) {
                    for (auto& x : d) x = -x;
                    detail::soft_occupancy_backward(tp.node(it).value, grid, d, tp.grad(it));
                  }
                },
                t.needs_grad(is) || t.needs_grad(it));
}

/// Binary cross-entropy of probabilities against a boolean mask; predictions
/// are clamped to [1e-7, 1 - 1e-7] and clamped entries pass no gradient.
template <typename T>
nn::Var<T> mask_bce(nn::Var<T> predicted, const std::vector<bool>& truth) {
  if (predicted.numel() != truth.size()) {
    throw nn::ShapeError("mask_bce (mask of " + std::to_string(truth.size()) + ")", predicted.shape());
  }
  const auto& p = predicted.value();
  const std::size_t n = truth.size();
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T q = std::clamp(p[i], static_cast<T>(1e-7), static_cast<T>(1.0 - 1e-7));
    s += truth[i] ? std::log(q) : std::log(T(1) - q);
  }
  const std::size_t ip = predicted.id;
  return predicted.tape->push({1}, {-s / static_cast<T>(n)},
                              [ip, truth, n](nn::Tape<T>& tp, std::size_t self) {
                                const T g = tp.node(self).grad[0] / static_cast<T>(n);
                                const auto& p = tp.node(ip).value;
                                auto& gp = tp.grad(ip);
                                const T lo = static_cast<T>(1e-7), hi = static_cast<T>(1.0 - 1e-7);
                                for (std::size_t i = 0; i < n; ++i) {
                                  if (p[i] < lo || p[i] > hi) continue;
                                  gp[i] += truth[i] ? -g / p[i] : g / (T(1) - p[i]);
                                }
                              },
                              predicted.tape->needs_grad(ip));
}

// ---------------------------------------------------------------------------
// Objective

struct LossWeights {
  std::array<double, 4> lambda{0.5, 10.0, 1.0, 0.5};
  double decay = 0.98;
  std::size_t epoch = 0;
};

/// lambda_i(epoch) = lambda_i(0) * decay^epoch.
inline LossWeights schedule_lambdas(std::size_t epoch, const std::array<double, 4>& initial = {0.5, 10.0, 1.0, 0.5},
                                    double decay = 0.98) {
  if (!(decay > 0.0 && decay <= 1.0)) throw InputError("lambda decay must lie in (0, 1]");
  LossWeights w;
  w.decay = decay;
  w.epoch = epoch;
  const double f = std::pow(decay, static_cast<double>(epoch));
  for (std::size_t i = 0; i < 4; ++i) w.lambda[i] = initial[i] * f;
  return w;
}

template <typename T>
struct LossTerms {
  nn::Var<T> fine_cd, coarse_cd, density, mask_fine, mask_coarse, total;
};

/// Coarse supervision mask: the first ceil(n_valid / G) slots.
inline std::vector<bool> coarse_target_mask(std::size_t n_valid, std::size_t coarse, std::size_t grid_points) {
  std::vector<bool> m(coarse, false);
  const std::size_t k = std::min(coarse, (n_valid + grid_points - 1) / grid_points);
  std::fill_n(m.begin(), k, true);
  return m;
}

/// Weighted objective of one patch; every term lives in the patch frame.
template <typename T>
LossTerms<T> total_loss(nn::Tape<T>& tape, const Patch& patch, const DecoderGraph<T>& rec, const DecoderConfig& cfg,
                        const LossWeights& w, const DensityGrid& grid = {}) {
  if (patch.capacity() != cfg.fine()) throw ConfigMismatch("patch capacity does not equal M * G");
  auto gt = nn::points_constant(tape, patch.points_local, patch.n_valid);
  LossTerms<T> l;
  l.fine_cd = chamfer(gt, rec.fine);
  l.coarse_cd = chamfer(gt, rec.coarse);
  l.density = density_loss(rec.fine, gt, grid);
  l.mask_fine = mask_bce(rec.fine_confidence, patch.valid_mask);
  l.mask_coarse = mask_bce(rec.coarse_confidence, coarse_target_mask(patch.n_valid, cfg.coarse, cfg.grid_points()));
  const auto term = [](nn::Var<T> v, double lambda) { return nn::scale(v, static_cast<T>(lambda)); };
  l.total = nn::add(nn::add(nn::add(nn::add(l.fine_cd, term(l.coarse_cd, w.lambda[0])), term(l.density, w.lambda[1])),
                            term(l.mask_fine, w.lambda[2])),
                    term(l.mask_coarse, w.lambda[3]));
  return l;
}

}  // namespace sgpc
