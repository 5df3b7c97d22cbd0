#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sgpc/nn/optim.hpp"

namespace sgpc::nn {

struct GradCheckOptions {
  double step = 1e-5;             // h = step * max(1, |w|)
  double denominator_floor = 1e-6;
  std::size_t max_elements = 0;   // per tensor; 0 checks every element
  std::uint64_t seed = 0;         // picks elements when sampling
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;  // "name[index]"
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// for every (or a sampled subset of) parameter element in `store`.
/// `loss_fn` must build a fresh graph on the given tape and return a scalar.
inline GradCheckResult gradient_check(ParameterStore<double>& store,
                                      const std::function<Var<double>(Tape<double>&)>& loss_fn,
                                      const GradCheckOptions& opt = {}) {
  store.zero_grad();
  {
    Tape<double> tape(false);
    tape.backward(loss_fn(tape));
  }
  const auto eval = [&] {
    Tape<double> tape(false);
    return loss_fn(tape).item();
  };
  GradCheckResult res;
  std::uint64_t tensor_index = 0;
  for (auto& [name, t] : store.params()) {
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_elements != 0 && idx.size() > opt.max_elements) {
      const CounterRng rng(mix64(opt.seed, tensor_index));
      for (std::size_t i = 0; i < opt.max_elements; ++i) {
        std::swap(idx[i], idx[i + rng.below(i, idx.size() - i)]);
      }
      idx.resize(opt.max_elements);
    }
    ++tensor_index;
    for (std::size_t i : idx) {
      const double w = t.data[i];
      const double h = opt.step * std::max(1.0, std::abs(w));
      t.data[i] = w + h;
      const double up = eval();
      t.data[i] = w - h;
      const double down = eval();
      t.data[i] = w;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = t.grad[i];
      const double rel = relative_error(analytic, numeric, opt.denominator_floor);
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic - numeric));
      if (rel > res.max_rel_error || res.checked == 0) {
        res.max_rel_error = std::max(res.max_rel_error, rel);
        if (rel >= res.max_rel_error) res.worst = name + "[" + std::to_string(i) + "]";
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace sgpc::nn
