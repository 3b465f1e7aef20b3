#pragma once

#include "umad/core/ops.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace umad::test {

// Central finite-difference check of d(loss)/d(param) against the analytic
// gradient from the reverse pass. `loss_fn` must rebuild the graph from the
// current parameter values on every call.
struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  Index worst_index = -1;
};

inline GradCheckResult gradcheck(const std::function<ad::Var()>& loss_fn, ad::Var param,
                                 double h = 1e-5, Index max_probe = 64,
                                 std::uint64_t probe_seed = 17) {
  ad::Var loss = loss_fn();
  param.zero_grad();
  // other params in the graph may carry stale grads; only `param` is read
  ad::backward(loss);
  Array analytic = param.grad();

  GradCheckResult res;
  Index n = param.numel();
  std::mt19937_64 rng(probe_seed);
  std::vector<Index> idx(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  if (n > max_probe) {
    for (Index i = 0; i < max_probe; ++i) {
      Index j = static_cast<Index>(rng() % static_cast<std::uint64_t>(n - i)) + i;
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(max_probe));
  }

  for (Index i : idx) {
    double orig = param.value().data[i];
    param.value().data[i] = orig + h;
    double fp = loss_fn().scalar();
    param.value().data[i] = orig - h;
    double fm = loss_fn().scalar();
    param.value().data[i] = orig;
    double fd = (fp - fm) / (2 * h);
    double abs_err = std::abs(fd - analytic[i]);
    double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
    double rel = abs_err / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
    }
    res.max_abs_err = std::max(res.max_abs_err, abs_err);
  }
  return res;
}

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Index i = 0; i < t.numel(); ++i) t.data[i] = dist(rng);
  return t;
}

}  // namespace umad::test
