#pragma once

#include "umad/core/ops.hpp"

#include <map>
#include <random>
#include <string>

namespace umad::nn {

using ad::Var;

// Owns all learnable parameters by name. Creation order is deterministic
// given a fixed construction sequence, so initialization is reproducible
// from the seed alone. Initial values are rounded through float so that
// float32 checkpoint serialization is lossless.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Var create(const std::string& name, Shape shape, double init_scale) {
    require(!params_.count(name), "ParamStore: duplicate parameter name");
    Tensor t = Tensor::zeros(shape);
    if (init_scale != 0.0) {
      std::uniform_real_distribution<double> dist(-init_scale, init_scale);
      for (Index i = 0; i < t.numel(); ++i)
        t.data[i] = static_cast<double>(static_cast<float>(dist(rng_)));
    }
    Var v(std::move(t), true);
    params_.emplace(name, v);
    return v;
  }

  Var create_const(const std::string& name, Shape shape, double value) {
    require(!params_.count(name), "ParamStore: duplicate parameter name");
    Var v(Tensor::full(std::move(shape), value), true);
    params_.emplace(name, v);
    return v;
  }

  Var create_from(const std::string& name, Tensor init) {
    require(!params_.count(name), "ParamStore: duplicate parameter name");
    for (Index i = 0; i < init.numel(); ++i)
      init.data[i] = static_cast<double>(static_cast<float>(init.data[i]));
    Var v(std::move(init), true);
    params_.emplace(name, v);
    return v;
  }

  Var& at(const std::string& name) { return params_.at(name); }
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  std::map<std::string, Var>& params() { return params_; }
  const std::map<std::string, Var>& params() const { return params_; }

  void zero_grad() {
    for (auto& [k, v] : params_) v.zero_grad();
  }

  Index total_params() const {
    Index n = 0;
    for (auto& [k, v] : params_) n += v.numel();
    return n;
  }

 private:
  std::map<std::string, Var> params_;
  std::mt19937_64 rng_;
};

struct Linear {
  Var w, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& prefix, Index in, Index out,
         bool zero_init = false) {
    double s = zero_init ? 0.0 : std::sqrt(1.0 / static_cast<double>(in));
    w = ps.create(prefix + ".w", {out, in}, s);
    b = ps.create(prefix + ".b", {out}, 0.0);
  }
  Var operator()(const Var& x) const { return ad::linear(x, w, b); }
};

struct Conv2d {
  Var w, b;
  Index stride = 1, pad = 1, groups = 1;
  ad::PadMode mode = ad::PadMode::Zero;
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& prefix, Index in, Index out, Index k,
         Index stride_ = 1, Index pad_ = -1, Index groups_ = 1, bool zero_init = false,
         ad::PadMode mode_ = ad::PadMode::Zero)
      : stride(stride_), pad(pad_ < 0 ? k / 2 : pad_), groups(groups_), mode(mode_) {
    Index fan_in = (in / groups_) * k * k;
    double s = zero_init ? 0.0 : std::sqrt(1.0 / static_cast<double>(fan_in));
    w = ps.create(prefix + ".w", {out, in / groups_, k, k}, s);
    b = ps.create(prefix + ".b", {out}, 0.0);
  }
  Var operator()(const Var& x) const {
    return ad::conv2d(x, w, b, stride, pad, groups, mode);
  }
};

struct Conv1d {
  Var w, b;
  Index pad = 1;
  ad::PadMode mode = ad::PadMode::Zero;
  Conv1d() = default;
  Conv1d(ParamStore& ps, const std::string& prefix, Index in, Index out, Index k,
         Index pad_ = -1, ad::PadMode mode_ = ad::PadMode::Zero)
      : pad(pad_ < 0 ? k / 2 : pad_), mode(mode_) {
    double s = std::sqrt(1.0 / static_cast<double>(in * k));
    w = ps.create(prefix + ".w", {out, in, k}, s);
    b = ps.create(prefix + ".b", {out}, 0.0);
  }
  Var operator()(const Var& x) const { return ad::conv1d(x, w, b, pad, mode); }
};

struct LayerNorm {
  Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& prefix, Index c) {
    gamma = ps.create_const(prefix + ".gamma", {c}, 1.0);
    beta = ps.create_const(prefix + ".beta", {c}, 0.0);
  }
  Var operator()(const Var& x) const { return ad::layer_norm_channels(x, gamma, beta); }
};

}  // namespace umad::nn
