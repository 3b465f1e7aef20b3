#pragma once

#include "umad/core/nn.hpp"
#include "umad/data/types.hpp"

#include <string>

namespace umad::flow {

using ad::Var;

// Constant identity sampling grid as a (N, 2, H, W) tensor (x in channel 0).
Tensor identity_grid(Index n, Index h, Index w);

// warp(f, u)(p) = f(p + u(p)), bilinear, clamp-to-edge. Differentiable in both.
Var warp(const Var& frames, const Var& flow_field);
Tensor warp(const Tensor& frame, const data::FlowField& flow);

// Exhaustive per-block SAD search. Cost of displacement d for a block B of
// f_next: sum over B of |f_prev(p + d) - f_next(p)| (clamped sampling).
// Ties broken by smallest |u|+|v|, then lexicographic (u, v).
data::FlowField block_match_oracle(const Tensor& f_prev, const Tensor& f_next,
                                   Index radius, Index block);

// S[i, j] = <fa_i, fb_j> over feature channels; fa, fb are (1, C, h, w).
Var correlation_volume(const Var& fa, const Var& fb);

struct FlowConfig {
  Index feature_channels = 32;
  Index scale = 4;  // feature downsampling factor
  Index num_refinements = 4;
  Index lookup_radius = 3;
  Index hidden_channels = 48;
};

struct FlowIterState {
  Var flow;  // (1, 2, h, w) at feature scale
  Index iteration = 0;
};

// RAFT-style estimator: shared conv encoder, all-pairs correlation, iterative
// residual refinement with a zero-initialized final layer (zero flow at init).
class FlowNet {
 public:
  FlowNet() = default;
  FlowNet(nn::ParamStore& ps, const std::string& prefix, FlowConfig cfg = {});

  // (1, 3, H, W) -> (1, Cf, H/scale, W/scale); pad-reflect then crop for
  // indivisible sizes
  Var encode_features(const Var& frame) const;

  // one refinement step reading a local correlation lookup around the
  // current flow; throws if the iteration budget is exhausted
  FlowIterState flow_update(const Var& volume, const FlowIterState& state) const;

  // (1, 3, H, W) x2 -> (1, 2, H, W) full-resolution flow such that
  // f_prev(p + u(p)) ~ f_next(p)
  Var estimate_flow(const Var& f_prev, const Var& f_next) const;

  data::FlowField estimate_flow_field(const Tensor& f_prev, const Tensor& f_next) const;

  const FlowConfig& config() const { return cfg_; }

 private:
  Var lookup(const Var& volume, const Var& flow, Index h, Index w) const;

  FlowConfig cfg_;
  nn::Conv2d enc1_, enc2_, enc3_;
  nn::Conv2d upd1_, upd2_, upd3_;
};

// convert between Var (1,2,H,W) and FlowField
Var to_var(const data::FlowField& f);
data::FlowField to_field(const Var& v);

}  // namespace umad::flow
