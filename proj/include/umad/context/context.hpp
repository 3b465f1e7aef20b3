#pragma once

#include "umad/core/nn.hpp"
#include "umad/data/types.hpp"

#include <string>
#include <vector>

namespace umad::context {

using ad::Var;

enum class ContextSource { Global, PostTemporal };

struct ContextFeatures {
  Var values;  // (1, C_c, h, w)
  ContextSource source = ContextSource::Global;
};

struct ContextConfig {
  Index channels = 8;          // C_c
  Index downsample_factor = 4; // applied to full frames before encoding
};

// gated linear unit over the channel axis: x (N, 2C, ...) -> a * sigmoid(b)
Var glu_channels(const Var& x);

// Temporal-spatial convolution block on (B, C, D, H, W): a temporal 1D conv
// with GLU gating followed by a depthwise-separable spatial conv. The cheap
// factorized form stands in for a full 3D convolution.
class TscBlock {
 public:
  TscBlock() = default;
  TscBlock(nn::ParamStore& ps, const std::string& prefix, Index channels);
  Var operator()(const Var& x) const;

  static Index param_count(Index channels);

 private:
  nn::Conv1d temporal_;   // C -> 2C, k=3
  nn::Conv1d point_t_;    // C -> C, k=1
  nn::Conv2d depthwise_;  // C -> C, 3x3, groups=C
  nn::Conv2d point_s_;    // C -> C, 1x1
};

// Auxiliary encoders around the denoiser: a global view of the full degraded
// frame and a strictly causal-in-reverse peek at the post-target frames.
class ContextEncoder {
 public:
  ContextEncoder() = default;
  ContextEncoder(nn::ParamStore& ps, const std::string& prefix, ContextConfig cfg = {});

  // full degraded frame (3, H, W) -> bicubic downsample by factor, stem conv,
  // two TSC blocks with D=1
  ContextFeatures gcm(const Tensor& full_frame, Index factor) const;

  // post-target frames t+1 .. t+K stacked on the temporal axis; never sees
  // frames at or before the target index
  ContextFeatures ptcm(const std::vector<Tensor>& post_frames) const;

  const ContextConfig& config() const { return cfg_; }

 private:
  Var stem(const nn::Conv2d& conv, const Tensor& frame) const;

  ContextConfig cfg_;
  nn::Conv2d g_stem_;
  TscBlock g_b1_, g_b2_;
  nn::Conv2d p_stem_;
  TscBlock p_b1_, p_b2_;
};

}  // namespace umad::context
