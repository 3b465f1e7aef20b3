#pragma once

#include "umad/core/nn.hpp"
#include "umad/data/types.hpp"

#include <string>

namespace umad::umse {

using ad::Var;

struct UmseConfig {
  Index factor_dim = 8;    // per-factor embedding width
  Index out_channels = 48; // C' of the fused embedding
  Index struct_channels() const { return 3 * factor_dim; }
};

// (1, C_s) structural vector replicated to every spatial position -> (1, C_s, H, W)
Var broadcast_spatial(const Var& vec, Index h, Index w);

// Unified motion-structure encoder: per-factor MLPs over normalized priors,
// spatial broadcast, and a pointwise fusion with the flow field.
class Umse {
 public:
  Umse() = default;
  Umse(nn::ParamStore& ps, const std::string& prefix, UmseConfig cfg = {});

  // normalized (t/T, window_scale, q) through one 1 -> 8 -> 8 SiLU MLP each,
  // concatenated to (1, 3*factor_dim)
  Var embed_structural(const data::StructuralPriors& priors) const;

  // channel-concat (2 + C_s) then 1x1 projection to out_channels; the flow is
  // area-resized to the structural map's resolution first when sizes differ
  Var fuse(const Var& flow_field, const Var& struct_map) const;

  // full path: e = fuse(flow, broadcast(embed(priors)))
  Var condition(const Var& flow_field, const data::StructuralPriors& priors) const;

  const UmseConfig& config() const { return cfg_; }

 private:
  Var factor_mlp(const nn::Linear& l1, const nn::Linear& l2, double value) const;

  UmseConfig cfg_;
  nn::Linear t1_, t2_, s1_, s2_, q1_, q2_;
  nn::Conv2d proj_;
};

}  // namespace umad::umse
