#include "umad/umse/umse.hpp"

namespace umad::umse {

using namespace umad::ad;

Var broadcast_spatial(const Var& vec, Index h, Index w) {
  require(vec.shape().size() == 2 && vec.shape()[0] == 1,
          "broadcast_spatial: expected (1, C)");
  require(h >= 1 && w >= 1, "broadcast_spatial: empty target");
  return broadcast_hw(vec, h, w);
}

Umse::Umse(nn::ParamStore& ps, const std::string& prefix, UmseConfig cfg)
    : cfg_(cfg) {
  Index d = cfg.factor_dim;
  t1_ = nn::Linear(ps, prefix + ".t1", 1, d);
  t2_ = nn::Linear(ps, prefix + ".t2", d, d);
  s1_ = nn::Linear(ps, prefix + ".s1", 1, d);
  s2_ = nn::Linear(ps, prefix + ".s2", d, d);
  q1_ = nn::Linear(ps, prefix + ".q1", 1, d);
  q2_ = nn::Linear(ps, prefix + ".q2", d, d);
  proj_ = nn::Conv2d(ps, prefix + ".proj", 2 + cfg.struct_channels(),
                     cfg.out_channels, 1, 1, 0);
}

Var Umse::factor_mlp(const nn::Linear& l1, const nn::Linear& l2, double value) const {
  Var x(Tensor::full({1, 1}, value));
  return l2(silu(l1(x)));
}

Var Umse::embed_structural(const data::StructuralPriors& priors) const {
  require(priors.sequence_length > 0, "embed_structural: sequence_length must be positive");
  require(priors.frame_index >= 0 && priors.frame_index < priors.sequence_length,
          "embed_structural: frame_index out of range");
  require(priors.window_scale > 0 && priors.window_scale <= 1,
          "embed_structural: window_scale out of (0,1]");
  double tn = static_cast<double>(priors.frame_index) /
              static_cast<double>(priors.sequence_length);
  Var et = factor_mlp(t1_, t2_, tn);
  Var es = factor_mlp(s1_, s2_, priors.window_scale);
  Var eq = factor_mlp(q1_, q2_, priors.quality_q);
  return concat({et, es, eq}, 1);
}

Var Umse::fuse(const Var& flow_field, const Var& struct_map) const {
  Index h = struct_map.shape()[2], w = struct_map.shape()[3];
  Var fl = resize_area(flow_field, h, w);
  require(fl.shape()[2] == h && fl.shape()[3] == w, "fuse: resize failed");
  return proj_(concat({fl, struct_map}, 1));
}

Var Umse::condition(const Var& flow_field, const data::StructuralPriors& priors) const {
  Index h = flow_field.shape()[2], w = flow_field.shape()[3];
  return fuse(flow_field, broadcast_spatial(embed_structural(priors), h, w));
}

}  // namespace umad::umse
