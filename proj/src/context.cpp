#include "umad/context/context.hpp"

#include "umad/data/synth.hpp"

namespace umad::context {

using namespace umad::ad;

Var glu_channels(const Var& x) {
  Index c2 = x.shape()[1];
  require(c2 % 2 == 0, "glu_channels: channel count must be even");
  Var a = slice(x, 1, 0, c2 / 2);
  Var b = slice(x, 1, c2 / 2, c2 / 2);
  return mul(a, sigmoid(b));
}

TscBlock::TscBlock(nn::ParamStore& ps, const std::string& prefix, Index channels) {
  // reflect padding everywhere so constant inputs have constant responses
  temporal_ = nn::Conv1d(ps, prefix + ".temporal", channels, 2 * channels, 3, -1,
                         ad::PadMode::Reflect);
  point_t_ = nn::Conv1d(ps, prefix + ".point_t", channels, channels, 1);
  depthwise_ = nn::Conv2d(ps, prefix + ".depthwise", channels, channels, 3, 1, -1,
                          channels, false, ad::PadMode::Reflect);
  point_s_ = nn::Conv2d(ps, prefix + ".point_s", channels, channels, 1, 1, 0);
}

Var TscBlock::operator()(const Var& x) const {
  require(x.shape().size() == 5, "tsc_block: expected (B,C,D,H,W)");
  Index B = x.shape()[0], D = x.shape()[2];
  Index H = x.shape()[3], W = x.shape()[4];
  Var t = fold_time(x);                     // (B*H*W, C, D)
  t = glu_channels(temporal_(t));
  t = point_t_(t);
  Var s = fold_space(unfold_time(t, B, H, W));  // (B*D, C, H, W)
  s = point_s_(depthwise_(s));
  return unfold_space(s, B, D);
}

Index TscBlock::param_count(Index c) {
  // temporal k3 + its bias, temporal pointwise, depthwise 3x3, spatial pointwise
  return (2 * c * c * 3 + 2 * c) + (c * c + c) + (c * 9 + c) + (c * c + c);
}

ContextEncoder::ContextEncoder(nn::ParamStore& ps, const std::string& prefix,
                               ContextConfig cfg)
    : cfg_(cfg) {
  g_stem_ = nn::Conv2d(ps, prefix + ".g_stem", 3, cfg.channels, 3, 1, -1, 1, false,
                       ad::PadMode::Reflect);
  g_b1_ = TscBlock(ps, prefix + ".g_b1", cfg.channels);
  g_b2_ = TscBlock(ps, prefix + ".g_b2", cfg.channels);
  p_stem_ = nn::Conv2d(ps, prefix + ".p_stem", 3, cfg.channels, 3, 1, -1, 1, false,
                       ad::PadMode::Reflect);
  p_b1_ = TscBlock(ps, prefix + ".p_b1", cfg.channels);
  p_b2_ = TscBlock(ps, prefix + ".p_b2", cfg.channels);
}

Var ContextEncoder::stem(const nn::Conv2d& conv, const Tensor& frame) const {
  Index C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  return silu(conv(Var(Tensor({1, C, H, W}, frame.data))));
}

ContextFeatures ContextEncoder::gcm(const Tensor& full_frame, Index factor) const {
  Tensor small = data::downsample(full_frame, factor);
  Var f = stem(g_stem_, small);  // (1, C_c, h, w)
  Index C = f.shape()[1], h = f.shape()[2], w = f.shape()[3];
  Var x = reshape(f, {1, C, 1, h, w});
  x = g_b2_(g_b1_(x));
  return ContextFeatures{reshape(x, {1, C, h, w}), ContextSource::Global};
}

ContextFeatures ContextEncoder::ptcm(const std::vector<Tensor>& post_frames) const {
  require(!post_frames.empty(), "ptcm: need at least one post-target frame");
  Index K = static_cast<Index>(post_frames.size());
  std::vector<Var> slices;
  Index C = 0, h = 0, w = 0;
  for (const Tensor& fr : post_frames) {
    require(fr.shape == post_frames.front().shape, "ptcm: frame shape mismatch");
    Var f = stem(p_stem_, data::downsample(fr, cfg_.downsample_factor));
    C = f.shape()[1];
    h = f.shape()[2];
    w = f.shape()[3];
    slices.push_back(reshape(f, {1, C, 1, h, w}));
  }
  Var x = K == 1 ? slices[0] : concat(slices, 2);  // stack on D
  x = p_b2_(p_b1_(x));
  // average over the temporal axis
  Var acc = slice(x, 2, 0, 1);
  for (Index d = 1; d < K; ++d) acc = add(acc, slice(x, 2, d, 1));
  acc = muls(acc, 1.0 / static_cast<double>(K));
  return ContextFeatures{reshape(acc, {1, C, h, w}), ContextSource::PostTemporal};
}

}  // namespace umad::context
