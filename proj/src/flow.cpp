#include "umad/flow/flow.hpp"

#include <cmath>
#include <limits>

namespace umad::flow {

using namespace umad::ad;

Tensor identity_grid(Index n, Index h, Index w) {
  Tensor g = Tensor::zeros({n, 2, h, w});
  for (Index b = 0; b < n; ++b)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        g.data[((b * 2 + 0) * h + y) * w + x] = static_cast<double>(x);
        g.data[((b * 2 + 1) * h + y) * w + x] = static_cast<double>(y);
      }
  return g;
}

Var warp(const Var& frames, const Var& flow_field) {
  require(frames.shape()[0] == flow_field.shape()[0] &&
              frames.shape()[2] == flow_field.shape()[2] &&
              frames.shape()[3] == flow_field.shape()[3],
          "warp: shape mismatch");
  Var grid(identity_grid(frames.shape()[0], frames.shape()[2], frames.shape()[3]));
  return bilinear_sample(frames, add(grid, flow_field));
}

Tensor warp(const Tensor& frame, const data::FlowField& flow) {
  Index C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  Tensor f4({1, C, H, W}, frame.data);
  Tensor fl = Tensor::zeros({1, 2, H, W});
  fl.data.segment(0, H * W) = flow.u.data;
  fl.data.segment(H * W, H * W) = flow.v.data;
  Var out = warp(Var(std::move(f4)), Var(std::move(fl)));
  return Tensor({C, H, W}, out.value().data);
}

data::FlowField block_match_oracle(const Tensor& f_prev, const Tensor& f_next,
                                   Index radius, Index block) {
  Index C = f_prev.dim(0), H = f_prev.dim(1), W = f_prev.dim(2);
  require(f_prev.shape == f_next.shape, "block_match_oracle: shape mismatch");
  auto clampi = [](Index i, Index n) { return std::min(n - 1, std::max<Index>(0, i)); };
  data::FlowField out = data::FlowField::zeros(H, W);
  for (Index by = 0; by < H; by += block)
    for (Index bx = 0; bx < W; bx += block) {
      Index bh = std::min(block, H - by), bw = std::min(block, W - bx);
      double best_cost = std::numeric_limits<double>::infinity();
      Index best_u = 0, best_v = 0;
      for (Index dv = -radius; dv <= radius; ++dv)
        for (Index du = -radius; du <= radius; ++du) {
          double cost = 0;
          for (Index c = 0; c < C; ++c)
            for (Index y = 0; y < bh; ++y)
              for (Index x = 0; x < bw; ++x) {
                Index sy = clampi(by + y + dv, H), sx = clampi(bx + x + du, W);
                cost += std::abs(f_prev.data[(c * H + sy) * W + sx] -
                                 f_next.data[(c * H + by + y) * W + bx + x]);
              }
          bool better = cost < best_cost - 1e-12;
          if (!better && cost < best_cost + 1e-12) {
            Index cand = std::abs(du) + std::abs(dv);
            Index cur = std::abs(best_u) + std::abs(best_v);
            better = cand < cur ||
                     (cand == cur &&
                      (du < best_u || (du == best_u && dv < best_v)));
          }
          if (better) {
            best_cost = cost;
            best_u = du;
            best_v = dv;
          }
        }
      for (Index y = 0; y < bh; ++y)
        for (Index x = 0; x < bw; ++x) {
          out.u.data[(by + y) * W + bx + x] = static_cast<double>(best_u);
          out.v.data[(by + y) * W + bx + x] = static_cast<double>(best_v);
        }
    }
  return out;
}

Var correlation_volume(const Var& fa, const Var& fb) {
  require(fa.shape() == fb.shape(), "correlation_volume: shape mismatch");
  require(fa.shape()[0] == 1, "correlation_volume: batch must be 1");
  Index C = fa.shape()[1], h = fa.shape()[2], w = fa.shape()[3];
  Var A = transpose(reshape(fa, {C, h * w}));  // (hw, C)
  Var B = transpose(reshape(fb, {C, h * w}));
  return matmul_nt(A, B);  // (hw, hw)
}

namespace {

// reflect-pad H and W (axes 2, 3) up to multiples of m using slice+concat
Var pad_to_multiple(const Var& x, Index m) {
  Var out = x;
  Index H = out.shape()[2], W = out.shape()[3];
  Index ph = (m - H % m) % m, pw = (m - W % m) % m;
  if (ph > 0) {
    std::vector<Var> parts{out};
    for (Index i = 0; i < ph; ++i)
      parts.push_back(slice(out, 2, H - 2 - i, 1));
    out = concat(parts, 2);
  }
  if (pw > 0) {
    Index W0 = out.shape()[3];
    std::vector<Var> parts{out};
    for (Index i = 0; i < pw; ++i)
      parts.push_back(slice(out, 3, W0 - 2 - i, 1));
    out = concat(parts, 3);
  }
  return out;
}

}  // namespace

FlowNet::FlowNet(nn::ParamStore& ps, const std::string& prefix, FlowConfig cfg)
    : cfg_(cfg) {
  Index K = 2 * cfg.lookup_radius + 1;
  enc1_ = nn::Conv2d(ps, prefix + ".enc1", 3, 16, 3, 2);
  enc2_ = nn::Conv2d(ps, prefix + ".enc2", 16, cfg.feature_channels, 3, 2);
  enc3_ = nn::Conv2d(ps, prefix + ".enc3", cfg.feature_channels, cfg.feature_channels, 3, 1);
  upd1_ = nn::Conv2d(ps, prefix + ".upd1", K * K + 2, cfg.hidden_channels, 3, 1);
  upd2_ = nn::Conv2d(ps, prefix + ".upd2", cfg.hidden_channels, cfg.hidden_channels, 3, 1);
  upd3_ = nn::Conv2d(ps, prefix + ".upd3", cfg.hidden_channels, 2, 1, 1, 0, 1,
                     /*zero_init=*/true);
}

Var FlowNet::encode_features(const Var& frame) const {
  require(frame.shape().size() == 4 && frame.shape()[1] == 3,
          "encode_features: expected (N,3,H,W)");
  Var x = pad_to_multiple(frame, cfg_.scale);
  x = silu(enc1_(x));
  x = silu(enc2_(x));
  return enc3_(x);
}

Var FlowNet::lookup(const Var& volume, const Var& flow_lr, Index h, Index w) const {
  Index hw = h * w;
  Index r = cfg_.lookup_radius, K = 2 * r + 1;
  // volume rows become a stack of hw single-channel (h, w) maps
  Var maps = reshape(volume, {hw, 1, h, w});
  // per-pixel sample coordinates: own position + current flow + offset grid
  Tensor base = Tensor::zeros({hw, 2, K, K});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      Index i = y * w + x;
      for (Index oy = 0; oy < K; ++oy)
        for (Index ox = 0; ox < K; ++ox) {
          base.data[((i * 2 + 0) * K + oy) * K + ox] = static_cast<double>(x + ox - r);
          base.data[((i * 2 + 1) * K + oy) * K + ox] = static_cast<double>(y + oy - r);
        }
    }
  // flow (1,2,h,w) -> (hw, 2) -> broadcast over the offset window
  Var flow_px = transpose(reshape(flow_lr, {2, hw}));
  Var coords = add(Var(std::move(base)), broadcast_hw(flow_px, K, K));
  Var sampled = bilinear_sample(maps, coords);       // (hw, 1, K, K)
  Var per_pixel = reshape(sampled, {hw, K * K});     // corr features per pixel
  // back to (1, K*K, h, w)
  return reshape(transpose(per_pixel), {1, K * K, h, w});
}

FlowIterState FlowNet::flow_update(const Var& volume, const FlowIterState& state) const {
  if (state.iteration >= cfg_.num_refinements)
    throw std::runtime_error("flow_update: refinement budget exhausted");
  Index h = state.flow.shape()[2], w = state.flow.shape()[3];
  Var corr = lookup(volume, state.flow, h, w);
  Var inp = concat({corr, state.flow}, 1);
  Var x = silu(upd1_(inp));
  x = silu(upd2_(x));
  Var delta = upd3_(x);
  return FlowIterState{add(state.flow, delta), state.iteration + 1};
}

Var FlowNet::estimate_flow(const Var& f_prev, const Var& f_next) const {
  require(f_prev.shape() == f_next.shape(), "estimate_flow: shape mismatch");
  Index H = f_prev.shape()[2], W = f_prev.shape()[3];
  // anchor on the later frame, look up in the earlier one: the estimated
  // field is the sampling map aligning f_prev to f_next
  Var fp = encode_features(f_prev);
  Var ft = encode_features(f_next);
  Index h = ft.shape()[2], w = ft.shape()[3];
  FlowIterState st{Var(Tensor::zeros({1, 2, h, w}), false), 0};
  if (cfg_.num_refinements > 0) {
    Var vol = correlation_volume(ft, fp);
    for (Index i = 0; i < cfg_.num_refinements; ++i) st = flow_update(vol, st);
  }
  Var full = muls(upsample_nearest2d(st.flow, cfg_.scale), static_cast<double>(cfg_.scale));
  // crop any pad-to-multiple excess
  if (full.shape()[2] != H) full = slice(full, 2, 0, H);
  if (full.shape()[3] != W) full = slice(full, 3, 0, W);
  return full;
}

data::FlowField FlowNet::estimate_flow_field(const Tensor& f_prev,
                                             const Tensor& f_next) const {
  Index C = f_prev.dim(0), H = f_prev.dim(1), W = f_prev.dim(2);
  Var a(Tensor({1, C, H, W}, f_prev.data));
  Var b(Tensor({1, C, H, W}, f_next.data));
  return to_field(estimate_flow(a, b));
}

Var to_var(const data::FlowField& f) {
  Index H = f.height(), W = f.width();
  Tensor t = Tensor::zeros({1, 2, H, W});
  t.data.segment(0, H * W) = f.u.data;
  t.data.segment(H * W, H * W) = f.v.data;
  return Var(std::move(t));
}

data::FlowField to_field(const Var& v) {
  Index H = v.shape()[2], W = v.shape()[3];
  data::FlowField f = data::FlowField::zeros(H, W);
  f.u.data = v.value().data.segment(0, H * W);
  f.v.data = v.value().data.segment(H * W, H * W);
  return f;
}

}  // namespace umad::flow
