#pragma once

#include "umad/core/autodiff.hpp"

#include <vector>

namespace umad::ad {

enum class PadMode { Zero, Reflect };

// elementwise, same shape
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
// scalar
Var adds(const Var& a, double s);
Var muls(const Var& a, double s);
Var neg(const Var& a);
// unary
Var exp_(const Var& a);
Var sqrt_(const Var& a);
Var square(const Var& a);
Var abs_(const Var& a);  // sign subgradient, 0 at 0
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var tanh_(const Var& a);
Var softplus(const Var& a);

// reductions
Var sum(const Var& a);
Var mean(const Var& a);

// structure
Var reshape(const Var& a, Shape s);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& a, int axis, Index start, Index len);

// channel-axis broadcasting helpers; x has shape (N, C, ...), per-channel
// vectors have shape (C)
Var scale_channels(const Var& x, const Var& s);
Var add_channels(const Var& x, const Var& b);
// (N, C, ...) -> (N, C*k, ...), each channel repeated k times contiguously
Var repeat_channels_interleaved(const Var& x, Index k);
// (N, K, ...) -> (N, C*K, ...), the whole channel block tiled C times
Var tile_channels(const Var& x, Index c);
// (N, C*k, ...) -> (N, C, ...), sum over each contiguous group of k channels
Var sum_channel_groups(const Var& x, Index k);
// (N, C) -> (N, C, H, W)
Var broadcast_hw(const Var& x, Index h, Index w);
// x (N, C, spatial...), v (N, C) broadcast-added over trailing dims
Var add_rowbc(const Var& x, const Var& v);

// (m,n) -> (n,m)
Var transpose(const Var& a);

// layout moves for (B, C, D, H, W) spatio-temporal tensors
Var fold_time(const Var& x);                              // -> (B*H*W, C, D)
Var unfold_time(const Var& x, Index b, Index h, Index w); // inverse
Var fold_space(const Var& x);                             // -> (B*D, C, H, W)
Var unfold_space(const Var& x, Index b, Index d);         // inverse

// area-average / nearest resize between resolutions with integer ratio
Var resize_area(const Var& x, Index h, Index w);
// linear algebra: A (m,k), B (n,k) -> A * B^T (m,n)
Var matmul_nt(const Var& a, const Var& b);
// x (N, Cin), w (Cout, Cin), b (Cout) -> (N, Cout)
Var linear(const Var& x, const Var& w, const Var& b);

// conv
Var conv2d(const Var& x, const Var& w, const Var& b, Index stride, Index pad,
           Index groups = 1, PadMode mode = PadMode::Zero);
Var conv1d(const Var& x, const Var& w, const Var& b, Index pad,
           PadMode mode = PadMode::Zero);

// normalization over the channel axis at each position; x (N, C, spatial...)
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta,
                        double eps = 1e-6);

// pooling / resizing on (N, C, H, W)
Var avg_pool2d(const Var& x, Index k);
Var upsample_nearest2d(const Var& x, Index f);
Var global_avg_pool(const Var& x);  // -> (N, C)

// img (N, C, H, W), coords (N, 2, Ho, Wo) absolute pixel positions
// (channel 0 = x/col, channel 1 = y/row), clamp-to-edge bilinear sampling
Var bilinear_sample(const Var& img, const Var& coords);

}  // namespace umad::ad
