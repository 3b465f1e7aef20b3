#include "umad/core/ops.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace umad::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

Index inner_size(const Shape& s, int from_axis) {
  Index n = 1;
  for (size_t i = static_cast<size_t>(from_axis); i < s.size(); ++i) n *= s[i];
  return n;
}

// reflect-101 with clamp fallback for degenerate extents
Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

Var unary(const Var& a, Array value, std::function<Array(const Array& g, const Tensor& x)> dfn) {
  Tensor out(a.shape(), std::move(value));
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, dfn](Node& n) {
    accumulate(an, dfn(n.grad, an->value));
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out(a.shape(), a.value().data + b.value().data);
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& n) {
    accumulate(an, n.grad);
    accumulate(bn, n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out(a.shape(), a.value().data - b.value().data);
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& n) {
    accumulate(an, n.grad);
    accumulate(bn, -n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out(a.shape(), a.value().data * b.value().data);
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& n) {
    accumulate(an, n.grad * bn->value.data);
    accumulate(bn, n.grad * an->value.data);
  });
}

Var div(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "div: shape mismatch");
  Tensor out(a.shape(), a.value().data / b.value().data);
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& n) {
    accumulate(an, n.grad / bn->value.data);
    accumulate(bn, -n.grad * an->value.data / (bn->value.data * bn->value.data));
  });
}

Var adds(const Var& a, double s) {
  Tensor out(a.shape(), a.value().data + s);
  auto an = a.node();
  return make_result(std::move(out), {a}, [an](Node& n) { accumulate(an, n.grad); });
}

Var muls(const Var& a, double s) {
  Tensor out(a.shape(), a.value().data * s);
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, s](Node& n) { accumulate(an, n.grad * s); });
}

Var neg(const Var& a) { return muls(a, -1.0); }

Var exp_(const Var& a) {
  Array v = a.value().data.exp();
  auto an = a.node();
  Tensor out(a.shape(), v);
  return make_result(std::move(out), {a}, [an, v](Node& n) { accumulate(an, n.grad * v); });
}

Var sqrt_(const Var& a) {
  Array v = a.value().data.sqrt();
  auto an = a.node();
  Tensor out(a.shape(), v);
  return make_result(std::move(out), {a},
                     [an, v](Node& n) { accumulate(an, n.grad * 0.5 / v); });
}

Var square(const Var& a) {
  return unary(a, a.value().data.square(),
               [](const Array& g, const Tensor& x) -> Array { return g * 2.0 * x.data; });
}

Var abs_(const Var& a) {
  return unary(a, a.value().data.abs(), [](const Array& g, const Tensor& x) -> Array {
    return g * x.data.sign();
  });
}

Var sigmoid(const Var& a) {
  Array v = 1.0 / (1.0 + (-a.value().data).exp());
  auto an = a.node();
  Tensor out(a.shape(), v);
  return make_result(std::move(out), {a}, [an, v](Node& n) {
    accumulate(an, n.grad * v * (1.0 - v));
  });
}

Var silu(const Var& a) {
  Array s = 1.0 / (1.0 + (-a.value().data).exp());
  Array v = a.value().data * s;
  auto an = a.node();
  Tensor out(a.shape(), v);
  return make_result(std::move(out), {a}, [an, s](Node& n) {
    const Array& x = an->value.data;
    accumulate(an, n.grad * (s + x * s * (1.0 - s)));
  });
}

Var tanh_(const Var& a) {
  Array v = a.value().data.tanh();
  auto an = a.node();
  Tensor out(a.shape(), v);
  return make_result(std::move(out), {a}, [an, v](Node& n) {
    accumulate(an, n.grad * (1.0 - v * v));
  });
}

Var softplus(const Var& a) {
  // log(1 + exp(x)), stable form
  const Array& x = a.value().data;
  Array v = x.max(0.0) + (1.0 + (-x.abs()).exp()).log();
  auto an = a.node();
  Tensor out(a.shape(), v);
  return make_result(std::move(out), {a}, [an](Node& n) {
    Array s = 1.0 / (1.0 + (-an->value.data).exp());
    accumulate(an, n.grad * s);
  });
}

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(a.value().data.sum());
  auto an = a.node();
  return make_result(std::move(out), {a}, [an](Node& n) {
    accumulate(an, Array::Constant(an->value.numel(), n.grad[0]));
  });
}

Var mean(const Var& a) {
  double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(a.value().data.sum() * inv);
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, inv](Node& n) {
    accumulate(an, Array::Constant(an->value.numel(), n.grad[0] * inv));
  });
}

Var reshape(const Var& a, Shape s) {
  require(shape_numel(s) == a.numel(), "reshape: numel mismatch");
  Tensor out(std::move(s), a.value().data);
  auto an = a.node();
  return make_result(std::move(out), {a}, [an](Node& n) { accumulate(an, n.grad); });
}

Var concat(const std::vector<Var>& xs, int axis) {
  require(!xs.empty(), "concat: empty input");
  Shape s = xs[0].shape();
  Index outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  Index inner = inner_size(s, axis + 1);
  Index total_axis = 0;
  std::vector<Index> axis_len(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    Shape si = xs[i].shape();
    require(si.size() == s.size(), "concat: rank mismatch");
    for (size_t d = 0; d < s.size(); ++d)
      if (static_cast<int>(d) != axis)
        require(si[d] == s[d], "concat: non-axis dim mismatch");
    axis_len[i] = si[static_cast<size_t>(axis)];
    total_axis += axis_len[i];
  }
  Shape os = s;
  os[static_cast<size_t>(axis)] = total_axis;
  Tensor out = Tensor::zeros(os);
  Index off = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const Array& src = xs[i].value().data;
    for (Index o = 0; o < outer; ++o)
      out.data.segment((o * total_axis + off) * inner, axis_len[i] * inner) =
          src.segment(o * axis_len[i] * inner, axis_len[i] * inner);
    off += axis_len[i];
  }
  std::vector<NodePtr> nodes;
  for (auto& x : xs) nodes.push_back(x.node());
  return make_result(std::move(out), xs,
                     [nodes, axis_len, outer, inner, total_axis](Node& n) {
                       Index off = 0;
                       for (size_t i = 0; i < nodes.size(); ++i) {
                         if (nodes[i]->requires_grad) {
                           nodes[i]->ensure_grad();
                           for (Index o = 0; o < outer; ++o)
                             nodes[i]->grad.segment(o * axis_len[i] * inner,
                                                    axis_len[i] * inner) +=
                                 n.grad.segment((o * total_axis + off) * inner,
                                                axis_len[i] * inner);
                         }
                         off += axis_len[i];
                       }
                     });
}

Var slice(const Var& a, int axis, Index start, Index len) {
  Shape s = a.shape();
  Index alen = s[static_cast<size_t>(axis)];
  require(start >= 0 && start + len <= alen, "slice: out of range");
  Index outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  Index inner = inner_size(s, axis + 1);
  Shape os = s;
  os[static_cast<size_t>(axis)] = len;
  Tensor out = Tensor::zeros(os);
  for (Index o = 0; o < outer; ++o)
    out.data.segment(o * len * inner, len * inner) =
        a.value().data.segment((o * alen + start) * inner, len * inner);
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, outer, inner, alen, start, len](Node& n) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (Index o = 0; o < outer; ++o)
      an->grad.segment((o * alen + start) * inner, len * inner) +=
          n.grad.segment(o * len * inner, len * inner);
  });
}

Var scale_channels(const Var& x, const Var& s) {
  Index N = x.shape()[0], C = x.shape()[1], inner = inner_size(x.shape(), 2);
  require(s.numel() == C, "scale_channels: size mismatch");
  Tensor out = Tensor::zeros(x.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      out.data.segment((n * C + c) * inner, inner) =
          x.value().data.segment((n * C + c) * inner, inner) * s.value().data[c];
  auto xn = x.node(), sn = s.node();
  return make_result(std::move(out), {x, s}, [xn, sn, N, C, inner](Node& nd) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c)
          xn->grad.segment((n * C + c) * inner, inner) +=
              nd.grad.segment((n * C + c) * inner, inner) * sn->value.data[c];
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c)
          sn->grad[c] += (nd.grad.segment((n * C + c) * inner, inner) *
                          xn->value.data.segment((n * C + c) * inner, inner))
                             .sum();
    }
  });
}

Var add_channels(const Var& x, const Var& b) {
  Index N = x.shape()[0], C = x.shape()[1], inner = inner_size(x.shape(), 2);
  require(b.numel() == C, "add_channels: size mismatch");
  Tensor out = Tensor::zeros(x.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      out.data.segment((n * C + c) * inner, inner) =
          x.value().data.segment((n * C + c) * inner, inner) + b.value().data[c];
  auto xn = x.node(), bn = b.node();
  return make_result(std::move(out), {x, b}, [xn, bn, N, C, inner](Node& nd) {
    if (xn->requires_grad) accumulate(xn, nd.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c)
          bn->grad[c] += nd.grad.segment((n * C + c) * inner, inner).sum();
    }
  });
}

Var repeat_channels_interleaved(const Var& x, Index k) {
  Index N = x.shape()[0], C = x.shape()[1], inner = inner_size(x.shape(), 2);
  Shape os = x.shape();
  os[1] = C * k;
  Tensor out = Tensor::zeros(os);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index j = 0; j < k; ++j)
        out.data.segment((n * C * k + c * k + j) * inner, inner) =
            x.value().data.segment((n * C + c) * inner, inner);
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, N, C, k, inner](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c)
        for (Index j = 0; j < k; ++j)
          xn->grad.segment((n * C + c) * inner, inner) +=
              nd.grad.segment((n * C * k + c * k + j) * inner, inner);
  });
}

Var tile_channels(const Var& x, Index c) {
  Index N = x.shape()[0], K = x.shape()[1], inner = inner_size(x.shape(), 2);
  Shape os = x.shape();
  os[1] = c * K;
  Tensor out = Tensor::zeros(os);
  for (Index n = 0; n < N; ++n)
    for (Index t = 0; t < c; ++t)
      out.data.segment((n * c * K + t * K) * inner, K * inner) =
          x.value().data.segment(n * K * inner, K * inner);
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, N, K, c, inner](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index t = 0; t < c; ++t)
        xn->grad.segment(n * K * inner, K * inner) +=
            nd.grad.segment((n * c * K + t * K) * inner, K * inner);
  });
}

Var sum_channel_groups(const Var& x, Index k) {
  Index N = x.shape()[0], CK = x.shape()[1], inner = inner_size(x.shape(), 2);
  require(CK % k == 0, "sum_channel_groups: channels not divisible");
  Index C = CK / k;
  Shape os = x.shape();
  os[1] = C;
  Tensor out = Tensor::zeros(os);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index j = 0; j < k; ++j)
        out.data.segment((n * C + c) * inner, inner) +=
            x.value().data.segment((n * CK + c * k + j) * inner, inner);
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, N, C, k, CK, inner](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c)
        for (Index j = 0; j < k; ++j)
          xn->grad.segment((n * CK + c * k + j) * inner, inner) +=
              nd.grad.segment((n * C + c) * inner, inner);
  });
}

Var broadcast_hw(const Var& x, Index h, Index w) {
  Index N = x.shape()[0], C = x.shape()[1];
  Index inner = h * w;
  Tensor out = Tensor::zeros({N, C, h, w});
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      out.data.segment((n * C + c) * inner, inner) =
          Array::Constant(inner, x.value().data[n * C + c]);
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, N, C, inner](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c)
        xn->grad[n * C + c] += nd.grad.segment((n * C + c) * inner, inner).sum();
  });
}

Var add_rowbc(const Var& x, const Var& v) {
  Index N = x.shape()[0], C = x.shape()[1], inner = inner_size(x.shape(), 2);
  require(v.numel() == N * C, "add_rowbc: size mismatch");
  Tensor out = Tensor::zeros(x.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      out.data.segment((n * C + c) * inner, inner) =
          x.value().data.segment((n * C + c) * inner, inner) + v.value().data[n * C + c];
  auto xn = x.node(), vn = v.node();
  return make_result(std::move(out), {x, v}, [xn, vn, N, C, inner](Node& nd) {
    if (xn->requires_grad) accumulate(xn, nd.grad);
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c)
          vn->grad[n * C + c] += nd.grad.segment((n * C + c) * inner, inner).sum();
    }
  });
}

Var transpose(const Var& a) {
  Index m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  CMapRM A(a.value().data.data(), m, n);
  MapRM(out.data.data(), n, m) = A.transpose();
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, m, n](Node& nd) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    CMapRM G(nd.grad.data(), n, m);
    MapRM(an->grad.data(), m, n) += G.transpose();
  });
}

namespace {

// out.data[i] = x.data[perm[i]]; backward scatters along the inverse map
Var gather_permute(const Var& x, Shape out_shape, std::vector<Index> perm) {
  Tensor out = Tensor::zeros(out_shape);
  for (Index i = 0; i < out.numel(); ++i) out.data[i] = x.value().data[perm[i]];
  auto xn = x.node();
  auto p = std::make_shared<std::vector<Index>>(std::move(perm));
  return make_result(std::move(out), {x}, [xn, p](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index i = 0; i < nd.grad.size(); ++i) xn->grad[(*p)[i]] += nd.grad[i];
  });
}

}  // namespace

Var fold_time(const Var& x) {
  require(x.shape().size() == 5, "fold_time: expected (B,C,D,H,W)");
  Index B = x.shape()[0], C = x.shape()[1], D = x.shape()[2];
  Index H = x.shape()[3], W = x.shape()[4];
  std::vector<Index> perm(x.numel());
  Index i = 0;
  for (Index b = 0; b < B; ++b)
    for (Index y = 0; y < H; ++y)
      for (Index xw = 0; xw < W; ++xw)
        for (Index c = 0; c < C; ++c)
          for (Index d = 0; d < D; ++d)
            perm[i++] = (((b * C + c) * D + d) * H + y) * W + xw;
  return gather_permute(x, {B * H * W, C, D}, std::move(perm));
}

Var unfold_time(const Var& x, Index b, Index h, Index w) {
  require(x.shape().size() == 3 && x.shape()[0] == b * h * w,
          "unfold_time: shape mismatch");
  Index C = x.shape()[1], D = x.shape()[2];
  std::vector<Index> perm(x.numel());
  Index i = 0;
  for (Index bb = 0; bb < b; ++bb)
    for (Index c = 0; c < C; ++c)
      for (Index d = 0; d < D; ++d)
        for (Index y = 0; y < h; ++y)
          for (Index xw = 0; xw < w; ++xw)
            perm[i++] = (((bb * h + y) * w + xw) * C + c) * D + d;
  return gather_permute(x, {b, C, D, h, w}, std::move(perm));
}

Var fold_space(const Var& x) {
  require(x.shape().size() == 5, "fold_space: expected (B,C,D,H,W)");
  Index B = x.shape()[0], C = x.shape()[1], D = x.shape()[2];
  Index H = x.shape()[3], W = x.shape()[4];
  std::vector<Index> perm(x.numel());
  Index i = 0;
  for (Index b = 0; b < B; ++b)
    for (Index d = 0; d < D; ++d)
      for (Index c = 0; c < C; ++c)
        for (Index s = 0; s < H * W; ++s)
          perm[i++] = (((b * C + c) * D + d) * H * W) + s;
  return gather_permute(x, {B * D, C, H, W}, std::move(perm));
}

Var unfold_space(const Var& x, Index b, Index d) {
  require(x.shape().size() == 4 && x.shape()[0] == b * d,
          "unfold_space: shape mismatch");
  Index C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::vector<Index> perm(x.numel());
  Index i = 0;
  for (Index bb = 0; bb < b; ++bb)
    for (Index c = 0; c < C; ++c)
      for (Index dd = 0; dd < d; ++dd)
        for (Index s = 0; s < H * W; ++s)
          perm[i++] = (((bb * d + dd) * C + c) * H * W) + s;
  return gather_permute(x, {b, C, d, H, W}, std::move(perm));
}

Var resize_area(const Var& x, Index h, Index w) {
  Index H = x.shape()[2], W = x.shape()[3];
  if (h == H && w == W) return x;
  if (h <= H) {
    require(H % h == 0 && W % w == 0 && H / h == W / w,
            "resize_area: downscale factor must be integer and isotropic");
    return avg_pool2d(x, H / h);
  }
  require(h % H == 0 && w % W == 0 && h / H == w / W,
          "resize_area: upscale factor must be integer and isotropic");
  return upsample_nearest2d(x, h / H);
}

Var matmul_nt(const Var& a, const Var& b) {
  Index m = a.shape()[0], k = a.shape()[1];
  Index n2 = b.shape()[0];
  require(b.shape()[1] == k, "matmul_nt: inner dim mismatch");
  CMapRM A(a.value().data.data(), m, k);
  CMapRM B(b.value().data.data(), n2, k);
  Tensor out = Tensor::zeros({m, n2});
  MapRM(out.data.data(), m, n2) = A * B.transpose();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn, m, k, n2](Node& nd) {
    CMapRM G(nd.grad.data(), m, n2);
    CMapRM A(an->value.data.data(), m, k);
    CMapRM B(bn->value.data.data(), n2, k);
    if (an->requires_grad) {
      an->ensure_grad();
      MapRM(an->grad.data(), m, k) += G * B;
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MapRM(bn->grad.data(), n2, k) += G.transpose() * A;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = matmul_nt(x, w);
  Index N = y.shape()[0], C = y.shape()[1];
  (void)N;
  require(b.numel() == C, "linear: bias size mismatch");
  // add bias row-broadcast
  Tensor out = Tensor::zeros(y.shape());
  for (Index n = 0; n < y.shape()[0]; ++n)
    out.data.segment(n * C, C) = y.value().data.segment(n * C, C) + b.value().data;
  auto yn = y.node(), bn = b.node();
  return make_result(std::move(out), {y, b}, [yn, bn, C](Node& nd) {
    if (yn->requires_grad) accumulate(yn, nd.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      Index N = nd.value.shape[0];
      for (Index n = 0; n < N; ++n) bn->grad += nd.grad.segment(n * C, C);
    }
  });
}

namespace {

struct Conv2dGeom {
  Index N, Cin, H, W, Cout, kh, kw, stride, pad, groups, Ho, Wo, Cin_g, Cout_g, K;
};

// spatial gather index for one output pixel / kernel tap; -1 means zero pad
inline Index src_index(const Conv2dGeom& g, Index ho, Index wo, Index i, Index j,
                       PadMode mode) {
  Index h = ho * g.stride - g.pad + i;
  Index w = wo * g.stride - g.pad + j;
  if (mode == PadMode::Zero) {
    if (h < 0 || h >= g.H || w < 0 || w >= g.W) return -1;
  } else {
    h = reflect_index(h, g.H);
    w = reflect_index(w, g.W);
  }
  return h * g.W + w;
}

void im2col(const Conv2dGeom& g, const double* x, Index n, Index gi, PadMode mode,
            MatRM& cols) {
  for (Index ho = 0; ho < g.Ho; ++ho)
    for (Index wo = 0; wo < g.Wo; ++wo) {
      Index row = ho * g.Wo + wo;
      Index col = 0;
      for (Index ci = 0; ci < g.Cin_g; ++ci) {
        const double* xc = x + ((n * g.Cin + gi * g.Cin_g + ci) * g.H * g.W);
        for (Index i = 0; i < g.kh; ++i)
          for (Index j = 0; j < g.kw; ++j, ++col) {
            Index s = src_index(g, ho, wo, i, j, mode);
            cols(row, col) = (s < 0) ? 0.0 : xc[s];
          }
      }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, Index stride, Index pad,
           Index groups, PadMode mode) {
  Conv2dGeom g;
  g.N = x.shape()[0];
  g.Cin = x.shape()[1];
  g.H = x.shape()[2];
  g.W = x.shape()[3];
  g.Cout = w.shape()[0];
  g.kh = w.shape()[2];
  g.kw = w.shape()[3];
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  g.Cin_g = g.Cin / groups;
  g.Cout_g = g.Cout / groups;
  require(w.shape()[1] == g.Cin_g, "conv2d: weight channel mismatch");
  require(b.numel() == g.Cout, "conv2d: bias size mismatch");
  g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
  g.K = g.Cin_g * g.kh * g.kw;

  Tensor out = Tensor::zeros({g.N, g.Cout, g.Ho, g.Wo});
  MatRM cols(g.Ho * g.Wo, g.K);
  for (Index n = 0; n < g.N; ++n)
    for (Index gi = 0; gi < g.groups; ++gi) {
      im2col(g, x.value().data.data(), n, gi, mode, cols);
      CMapRM Wg(w.value().data.data() + gi * g.Cout_g * g.K, g.Cout_g, g.K);
      MatRM Y = cols * Wg.transpose();  // (HoWo, Cout_g)
      for (Index co = 0; co < g.Cout_g; ++co) {
        double bias = b.value().data[gi * g.Cout_g + co];
        double* dst =
            out.data.data() + ((n * g.Cout + gi * g.Cout_g + co) * g.Ho * g.Wo);
        for (Index p = 0; p < g.Ho * g.Wo; ++p) dst[p] = Y(p, co) + bias;
      }
    }

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_result(std::move(out), {x, w, b}, [xn, wn, bn, g, mode](Node& nd) {
    MatRM cols(g.Ho * g.Wo, g.K);
    for (Index n = 0; n < g.N; ++n)
      for (Index gi = 0; gi < g.groups; ++gi) {
        // gather dY for this (n, group)
        MatRM dY(g.Ho * g.Wo, g.Cout_g);
        for (Index co = 0; co < g.Cout_g; ++co) {
          const double* src =
              nd.grad.data() + ((n * g.Cout + gi * g.Cout_g + co) * g.Ho * g.Wo);
          for (Index p = 0; p < g.Ho * g.Wo; ++p) dY(p, co) = src[p];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (Index co = 0; co < g.Cout_g; ++co)
            bn->grad[gi * g.Cout_g + co] += dY.col(co).sum();
        }
        if (wn->requires_grad || xn->requires_grad)
          im2col(g, xn->value.data.data(), n, gi, mode, cols);
        if (wn->requires_grad) {
          wn->ensure_grad();
          MapRM dW(wn->grad.data() + gi * g.Cout_g * g.K, g.Cout_g, g.K);
          dW += dY.transpose() * cols;
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          CMapRM Wg(wn->value.data.data() + gi * g.Cout_g * g.K, g.Cout_g, g.K);
          MatRM dCols = dY * Wg;  // (HoWo, K)
          for (Index ho = 0; ho < g.Ho; ++ho)
            for (Index wo = 0; wo < g.Wo; ++wo) {
              Index row = ho * g.Wo + wo;
              Index col = 0;
              for (Index ci = 0; ci < g.Cin_g; ++ci) {
                double* xg = xn->grad.data() +
                             ((n * g.Cin + gi * g.Cin_g + ci) * g.H * g.W);
                for (Index i = 0; i < g.kh; ++i)
                  for (Index j = 0; j < g.kw; ++j, ++col) {
                    Index s = src_index(g, ho, wo, i, j, mode);
                    if (s >= 0) xg[s] += dCols(row, col);
                  }
              }
            }
        }
      }
  });
}

Var conv1d(const Var& x, const Var& w, const Var& b, Index pad, PadMode mode) {
  Index N = x.shape()[0], Cin = x.shape()[1], L = x.shape()[2];
  Index Cout = w.shape()[0], k = w.shape()[2];
  require(w.shape()[1] == Cin, "conv1d: channel mismatch");
  require(b.numel() == Cout, "conv1d: bias size mismatch");
  Index Lo = L + 2 * pad - k + 1;
  Tensor out = Tensor::zeros({N, Cout, Lo});
  for (Index n = 0; n < N; ++n)
    for (Index co = 0; co < Cout; ++co)
      for (Index lo = 0; lo < Lo; ++lo) {
        double acc = b.value().data[co];
        for (Index ci = 0; ci < Cin; ++ci)
          for (Index i = 0; i < k; ++i) {
            Index l = lo - pad + i;
            if (mode == PadMode::Reflect)
              l = reflect_index(l, L);
            else if (l < 0 || l >= L)
              continue;
            acc += x.value().at3(n, ci, l) * w.value().data[(co * Cin + ci) * k + i];
          }
        out.at3(n, co, lo) = acc;
      }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_result(std::move(out), {x, w, b},
                     [xn, wn, bn, N, Cin, L, Cout, k, pad, Lo, mode](Node& nd) {
                       if (xn->requires_grad) xn->ensure_grad();
                       if (wn->requires_grad) wn->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       for (Index n = 0; n < N; ++n)
                         for (Index co = 0; co < Cout; ++co)
                           for (Index lo = 0; lo < Lo; ++lo) {
                             double gy = nd.grad[(n * Cout + co) * Lo + lo];
                             if (bn->requires_grad) bn->grad[co] += gy;
                             for (Index ci = 0; ci < Cin; ++ci)
                               for (Index i = 0; i < k; ++i) {
                                 Index l = lo - pad + i;
                                 if (mode == PadMode::Reflect)
                                   l = reflect_index(l, L);
                                 else if (l < 0 || l >= L)
                                   continue;
                                 if (wn->requires_grad)
                                   wn->grad[(co * Cin + ci) * k + i] +=
                                       gy * xn->value.at3(n, ci, l);
                                 if (xn->requires_grad)
                                   xn->grad[(n * Cin + ci) * L + l] +=
                                       gy * wn->value.data[(co * Cin + ci) * k + i];
                               }
                           }
                     });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Index N = x.shape()[0], C = x.shape()[1], inner = inner_size(x.shape(), 2);
  require(gamma.numel() == C && beta.numel() == C, "layer_norm: affine size mismatch");
  Tensor out = Tensor::zeros(x.shape());
  Array mu = Array::Zero(N * inner), rstd = Array::Zero(N * inner);
  for (Index n = 0; n < N; ++n)
    for (Index i = 0; i < inner; ++i) {
      double m = 0, v = 0;
      for (Index c = 0; c < C; ++c) m += x.value().data[(n * C + c) * inner + i];
      m /= static_cast<double>(C);
      for (Index c = 0; c < C; ++c) {
        double d = x.value().data[(n * C + c) * inner + i] - m;
        v += d * d;
      }
      v /= static_cast<double>(C);
      double rs = 1.0 / std::sqrt(v + eps);
      mu[n * inner + i] = m;
      rstd[n * inner + i] = rs;
      for (Index c = 0; c < C; ++c)
        out.data[(n * C + c) * inner + i] =
            gamma.value().data[c] * (x.value().data[(n * C + c) * inner + i] - m) * rs +
            beta.value().data[c];
    }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(
      std::move(out), {x, gamma, beta}, [xn, gn, bn, N, C, inner, mu, rstd](Node& nd) {
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        double invC = 1.0 / static_cast<double>(C);
        for (Index n = 0; n < N; ++n)
          for (Index i = 0; i < inner; ++i) {
            double m = mu[n * inner + i], rs = rstd[n * inner + i];
            double sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (Index c = 0; c < C; ++c) {
              double xhat = (xn->value.data[(n * C + c) * inner + i] - m) * rs;
              double gy = nd.grad[(n * C + c) * inner + i];
              double dxhat = gy * gn->value.data[c];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
              if (gn->requires_grad) gn->grad[c] += gy * xhat;
              if (bn->requires_grad) bn->grad[c] += gy;
            }
            if (xn->requires_grad)
              for (Index c = 0; c < C; ++c) {
                double xhat = (xn->value.data[(n * C + c) * inner + i] - m) * rs;
                double dxhat = nd.grad[(n * C + c) * inner + i] * gn->value.data[c];
                xn->grad[(n * C + c) * inner + i] +=
                    rs * (dxhat - invC * sum_dxhat - invC * xhat * sum_dxhat_xhat);
              }
          }
      });
}

Var avg_pool2d(const Var& x, Index k) {
  Index N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  require(H % k == 0 && W % k == 0, "avg_pool2d: dims not divisible by kernel");
  Index Ho = H / k, Wo = W / k;
  double inv = 1.0 / static_cast<double>(k * k);
  Tensor out = Tensor::zeros({N, C, Ho, Wo});
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index ho = 0; ho < Ho; ++ho)
        for (Index wo = 0; wo < Wo; ++wo) {
          double acc = 0;
          for (Index i = 0; i < k; ++i)
            for (Index j = 0; j < k; ++j)
              acc += x.value().at4(n, c, ho * k + i, wo * k + j);
          out.at4(n, c, ho, wo) = acc * inv;
        }
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, N, C, H, W, Ho, Wo, k, inv](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c)
        for (Index ho = 0; ho < Ho; ++ho)
          for (Index wo = 0; wo < Wo; ++wo) {
            double g = nd.grad[((n * C + c) * Ho + ho) * Wo + wo] * inv;
            for (Index i = 0; i < k; ++i)
              for (Index j = 0; j < k; ++j)
                xn->grad[((n * C + c) * H + ho * k + i) * W + wo * k + j] += g;
          }
  });
}

Var upsample_nearest2d(const Var& x, Index f) {
  Index N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  Index Ho = H * f, Wo = W * f;
  Tensor out = Tensor::zeros({N, C, Ho, Wo});
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index ho = 0; ho < Ho; ++ho)
        for (Index wo = 0; wo < Wo; ++wo)
          out.at4(n, c, ho, wo) = x.value().at4(n, c, ho / f, wo / f);
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, N, C, H, W, Ho, Wo, f](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c)
        for (Index ho = 0; ho < Ho; ++ho)
          for (Index wo = 0; wo < Wo; ++wo)
            xn->grad[((n * C + c) * H + ho / f) * W + wo / f] +=
                nd.grad[((n * C + c) * Ho + ho) * Wo + wo];
  });
}

Var global_avg_pool(const Var& x) {
  Index N = x.shape()[0], C = x.shape()[1], inner = inner_size(x.shape(), 2);
  double inv = 1.0 / static_cast<double>(inner);
  Tensor out = Tensor::zeros({N, C});
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      out.data[n * C + c] = x.value().data.segment((n * C + c) * inner, inner).sum() * inv;
  auto xn = x.node();
  return make_result(std::move(out), {x}, [xn, N, C, inner, inv](Node& nd) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c)
        xn->grad.segment((n * C + c) * inner, inner) +=
            Array::Constant(inner, nd.grad[n * C + c] * inv);
  });
}

Var bilinear_sample(const Var& img, const Var& coords) {
  Index N = img.shape()[0], C = img.shape()[1], H = img.shape()[2], W = img.shape()[3];
  require(coords.shape()[0] == N && coords.shape()[1] == 2,
          "bilinear_sample: coords must be (N,2,Ho,Wo)");
  Index Ho = coords.shape()[2], Wo = coords.shape()[3];
  Tensor out = Tensor::zeros({N, C, Ho, Wo});
  const Tensor& I = img.value();
  const Tensor& Q = coords.value();
  for (Index n = 0; n < N; ++n)
    for (Index p = 0; p < Ho * Wo; ++p) {
      double cx = Q.data[(n * 2 + 0) * Ho * Wo + p];
      double cy = Q.data[(n * 2 + 1) * Ho * Wo + p];
      double cxc = std::min(std::max(cx, 0.0), static_cast<double>(W - 1));
      double cyc = std::min(std::max(cy, 0.0), static_cast<double>(H - 1));
      Index x0 = static_cast<Index>(std::floor(cxc));
      Index y0 = static_cast<Index>(std::floor(cyc));
      Index x1 = std::min(x0 + 1, W - 1);
      Index y1 = std::min(y0 + 1, H - 1);
      double wx = cxc - static_cast<double>(x0);
      double wy = cyc - static_cast<double>(y0);
      for (Index c = 0; c < C; ++c) {
        const double* ic = I.data.data() + (n * C + c) * H * W;
        double v = (1 - wy) * ((1 - wx) * ic[y0 * W + x0] + wx * ic[y0 * W + x1]) +
                   wy * ((1 - wx) * ic[y1 * W + x0] + wx * ic[y1 * W + x1]);
        out.data[((n * C + c) * Ho + 0) * Wo + p] = v;  // p already spans Ho*Wo
      }
    }
  auto in = img.node(), qn = coords.node();
  return make_result(std::move(out), {img, coords}, [in, qn, N, C, H, W, Ho, Wo](Node& nd) {
    if (in->requires_grad) in->ensure_grad();
    if (qn->requires_grad) qn->ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index p = 0; p < Ho * Wo; ++p) {
        double cx = qn->value.data[(n * 2 + 0) * Ho * Wo + p];
        double cy = qn->value.data[(n * 2 + 1) * Ho * Wo + p];
        bool in_x = (cx > 0.0 && cx < static_cast<double>(W - 1));
        bool in_y = (cy > 0.0 && cy < static_cast<double>(H - 1));
        double cxc = std::min(std::max(cx, 0.0), static_cast<double>(W - 1));
        double cyc = std::min(std::max(cy, 0.0), static_cast<double>(H - 1));
        Index x0 = static_cast<Index>(std::floor(cxc));
        Index y0 = static_cast<Index>(std::floor(cyc));
        Index x1 = std::min(x0 + 1, W - 1);
        Index y1 = std::min(y0 + 1, H - 1);
        double wx = cxc - static_cast<double>(x0);
        double wy = cyc - static_cast<double>(y0);
        double gx = 0, gy = 0;
        for (Index c = 0; c < C; ++c) {
          double g = nd.grad[(n * C + c) * Ho * Wo + p];
          const double* ic = in->value.data.data() + (n * C + c) * H * W;
          if (in->requires_grad) {
            double* gi = in->grad.data() + (n * C + c) * H * W;
            gi[y0 * W + x0] += g * (1 - wy) * (1 - wx);
            gi[y0 * W + x1] += g * (1 - wy) * wx;
            gi[y1 * W + x0] += g * wy * (1 - wx);
            gi[y1 * W + x1] += g * wy * wx;
          }
          gx += g * ((1 - wy) * (ic[y0 * W + x1] - ic[y0 * W + x0]) +
                     wy * (ic[y1 * W + x1] - ic[y1 * W + x0]));
          gy += g * ((1 - wx) * (ic[y1 * W + x0] - ic[y0 * W + x0]) +
                     wx * (ic[y1 * W + x1] - ic[y0 * W + x1]));
        }
        if (qn->requires_grad) {
          if (in_x) qn->grad[(n * 2 + 0) * Ho * Wo + p] += gx;
          if (in_y) qn->grad[(n * 2 + 1) * Ho * Wo + p] += gy;
        }
      }
  });
}

}  // namespace umad::ad
