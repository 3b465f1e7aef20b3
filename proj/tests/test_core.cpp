#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "umad/core/nn.hpp"

using namespace umad;
using namespace umad::ad;
using umad::test::gradcheck;
using umad::test::random_tensor;

TEST_CASE("elementwise values") {
  Var a(random_tensor({4}, 1));
  Var b(random_tensor({4}, 2));
  Var c = add(mul(a, b), sub(a, b));
  for (Index i = 0; i < 4; ++i)
    CHECK(c.value()[i] ==
          doctest::Approx(a.value()[i] * b.value()[i] + a.value()[i] - b.value()[i]));
  CHECK(sigmoid(Var(Tensor::scalar(0.0))).scalar() == doctest::Approx(0.5));
  CHECK(silu(Var(Tensor::scalar(0.0))).scalar() == doctest::Approx(0.0));
  CHECK(softplus(Var(Tensor::scalar(100.0))).scalar() == doctest::Approx(100.0));
}

TEST_CASE("unary and binary gradients") {
  Var x(random_tensor({3, 5}, 3, 0.2, 1.5), true);
  Var y(random_tensor({3, 5}, 4, 0.2, 1.5), true);
  auto loss = [&] {
    return mean(mul(silu(x), add(sigmoid(y), sqrt_(mul(x, y)))));
  };
  CHECK(gradcheck(loss, x).max_rel_err < 1e-6);
  CHECK(gradcheck(loss, y).max_rel_err < 1e-6);
}

TEST_CASE("softplus tanh exp gradients") {
  Var x(random_tensor({7}, 5), true);
  auto loss = [&] { return sum(mul(softplus(x), tanh_(exp_(muls(x, 0.3))))); };
  CHECK(gradcheck(loss, x).max_rel_err < 1e-6);
}

TEST_CASE("concat and slice round structure") {
  Var a(random_tensor({2, 3, 2}, 6), true);
  Var b(random_tensor({2, 2, 2}, 7), true);
  Var c = concat({a, b}, 1);
  CHECK(c.shape() == Shape{2, 5, 2});
  Var a2 = slice(c, 1, 0, 3);
  for (Index i = 0; i < a.numel(); ++i) CHECK(a2.value()[i] == a.value()[i]);
  auto loss = [&] { return mean(square(concat({a, b}, 1))); };
  CHECK(gradcheck(loss, a).max_rel_err < 1e-6);
  CHECK(gradcheck(loss, b).max_rel_err < 1e-6);
  auto loss2 = [&] { return mean(square(slice(a, 2, 1, 1))); };
  CHECK(gradcheck(loss2, a).max_rel_err < 1e-6);
}

TEST_CASE("channel helpers") {
  Var x(random_tensor({2, 3, 4}, 8), true);
  Var s(random_tensor({3}, 9), true);
  auto l1 = [&] { return mean(square(scale_channels(x, s))); };
  CHECK(gradcheck(l1, x).max_rel_err < 1e-6);
  CHECK(gradcheck(l1, s).max_rel_err < 1e-6);
  auto l2 = [&] { return mean(square(add_channels(x, s))); };
  CHECK(gradcheck(l2, x).max_rel_err < 1e-6);
  CHECK(gradcheck(l2, s).max_rel_err < 1e-6);

  Var y = repeat_channels_interleaved(x, 2);
  CHECK(y.shape() == Shape{2, 6, 4});
  CHECK(y.value().at3(0, 0, 1) == x.value().at3(0, 0, 1));
  CHECK(y.value().at3(0, 1, 1) == x.value().at3(0, 0, 1));
  auto l3 = [&] { return mean(square(repeat_channels_interleaved(x, 3))); };
  CHECK(gradcheck(l3, x).max_rel_err < 1e-6);

  Var t = tile_channels(x, 2);
  CHECK(t.shape() == Shape{2, 6, 4});
  CHECK(t.value().at3(0, 3, 2) == x.value().at3(0, 0, 2));
  auto l4 = [&] { return mean(square(tile_channels(x, 2))); };
  CHECK(gradcheck(l4, x).max_rel_err < 1e-6);

  Var g = sum_channel_groups(y, 2);
  CHECK(g.shape() == x.shape());
  for (Index i = 0; i < x.numel(); ++i)
    CHECK(g.value()[i] == doctest::Approx(2 * x.value()[i]));
  auto l5 = [&] { return mean(square(sum_channel_groups(x, 3))); };
  CHECK(gradcheck(l5, x).max_rel_err < 1e-6);

  Var v(random_tensor({2, 3}, 10), true);
  Var bh = broadcast_hw(v, 2, 5);
  CHECK(bh.shape() == Shape{2, 3, 2, 5});
  auto l6 = [&] { return mean(square(broadcast_hw(v, 2, 5))); };
  CHECK(gradcheck(l6, v).max_rel_err < 1e-6);
  auto l7 = [&] { return mean(square(add_rowbc(x, reshape(mul(v, v), {6})))); };
  // add_rowbc expects v flat (N*C); x is (2,3,4)
  CHECK(gradcheck(l7, x).max_rel_err < 1e-6);
  CHECK(gradcheck(l7, v).max_rel_err < 1e-6);
}

TEST_CASE("matmul and linear") {
  Var a(random_tensor({3, 4}, 11), true);
  Var b(random_tensor({5, 4}, 12), true);
  Var y = matmul_nt(a, b);
  CHECK(y.shape() == Shape{3, 5});
  double manual = 0;
  for (Index k = 0; k < 4; ++k) manual += a.value()[0 * 4 + k] * b.value()[2 * 4 + k];
  CHECK(y.value()[0 * 5 + 2] == doctest::Approx(manual));
  auto loss = [&] { return mean(square(matmul_nt(a, b))); };
  CHECK(gradcheck(loss, a).max_rel_err < 1e-6);
  CHECK(gradcheck(loss, b).max_rel_err < 1e-6);

  Var bias(random_tensor({5}, 13), true);
  auto loss2 = [&] { return mean(square(linear(a, b, bias))); };
  CHECK(gradcheck(loss2, a).max_rel_err < 1e-6);
  CHECK(gradcheck(loss2, b).max_rel_err < 1e-6);
  CHECK(gradcheck(loss2, bias).max_rel_err < 1e-6);
}

TEST_CASE("conv2d matches direct computation and gradients") {
  Var x(random_tensor({2, 3, 5, 6}, 14), true);
  Var w(random_tensor({4, 3, 3, 3}, 15), true);
  Var b(random_tensor({4}, 16), true);
  Var y = conv2d(x, w, b, 1, 1);
  CHECK(y.shape() == Shape{2, 4, 5, 6});
  // direct check at one output element
  double acc = b.value()[1];
  for (Index ci = 0; ci < 3; ++ci)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) {
        Index h = 2 - 1 + i, wv = 3 - 1 + j;
        acc += x.value().at4(1, ci, h, wv) * w.value().data[((1 * 3 + ci) * 3 + i) * 3 + j];
      }
  CHECK(y.value().at4(1, 1, 2, 3) == doctest::Approx(acc));

  auto loss = [&] { return mean(square(conv2d(x, w, b, 1, 1))); };
  CHECK(gradcheck(loss, x).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, w).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, b).max_rel_err < 1e-5);

  auto loss_s2 = [&] { return mean(square(conv2d(x, w, b, 2, 1))); };
  CHECK(gradcheck(loss_s2, x).max_rel_err < 1e-5);
  CHECK(gradcheck(loss_s2, w).max_rel_err < 1e-5);

  auto loss_refl = [&] {
    return mean(square(conv2d(x, w, b, 1, 1, 1, PadMode::Reflect)));
  };
  CHECK(gradcheck(loss_refl, x).max_rel_err < 1e-5);
  CHECK(gradcheck(loss_refl, w).max_rel_err < 1e-5);
}

TEST_CASE("depthwise (grouped) conv2d gradients") {
  Var x(random_tensor({1, 4, 5, 5}, 17), true);
  Var w(random_tensor({4, 1, 3, 3}, 18), true);
  Var b(random_tensor({4}, 19), true);
  auto loss = [&] { return mean(square(conv2d(x, w, b, 1, 1, 4))); };
  CHECK(gradcheck(loss, x).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, w).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, b).max_rel_err < 1e-5);
}

TEST_CASE("conv1d gradients") {
  Var x(random_tensor({2, 3, 7}, 20), true);
  Var w(random_tensor({5, 3, 3}, 21), true);
  Var b(random_tensor({5}, 22), true);
  Var y = conv1d(x, w, b, 1);
  CHECK(y.shape() == Shape{2, 5, 7});
  auto loss = [&] { return mean(square(conv1d(x, w, b, 1))); };
  CHECK(gradcheck(loss, x).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, w).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, b).max_rel_err < 1e-5);
}

TEST_CASE("layer norm normalizes and differentiates") {
  Var x(random_tensor({2, 6, 3}, 23), true);
  Var g(Tensor::full({6}, 1.0), true);
  Var be(Tensor::zeros({6}), true);
  Var y = layer_norm_channels(x, g, be);
  // per-position mean ~0, var ~1
  double m = 0;
  for (Index c = 0; c < 6; ++c) m += y.value().at3(0, c, 1);
  CHECK(std::abs(m / 6) < 1e-9);
  auto loss = [&] { return mean(mul(layer_norm_channels(x, g, be), x)); };
  CHECK(gradcheck(loss, x, 1e-6).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, g).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, be).max_rel_err < 1e-5);
}

TEST_CASE("pooling and upsampling") {
  Var x(random_tensor({1, 2, 4, 4}, 24), true);
  Var p = avg_pool2d(x, 2);
  CHECK(p.shape() == Shape{1, 2, 2, 2});
  double m = (x.value().at4(0, 0, 0, 0) + x.value().at4(0, 0, 0, 1) +
              x.value().at4(0, 0, 1, 0) + x.value().at4(0, 0, 1, 1)) /
             4.0;
  CHECK(p.value().at4(0, 0, 0, 0) == doctest::Approx(m));
  auto l1 = [&] { return mean(square(avg_pool2d(x, 2))); };
  CHECK(gradcheck(l1, x).max_rel_err < 1e-6);

  Var u = upsample_nearest2d(x, 2);
  CHECK(u.shape() == Shape{1, 2, 8, 8});
  CHECK(u.value().at4(0, 1, 5, 5) == x.value().at4(0, 1, 2, 2));
  auto l2 = [&] { return mean(square(upsample_nearest2d(x, 3))); };
  CHECK(gradcheck(l2, x).max_rel_err < 1e-6);

  Var gp = global_avg_pool(x);
  CHECK(gp.shape() == Shape{1, 2});
  auto l3 = [&] { return mean(square(global_avg_pool(x))); };
  CHECK(gradcheck(l3, x).max_rel_err < 1e-6);
}

TEST_CASE("bilinear sample identity and gradients") {
  Var img(random_tensor({1, 2, 5, 5}, 25), true);
  // identity grid
  Tensor grid = Tensor::zeros({1, 2, 5, 5});
  for (Index y = 0; y < 5; ++y)
    for (Index x = 0; x < 5; ++x) {
      grid.at4(0, 0, y, x) = static_cast<double>(x);
      grid.at4(0, 1, y, x) = static_cast<double>(y);
    }
  Var coords(grid, true);
  Var out = bilinear_sample(img, coords);
  for (Index i = 0; i < img.numel(); ++i)
    CHECK(out.value()[i] == doctest::Approx(img.value()[i]));

  // offset grid away from integer points for coordinate gradients
  Tensor g2 = grid;
  for (Index i = 0; i < g2.numel(); ++i) g2.data[i] = g2.data[i] * 0.8 + 0.37;
  Var coords2(g2, true);
  auto loss = [&] { return mean(square(bilinear_sample(img, coords2))); };
  CHECK(gradcheck(loss, img).max_rel_err < 1e-5);
  CHECK(gradcheck(loss, coords2, 1e-6).max_rel_err < 1e-4);
}

TEST_CASE("backward through shared subexpressions accumulates") {
  Var x(Tensor::scalar(3.0), true);
  Var y = mul(x, x);  // x^2
  Var z = add(y, y);  // 2 x^2, dz/dx = 4x = 12
  backward(sum(z));
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("param store determinism and float32 representability") {
  nn::ParamStore a(42), b(42);
  Var wa = a.create("w", {16}, 0.5);
  Var wb = b.create("w", {16}, 0.5);
  for (Index i = 0; i < 16; ++i) {
    CHECK(wa.value()[i] == wb.value()[i]);
    CHECK(static_cast<double>(static_cast<float>(wa.value()[i])) == wa.value()[i]);
  }
}
