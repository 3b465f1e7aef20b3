#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "umad/context/context.hpp"
#include "umad/data/synth.hpp"

#include <limits>

using namespace umad;
using namespace umad::ad;
using namespace umad::context;
using umad::test::gradcheck;
using umad::test::random_tensor;

TEST_CASE("glu matches its definition elementwise") {
  Var x(random_tensor({2, 6, 5}, 51));
  Var y = glu_channels(x);
  CHECK(y.shape() == Shape{2, 3, 5});
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index l = 0; l < 5; ++l) {
        double a = x.value().at3(n, c, l);
        double b = x.value().at3(n, c + 3, l);
        double expect = a / (1.0 + std::exp(-b));
        CHECK(y.value().at3(n, c, l) == doctest::Approx(expect).epsilon(1e-7));
      }

  // zero gate -> half of the first half
  Tensor h = Tensor::zeros({1, 4, 3});
  h.data.segment(0, 6) = random_tensor({1, 2, 3}, 52).data;
  Var yh = glu_channels(Var(h));
  for (Index i = 0; i < 6; ++i)
    CHECK(yh.value()[i] == doctest::Approx(h.data[i] / 2).epsilon(1e-12));
}

TEST_CASE("tsc_block preserves shape across a small dimension sweep") {
  nn::ParamStore ps(53);
  TscBlock blk(ps, "tsc", 4);
  for (Index d : {1, 3, 7})
    for (Index h : {1, 5})
      for (Index w : {1, 6}) {
        Var x(random_tensor({1, 4, d, h, w}, 54 + d + h + w));
        Var y = blk(x);
        CHECK(y.shape() == x.shape());
        CHECK(y.value().data.isFinite().all());
      }
}

TEST_CASE("tsc_block is cheaper than half of a full 3d convolution") {
  Index c = 16;
  Index full3d = c * c * 27 + c;  // k=3 cube with bias
  CHECK(TscBlock::param_count(c) * 2 < full3d);

  nn::ParamStore ps(55);
  TscBlock blk(ps, "tsc", c);
  CHECK(ps.total_params() == TscBlock::param_count(c));
}

TEST_CASE("tsc_block gradients match finite differences") {
  nn::ParamStore ps(56);
  TscBlock blk(ps, "tsc", 3);
  Var x(random_tensor({1, 3, 3, 4, 4}, 57), true);
  Var probe(random_tensor({1, 3, 3, 4, 4}, 58));
  auto loss = [&] { return mean(mul(blk(x), probe)); };
  CHECK(gradcheck(loss, x, 1e-5, 32).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("tsc.temporal.w"), 1e-5, 32).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("tsc.depthwise.w"), 1e-5, 32).max_rel_err < 1e-4);
}

TEST_CASE("gcm shape contract and determinism") {
  nn::ParamStore ps(59);
  ContextEncoder enc(ps, "ctx");
  Tensor frame = random_tensor({3, 64, 64}, 60, 0, 1);
  auto f = enc.gcm(frame, 4);
  CHECK(f.source == ContextSource::Global);
  CHECK(f.values.shape() == Shape{1, 8, 16, 16});
  auto f2 = enc.gcm(frame, 4);
  CHECK((f.values.value().data == f2.values.value().data).all());
}

TEST_CASE("gcm of a constant frame is spatially constant") {
  nn::ParamStore ps(61);
  ContextEncoder enc(ps, "ctx");
  Tensor frame = Tensor::full({3, 32, 32}, 0.4);
  auto f = enc.gcm(frame, 4);
  Index hw = 8 * 8;
  for (Index c = 0; c < 8; ++c) {
    auto seg = f.values.value().data.segment(c * hw, hw);
    CHECK(seg.maxCoeff() - seg.minCoeff() < 1e-6);
  }
}

TEST_CASE("ptcm of identical post frames equals the single-frame encoding") {
  nn::ParamStore ps(62);
  ContextEncoder enc(ps, "ctx");
  Tensor frame = random_tensor({3, 32, 32}, 63, 0, 1);
  auto one = enc.ptcm({frame});
  auto two = enc.ptcm({frame, frame});
  CHECK(one.source == ContextSource::PostTemporal);
  CHECK(one.values.shape() == Shape{1, 8, 8, 8});
  CHECK((one.values.value().data - two.values.value().data).abs().maxCoeff() < 1e-9);
}

TEST_CASE("ptcm rejects an empty window and never reads earlier frames") {
  nn::ParamStore ps(64);
  ContextEncoder enc(ps, "ctx");
  CHECK_THROWS_AS(enc.ptcm({}), std::invalid_argument);

  // poison everything before the target; only the post window is handed over
  double nan = std::numeric_limits<double>::quiet_NaN();
  auto seq = data::generate_synthetic_sequence(65, 5, 32, 32, data::MotionSpec{},
                                               data::TextureKind::Checker);
  for (Index t = 0; t < 3; ++t) seq.clean.frames[t].data.setConstant(nan);
  auto f = enc.ptcm({seq.clean.frames[3], seq.clean.frames[4]});
  CHECK(f.values.value().data.isFinite().all());
}

TEST_CASE("context features are differentiable back to the encoder parameters") {
  nn::ParamStore ps(66);
  ContextEncoder enc(ps, "ctx");
  Tensor frame = random_tensor({3, 16, 16}, 67, 0, 1);
  Var probe(random_tensor({1, 8, 4, 4}, 68));
  auto loss = [&] { return mean(mul(enc.ptcm({frame}).values, probe)); };
  CHECK(gradcheck(loss, ps.at("ctx.p_stem.w"), 1e-5, 24).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("ctx.p_b1.temporal.w"), 1e-5, 24).max_rel_err < 1e-4);
}
