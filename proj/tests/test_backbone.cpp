#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "umad/backbone/backbone.hpp"
#include "umad/flow/flow.hpp"

#include <cmath>

using namespace umad;
using namespace umad::ad;
using namespace umad::backbone;
using umad::test::gradcheck;
using umad::test::random_tensor;

namespace {

double softplus_d(double x) { return std::log1p(std::exp(x)); }
double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu_d(double x) { return x * sigmoid_d(x); }

// explicit per-step recurrence with the layer's own parameters, batch row m
std::vector<double> naive_scan(nn::ParamStore& ps, const std::string& p, Index C,
                               Index N, const Tensor& x, Index m) {
  const Array& alog = ps.at(p + ".a_log").value().data;
  const Array& dsk = ps.at(p + ".d_skip").value().data;
  const Array& wdt = ps.at(p + ".dt.w").value().data;
  const Array& bdt = ps.at(p + ".dt.b").value().data;
  const Array& wb = ps.at(p + ".b.w").value().data;
  const Array& bb = ps.at(p + ".b.b").value().data;
  const Array& wc = ps.at(p + ".c.w").value().data;
  const Array& bc = ps.at(p + ".c.b").value().data;
  Index L = x.shape[2];
  std::vector<double> h(static_cast<size_t>(C * N), 0.0);
  std::vector<double> y;
  for (Index k = 0; k < L; ++k) {
    std::vector<double> xk(static_cast<size_t>(C));
    for (Index c = 0; c < C; ++c) xk[c] = x.data[(m * C + c) * L + k];
    std::vector<double> dt(static_cast<size_t>(C)), B(static_cast<size_t>(N)),
        Cc(static_cast<size_t>(N));
    for (Index c = 0; c < C; ++c) {
      double acc = bdt[c];
      for (Index i = 0; i < C; ++i) acc += wdt[c * C + i] * xk[i];
      dt[c] = softplus_d(acc);
    }
    for (Index n = 0; n < N; ++n) {
      double ab = bb[n], ac = bc[n];
      for (Index i = 0; i < C; ++i) {
        ab += wb[n * C + i] * xk[i];
        ac += wc[n * C + i] * xk[i];
      }
      B[n] = ab;
      Cc[n] = ac;
    }
    for (Index c = 0; c < C; ++c) {
      double yk = dsk[c] * xk[c];
      for (Index n = 0; n < N; ++n) {
        double a = -std::exp(alog[c * N + n]);
        h[c * N + n] = std::exp(dt[c] * a) * h[c * N + n] + dt[c] * B[n] * xk[c];
        yk += Cc[n] * h[c * N + n];
      }
      y.push_back(yk);
    }
  }
  return y;
}

}  // namespace

TEST_CASE("ssm_scan maps zero input to zero output") {
  nn::ParamStore ps(71);
  SsmLayer ssm(ps, "ssm", 4, 4);
  Var y = ssm.scan(Var(Tensor::zeros({2, 4, 5})));
  CHECK(y.shape() == Shape{2, 4, 5});
  CHECK(y.value().data.abs().maxCoeff() == 0.0);
}

TEST_CASE("ssm_scan matches the naive recurrence") {
  nn::ParamStore ps(72);
  Index C = 3, N = 4;
  SsmLayer ssm(ps, "ssm", C, N);

  // L = 1 closed form
  Tensor x1 = random_tensor({2, C, 1}, 73);
  Var y1 = ssm.scan(Var(x1));
  for (Index m = 0; m < 2; ++m) {
    auto ref = naive_scan(ps, "ssm", C, N, x1, m);
    for (Index c = 0; c < C; ++c)
      CHECK(y1.value().at3(m, c, 0) == doctest::Approx(ref[c]).epsilon(1e-10));
  }

  // longer sequences, random trials
  for (Index L : {9, 16}) {
    Tensor x = random_tensor({2, C, L}, 74 + L);
    Var y = ssm.scan(Var(x));
    for (Index m = 0; m < 2; ++m) {
      auto ref = naive_scan(ps, "ssm", C, N, x, m);
      for (Index k = 0; k < L; ++k)
        for (Index c = 0; c < C; ++c)
          CHECK(std::abs(y.value().at3(m, c, k) - ref[k * C + c]) < 1e-6);
    }
  }
}

TEST_CASE("ssm_scan gradients match finite differences") {
  nn::ParamStore ps(75);
  SsmLayer ssm(ps, "ssm", 3, 2);
  Var x(random_tensor({1, 3, 5}, 76), true);
  Var probe(random_tensor({1, 3, 5}, 77));
  auto loss = [&] { return mean(mul(ssm.scan(x), probe)); };
  CHECK(gradcheck(loss, x).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("ssm.a_log")).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("ssm.dt.w")).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("ssm.b.w")).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("ssm.c.w")).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("ssm.d_skip")).max_rel_err < 1e-4);
}

TEST_CASE("glam saturated gates reduce to the identity") {
  nn::ParamStore ps(78);
  Glam g(ps, "glam", 4);
  ps.at("glam.ch2.w").value().data.setZero();
  ps.at("glam.ch2.b").value().data.setConstant(40.0);
  ps.at("glam.spatial.w").value().data.setZero();
  ps.at("glam.spatial.b").value().data.setConstant(40.0);
  Var x(random_tensor({2, 4, 5, 5}, 79));
  Var y = g(x);
  CHECK((y.value().data - x.value().data).abs().maxCoeff() < 1e-9);
}

TEST_CASE("glam never amplifies: |out| <= |in| elementwise") {
  nn::ParamStore ps(80);
  Glam g(ps, "glam", 6);
  Var x(random_tensor({1, 6, 7, 7}, 81));
  Var y = g(x);
  for (Index i = 0; i < x.numel(); ++i)
    CHECK(std::abs(y.value()[i]) <= std::abs(x.value()[i]) + 1e-12);
}

TEST_CASE("glam gradients match finite differences") {
  nn::ParamStore ps(82);
  Glam g(ps, "glam", 3);
  Var x(random_tensor({1, 3, 4, 4}, 83), true);
  Var probe(random_tensor({1, 3, 4, 4}, 84));
  auto loss = [&] { return mean(mul(g(x), probe)); };
  CHECK(gradcheck(loss, x, 1e-5, 32).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("glam.ch1.w"), 1e-5, 32).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("glam.spatial.w"), 1e-5, 32).max_rel_err < 1e-4);
}

TEST_CASE("mamba_block preserves shape and is differentiable") {
  nn::ParamStore ps(85);
  MambaBlock blk(ps, "blk", 6);
  Var x(random_tensor({1, 6, 3, 4, 4}, 86), true);
  Var y = blk(x);
  CHECK(y.shape() == x.shape());
  CHECK(y.value().data.isFinite().all());

  Var probe(random_tensor({1, 6, 3, 4, 4}, 87));
  auto loss = [&] { return mean(mul(blk(x), probe)); };
  CHECK(gradcheck(loss, x, 1e-5, 24).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("blk.conv2.w"), 1e-5, 24).max_rel_err < 1e-4);
  CHECK(gradcheck(loss, ps.at("blk.ssm.dt.w"), 1e-5, 24).max_rel_err < 1e-4);
}

TEST_CASE("mamba_block matches a hand recurrence at controlled init") {
  Index C = 2, N = 4, D = 3;
  nn::ParamStore ps(88);
  MambaBlock blk(ps, "blk", C, N);
  // neutralize branch 2's spatial pieces: in2/conv2/out identity, GLAM gates 1
  auto set_identity = [&](const std::string& name, Index k) {
    Array& w = ps.at(name).value().data;
    w.setZero();
    for (Index c = 0; c < C; ++c) w[(c * C + c) * k * k + (k * k) / 2] = 1.0;
  };
  set_identity("blk.in2.w", 1);
  set_identity("blk.conv2.w", 3);
  set_identity("blk.out.w", 1);
  ps.at("blk.in2.b").value().data.setZero();
  ps.at("blk.conv2.b").value().data.setZero();
  ps.at("blk.out.b").value().data.setZero();
  ps.at("blk.glam.ch2.w").value().data.setZero();
  ps.at("blk.glam.ch2.b").value().data.setConstant(40.0);
  ps.at("blk.glam.spatial.w").value().data.setZero();
  ps.at("blk.glam.spatial.b").value().data.setConstant(40.0);

  Tensor x = random_tensor({1, C, D, 1, 1}, 89);
  Var y = blk(Var(x));

  // hand path: LN over channels per position, branch1 = scan(silu(in1 @ ln)),
  // branch2 = silu(ln), output = x + branch1 * branch2
  const Array& gam = ps.at("blk.norm.gamma").value().data;
  const Array& bet = ps.at("blk.norm.beta").value().data;
  const Array& w1 = ps.at("blk.in1.w").value().data;
  const Array& b1 = ps.at("blk.in1.b").value().data;
  Tensor ln = Tensor::zeros({1, C, D});
  for (Index d = 0; d < D; ++d) {
    double m = 0, v = 0;
    for (Index c = 0; c < C; ++c) m += x.data[c * D + d];
    m /= C;
    for (Index c = 0; c < C; ++c) {
      double dd = x.data[c * D + d] - m;
      v += dd * dd;
    }
    v /= C;
    double rs = 1.0 / std::sqrt(v + 1e-6);
    for (Index c = 0; c < C; ++c)
      ln.data[c * D + d] = gam[c] * (x.data[c * D + d] - m) * rs + bet[c];
  }
  Tensor br1_in = Tensor::zeros({1, C, D});
  for (Index d = 0; d < D; ++d)
    for (Index c = 0; c < C; ++c) {
      double acc = b1[c];
      for (Index i = 0; i < C; ++i) acc += w1[c * C + i] * ln.data[i * D + d];
      br1_in.data[c * D + d] = silu_d(acc);
    }
  auto br1 = naive_scan(ps, "blk.ssm", C, N, br1_in, 0);
  for (Index d = 0; d < D; ++d)
    for (Index c = 0; c < C; ++c) {
      double expect =
          x.data[c * D + d] + br1[d * C + c] * silu_d(ln.data[c * D + d]);
      CHECK(y.value().data[c * D + d] == doctest::Approx(expect).epsilon(1e-7));
    }
}

TEST_CASE("denoiser output matches input shape in every injection mode") {
  for (auto mode : {InjectionMode::None, InjectionMode::Late, InjectionMode::Early}) {
    nn::ParamStore ps(90);
    DenoiserConfig cfg;
    cfg.injection = mode;
    Denoiser dn(ps, "dn", cfg);
    Var x(random_tensor({1, 3, 16, 16}, 91));
    DenoiserCond cond;
    cond.e_umse = Var(random_tensor({1, 48, 16, 16}, 92));
    cond.gcm = Var(random_tensor({1, 8, 4, 4}, 93));
    cond.ptcm = Var(random_tensor({1, 8, 4, 4}, 94));
    cond.degraded = {random_tensor({3, 16, 16}, 95, 0, 1),
                     random_tensor({3, 16, 16}, 96, 0, 1)};
    Var eps = dn.forward(x, 5, cond);
    CHECK(eps.shape() == x.shape());
    CHECK(eps.value().data.isFinite().all());
  }
}

TEST_CASE("denoiser pads and crops indivisible spatial sizes") {
  nn::ParamStore ps(97);
  DenoiserConfig cfg;
  cfg.injection = InjectionMode::None;
  Denoiser dn(ps, "dn", cfg);
  Var x(random_tensor({1, 3, 20, 24}, 98));
  DenoiserCond cond;
  cond.degraded = {random_tensor({3, 20, 24}, 99, 0, 1)};
  Var eps = dn.forward(x, 3, cond);
  CHECK(eps.shape() == Shape{1, 3, 20, 24});
}

TEST_CASE("injection_mode none ignores the conditioning inputs") {
  nn::ParamStore ps(100);
  DenoiserConfig cfg;
  cfg.injection = InjectionMode::None;
  Denoiser dn(ps, "dn", cfg);
  Var x(random_tensor({1, 3, 16, 16}, 101));
  DenoiserCond a, b;
  a.degraded = b.degraded = {random_tensor({3, 16, 16}, 102, 0, 1)};
  a.e_umse = Var(random_tensor({1, 48, 16, 16}, 103));
  b.e_umse = Var(random_tensor({1, 48, 16, 16}, 104));
  Var ya = dn.forward(x, 2, a);
  Var yb = dn.forward(x, 2, b);
  CHECK((ya.value().data - yb.value().data).abs().maxCoeff() == 0.0);
}

TEST_CASE("conditioning gradients reach the flow encoder only when injected") {
  for (auto mode : {InjectionMode::Early, InjectionMode::None}) {
    nn::ParamStore ps(105);
    flow::FlowNet fnet(ps, "flow");
    umse::Umse um(ps, "umse");
    DenoiserConfig cfg;
    cfg.injection = mode;
    Denoiser dn(ps, "dn", cfg);
    // the output head and injection projections start at zero; give them
    // signal so gradients can flow
    ps.at("dn.head.w").value().data = random_tensor({3, 8, 3, 3}, 113).data;
    ps.at("dn.inj0.w").value().data =
        0.1 * random_tensor({8, 64, 1, 1}, 116).data;
    // the flow updater head is also zero at init; move it off zero as one
    // training step would, so the encoder is reachable through the flow
    ps.at("flow.upd3.w").value().data =
        0.1 * random_tensor({2, 48, 1, 1}, 115).data;

    Tensor f0 = random_tensor({3, 16, 16}, 106, 0, 1);
    Tensor f1 = random_tensor({3, 16, 16}, 107, 0, 1);
    Var fl = fnet.estimate_flow(Var(Tensor({1, 3, 16, 16}, f0.data)),
                                Var(Tensor({1, 3, 16, 16}, f1.data)));
    data::StructuralPriors pri;
    pri.frame_index = 1;
    pri.sequence_length = 4;
    DenoiserCond cond;
    cond.e_umse = um.condition(fl, pri);
    cond.degraded = {f0, f1};
    Var x(random_tensor({1, 3, 16, 16}, 108));
    ps.zero_grad();
    backward(mean(square(dn.forward(x, 4, cond))));
    double g = ps.at("flow.enc1.w").grad().abs().maxCoeff();
    if (mode == InjectionMode::Early)
      CHECK(g > 0.0);
    else
      CHECK(g == 0.0);
  }
}

TEST_CASE("skip connections are live") {
  nn::ParamStore ps(109);
  Denoiser dn(ps, "dn");
  ps.at("dn.head.w").value().data = random_tensor({3, 8, 3, 3}, 114).data;
  Var x(random_tensor({1, 3, 16, 16}, 110));
  DenoiserCond cond;
  cond.degraded = {random_tensor({3, 16, 16}, 111, 0, 1)};
  Var with = dn.forward(x, 7, cond);
  dn.skips_enabled = false;
  Var without = dn.forward(x, 7, cond);
  CHECK((with.value().data - without.value().data).abs().maxCoeff() > 0.0);
}

TEST_CASE("desk-scale denoiser stays under the parameter budget") {
  nn::ParamStore ps(112);
  Denoiser dn(ps, "dn");
  CHECK(ps.total_params() < 2000000);
}
