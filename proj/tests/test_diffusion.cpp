#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "umad/data/synth.hpp"
#include "umad/diffusion/diffusion.hpp"

#include <cmath>
#include <random>

using namespace umad;
using namespace umad::ad;
using namespace umad::diffusion;
using umad::test::random_tensor;

TEST_CASE("cosine schedule matches an independent high-precision evaluation") {
  auto s = cosine_schedule(25);
  CHECK(s.alpha_bar[0] == 1.0);
  for (Index t = 1; t <= 25; ++t)
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);

  // long-double re-derivation of the closed form, clip included
  const long double sc = 0.008L;
  auto f = [&](long double t) {
    long double x = ((t / 25.0L + sc) / (1.0L + sc)) * 1.57079632679489661923L;
    return std::cos(x) * std::cos(x);
  };
  long double prev = 1.0L, ab = 1.0L;
  for (Index t = 1; t <= 25; ++t) {
    long double raw = f(static_cast<long double>(t)) / f(0.0L);
    long double beta = std::min(1.0L - raw / prev, 0.999L);
    ab *= 1.0L - beta;
    prev = raw;
    CHECK(std::abs(static_cast<double>(ab) - s.alpha_bar[t]) < 1e-12);
    CHECK(std::abs(static_cast<double>(beta) - s.beta[t]) < 1e-12);
  }

  CHECK_THROWS_AS(cosine_schedule(0), std::invalid_argument);
}

TEST_CASE("schedule invariants hold across step counts") {
  for (Index T : {10, 25, 100}) {
    auto s = cosine_schedule(T);
    CHECK(s.alpha_bar[0] == 1.0);
    for (Index t = 1; t <= T; ++t) {
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
      CHECK(s.beta[t] > 0.0);
      CHECK(s.beta[t] <= 0.999);
    }
  }
}

TEST_CASE("q_sample formula, edges, and range checks") {
  auto s = cosine_schedule(25);
  Tensor x0 = random_tensor({3, 4, 4}, 121);
  Tensor zero = Tensor::zeros({3, 4, 4});
  Tensor xt = q_sample(x0, 13, zero, s);
  for (Index i = 0; i < x0.numel(); ++i)
    CHECK(xt.data[i] ==
          doctest::Approx(std::sqrt(s.alpha_bar[13]) * x0.data[i]).epsilon(1e-12));

  Tensor noise = random_tensor({3, 4, 4}, 122);
  Tensor x_same = q_sample(x0, 0, noise, s);
  CHECK((x_same.data == x0.data).all());

  CHECK_THROWS_AS(q_sample(x0, 26, noise, s), std::out_of_range);
  CHECK_THROWS_AS(q_sample(x0, -1, noise, s), std::out_of_range);
}

TEST_CASE("q_sample variance matches the schedule empirically") {
  auto s = cosine_schedule(25);
  Index t = 12;
  Tensor x0 = Tensor::zeros({4});
  std::mt19937_64 rng(123);
  std::normal_distribution<double> normal(0, 1);
  double sumsq = 0;
  Index draws = 10000;
  for (Index d = 0; d < draws; ++d) {
    Tensor n = Tensor::zeros({4});
    for (Index i = 0; i < 4; ++i) n.data[i] = normal(rng);
    sumsq += q_sample(x0, t, n, s).data.square().sum();
  }
  double var = sumsq / static_cast<double>(draws * 4);
  double expect = 1.0 - s.alpha_bar[t];
  CHECK(std::abs(var - expect) / expect < 0.05);
}

TEST_CASE("analytic inversion with the true noise recovers x0") {
  auto s = cosine_schedule(25);
  Tensor x0 = random_tensor({3, 5, 5}, 124);
  Tensor noise = random_tensor({3, 5, 5}, 125);
  for (Index t : {1, 12, 25}) {
    Tensor back = q_invert(q_sample(x0, t, noise, s), t, noise, s);
    CHECK((back.data - x0.data).abs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("predict_x0 is the differentiable inverse of q_sample") {
  auto s = cosine_schedule(25);
  Tensor x0 = random_tensor({1, 3, 4, 4}, 126);
  Tensor noise = random_tensor({1, 3, 4, 4}, 127);
  Index t = 9;
  Tensor xt = q_sample(x0, t, noise, s);
  Var eps(noise, true);
  Var xhat = predict_x0(eps, xt, t, s);
  CHECK((xhat.value().data - x0.data).abs().maxCoeff() < 1e-9);
  auto loss = [&] { return mean(square(predict_x0(eps, xt, t, s))); };
  CHECK(umad::test::gradcheck(loss, eps).max_rel_err < 1e-4);
}

TEST_CASE("reverse trajectory with oracle noise recovers x0") {
  auto s = cosine_schedule(25);
  Tensor x0 = random_tensor({3, 8, 8}, 128, -0.5, 0.5);
  Tensor noise = random_tensor({3, 8, 8}, 129);
  // gaussianize the oracle noise draw
  std::mt19937_64 rng(130);
  std::normal_distribution<double> normal(0, 1);
  for (Index i = 0; i < noise.numel(); ++i) noise.data[i] = normal(rng);

  Tensor x = q_sample(x0, 25, noise, s);
  EpsFn oracle = [&](const Tensor& x_t, Index t) {
    double ab = s.alpha_bar[t];
    return Tensor(x_t.shape,
                  (x_t.data - std::sqrt(ab) * x0.data) / std::sqrt(1.0 - ab));
  };
  Tensor z = Tensor::zeros(x.shape);
  for (Index t = 25; t >= 1; --t) x = p_sample_step(x, t, s, oracle, z);
  double mae = (x.data - x0.data).abs().mean();
  CHECK(mae < 1e-3);
}

TEST_CASE("p_sample_step is deterministic at the final step") {
  auto s = cosine_schedule(25);
  Tensor x1 = random_tensor({3, 4, 4}, 131);
  EpsFn eps = [](const Tensor& x_t, Index) { return x_t; };
  Tensor za = random_tensor({3, 4, 4}, 132);
  Tensor zb = random_tensor({3, 4, 4}, 133);
  Tensor a = p_sample_step(x1, 1, s, eps, za);
  Tensor b = p_sample_step(x1, 1, s, eps, zb);
  CHECK((a.data == b.data).all());
  CHECK_THROWS_AS(p_sample_step(x1, 0, s, eps, za), std::out_of_range);
  CHECK_THROWS_AS(p_sample_step(x1, 26, s, eps, za), std::out_of_range);
}

TEST_CASE("sampler defaults to 25 steps") {
  SamplerConfig c;
  CHECK(c.T == 25);
  ModelConfig m;
  CHECK(m.sampler_T == 25);
}

TEST_CASE("restore smoke: shape, range, determinism, and windowing errors") {
  ModelConfig cfg;
  cfg.window = 3;
  cfg.post = 1;
  Model model(134, cfg);

  data::MotionSpec motion;
  motion.dx = 1;
  auto seq = data::generate_synthetic_sequence(135, 6, 16, 16, motion,
                                               data::TextureKind::Checker);
  SamplerConfig sam;
  sam.T = 4;
  sam.seed = 7;
  auto out = restore(model, seq.clean, sam);
  REQUIRE(out.frames.size() == seq.clean.frames.size());
  for (const auto& f : out.frames) {
    CHECK(f.shape == Shape{3, 16, 16});
    CHECK(f.data.minCoeff() >= 0.0);
    CHECK(f.data.maxCoeff() <= 1.0);
  }
  auto out2 = restore(model, seq.clean, sam);
  for (size_t i = 0; i < out.frames.size(); ++i)
    CHECK((out.frames[i].data == out2.frames[i].data).all());

  data::FrameSequence tiny;
  tiny.frames = {seq.clean.frames[0], seq.clean.frames[1]};
  CHECK_THROWS_AS(restore(model, tiny, sam), std::invalid_argument);
}
