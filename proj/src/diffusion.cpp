#include "umad/diffusion/diffusion.hpp"

#include <cmath>
#include <random>

namespace umad::diffusion {

using namespace umad::ad;

NoiseSchedule cosine_schedule(Index T) {
  require(T >= 1, "cosine_schedule: T must be >= 1");
  const double s = 0.008;
  auto f = [&](double t) {
    double x = ((t / static_cast<double>(T) + s) / (1.0 + s)) * M_PI / 2.0;
    double c = std::cos(x);
    return c * c;
  };
  NoiseSchedule sch;
  sch.T = T;
  sch.beta.assign(static_cast<size_t>(T) + 1, 0.0);
  sch.alpha.assign(static_cast<size_t>(T) + 1, 0.0);
  sch.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
  double f0 = f(0.0);
  double prev = 1.0;
  for (Index t = 1; t <= T; ++t) {
    double ab = f(static_cast<double>(t)) / f0;
    double beta = std::min(1.0 - ab / prev, 0.999);
    sch.beta[static_cast<size_t>(t)] = beta;
    sch.alpha[static_cast<size_t>(t)] = 1.0 - beta;
    sch.alpha_bar[static_cast<size_t>(t)] =
        sch.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - beta);
    prev = ab;
  }
  return sch;
}

namespace {

double ab_at(const NoiseSchedule& s, Index t) {
  if (t < 0 || t > s.T) throw std::out_of_range("diffusion: step out of range");
  return s.alpha_bar[static_cast<size_t>(t)];
}

}  // namespace

Tensor q_sample(const Tensor& x0, Index t, const Tensor& noise,
                const NoiseSchedule& s) {
  require(x0.shape == noise.shape, "q_sample: shape mismatch");
  double ab = ab_at(s, t);
  return Tensor(x0.shape,
                std::sqrt(ab) * x0.data + std::sqrt(1.0 - ab) * noise.data);
}

Tensor q_invert(const Tensor& x_t, Index t, const Tensor& noise,
                const NoiseSchedule& s) {
  double ab = ab_at(s, t);
  return Tensor(x_t.shape,
                (x_t.data - std::sqrt(1.0 - ab) * noise.data) / std::sqrt(ab));
}

Var predict_x0(const Var& eps_hat, const Tensor& x_t, Index t,
               const NoiseSchedule& s) {
  double ab = ab_at(s, t);
  require(t >= 1, "predict_x0: step out of range");
  Var scaled = muls(eps_hat, -std::sqrt(1.0 - ab) / std::sqrt(ab));
  return add(scaled, Var(Tensor(x_t.shape, x_t.data / std::sqrt(ab))));
}

Tensor p_sample_step(const Tensor& x_t, Index t, const NoiseSchedule& s,
                     const EpsFn& eps_fn, const Tensor& z) {
  if (t < 1 || t > s.T) throw std::out_of_range("p_sample_step: step out of range");
  Tensor eps = eps_fn(x_t, t);
  require(eps.shape == x_t.shape, "p_sample_step: eps shape mismatch");
  double beta = s.beta[static_cast<size_t>(t)];
  double alpha = s.alpha[static_cast<size_t>(t)];
  double ab = s.alpha_bar[static_cast<size_t>(t)];
  double ab_prev = s.alpha_bar[static_cast<size_t>(t - 1)];
  Array mu =
      (x_t.data - (beta / std::sqrt(1.0 - ab)) * eps.data) / std::sqrt(alpha);
  if (t == 1) return Tensor(x_t.shape, std::move(mu));
  double var = (1.0 - ab_prev) / (1.0 - ab) * beta;  // beta-tilde, fixed-small
  require(z.shape == x_t.shape, "p_sample_step: z shape mismatch");
  return Tensor(x_t.shape, mu + std::sqrt(var) * z.data);
}

Model::Model(std::uint64_t seed, ModelConfig cfg_in)
    : cfg(cfg_in), ps(seed) {
  if (cfg.ablation == Ablation::NoConditioning)
    cfg.denoiser.injection = backbone::InjectionMode::None;
  flow_net = flow::FlowNet(ps, "flow", cfg.flow);
  umse_enc = umse::Umse(ps, "umse", cfg.umse);
  ctx_enc = context::ContextEncoder(ps, "ctx", cfg.context);
  denoiser = backbone::Denoiser(ps, "dn", cfg.denoiser);
}

backbone::DenoiserCond Model::make_cond(const std::vector<Tensor>& input_frames,
                                        const std::vector<Tensor>& post_frames,
                                        const data::StructuralPriors& priors) const {
  require(!input_frames.empty(), "make_cond: empty input window");
  backbone::DenoiserCond cond;
  cond.degraded = input_frames;
  if (cfg.ablation == Ablation::NoConditioning) return cond;

  Index n = static_cast<Index>(input_frames.size());
  const Tensor& prev = input_frames[static_cast<size_t>(n >= 2 ? n - 2 : 0)];
  const Tensor& last = input_frames[static_cast<size_t>(n - 1)];
  Index H = last.dim(1), W = last.dim(2);
  Var fl = flow_net.estimate_flow(Var(Tensor({1, 3, H, W}, prev.data)),
                                  Var(Tensor({1, 3, H, W}, last.data)));

  switch (cfg.ablation) {
    case Ablation::Full:
      cond.e_umse = umse_enc.condition(fl, priors);
      cond.gcm = ctx_enc.gcm(last, cfg.context.downsample_factor).values;
      if (!post_frames.empty()) cond.ptcm = ctx_enc.ptcm(post_frames).values;
      break;
    case Ablation::NoUmse:
      cond.gcm = ctx_enc.gcm(last, cfg.context.downsample_factor).values;
      if (!post_frames.empty()) cond.ptcm = ctx_enc.ptcm(post_frames).values;
      break;
    case Ablation::NoContext:
      cond.e_umse = umse_enc.condition(fl, priors);
      break;
    case Ablation::FlowOnly:
      // motion signal without structural priors: fuse against a zero map
      cond.e_umse = umse_enc.fuse(
          fl, Var(Tensor::zeros({1, cfg.umse.struct_channels(), H, W})));
      break;
    case Ablation::NoConditioning:
      break;
  }
  return cond;
}

data::FrameSequence restore(Model& model, const data::FrameSequence& f_deg,
                            SamplerConfig sampler, double quality_q) {
  Index T_frames = static_cast<Index>(f_deg.frames.size());
  Index L = model.cfg.window, K = model.cfg.post;
  if (T_frames < L + K)
    throw std::invalid_argument("restore: sequence shorter than the window");
  NoiseSchedule sch = cosine_schedule(sampler.T);

  data::FrameSequence out;
  out.frame_rate = f_deg.frame_rate;
  auto clampi = [&](Index i) { return std::min(T_frames - 1, std::max<Index>(0, i)); };

  for (Index t = 0; t < T_frames; ++t) {
    std::vector<Tensor> window, post;
    for (Index i = t - L + 1; i <= t; ++i)
      window.push_back(f_deg.frames[static_cast<size_t>(clampi(i))]);
    for (Index i = t + 1; i <= t + K; ++i)
      post.push_back(f_deg.frames[static_cast<size_t>(clampi(i))]);

    data::StructuralPriors priors;
    priors.frame_index = t;
    priors.sequence_length = T_frames;
    priors.window_scale = 1.0;
    priors.quality_q = quality_q;
    backbone::DenoiserCond cond = model.make_cond(window, post, priors);

    // per-window random stream
    std::mt19937_64 rng(sampler.seed ^
                        (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(t + 1)));
    std::normal_distribution<double> normal(0.0, 1.0);
    const Tensor& deg = f_deg.frames[static_cast<size_t>(t)];
    Tensor x = Tensor::zeros(deg.shape);
    for (Index i = 0; i < x.numel(); ++i) x.data[i] = normal(rng);

    EpsFn eps_fn = [&](const Tensor& x_t, Index step) {
      Var e = model.denoiser.forward(
          Var(Tensor({1, 3, deg.dim(1), deg.dim(2)}, x_t.data)), step, cond);
      return Tensor(x_t.shape, e.value().data);
    };
    for (Index step = sampler.T; step >= 1; --step) {
      Tensor z = Tensor::zeros(x.shape);
      if (step > 1)
        for (Index i = 0; i < z.numel(); ++i) z.data[i] = normal(rng);
      x = p_sample_step(x, step, sch, eps_fn, z);
    }
    // residual parameterization: the sample is clean - degraded
    Tensor frame(deg.shape, (deg.data + x.data).cwiseMax(0.0).cwiseMin(1.0));
    out.frames.push_back(std::move(frame));
  }
  return out;
}

}  // namespace umad::diffusion
