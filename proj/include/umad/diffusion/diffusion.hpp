#pragma once

#include "umad/backbone/backbone.hpp"
#include "umad/context/context.hpp"
#include "umad/flow/flow.hpp"
#include "umad/umse/umse.hpp"

#include <functional>
#include <vector>

namespace umad::diffusion {

using ad::Var;

struct NoiseSchedule {
  Index T = 0;
  std::vector<double> beta;       // beta[t], t in 1..T (index 0 unused)
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative, index 0..T, alpha_bar[0] = 1
};

// alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), s = 0.008;
// betas clipped to <= 0.999
NoiseSchedule cosine_schedule(Index T);

// x_t = sqrt(ab[t]) x0 + sqrt(1 - ab[t]) noise; t in [0, T] (0 is the identity
// edge, exposed for tests)
Tensor q_sample(const Tensor& x0, Index t, const Tensor& noise,
                const NoiseSchedule& s);

// recover x0 from (x_t, the exact noise) -- analytic inverse of q_sample
Tensor q_invert(const Tensor& x_t, Index t, const Tensor& noise,
                const NoiseSchedule& s);

// differentiable x0 estimate from a predicted noise
Var predict_x0(const Var& eps_hat, const Tensor& x_t, Index t,
               const NoiseSchedule& s);

using EpsFn = std::function<Tensor(const Tensor& x_t, Index t)>;

// one DDPM reverse step with fixed-small posterior variance; z must be a
// standard normal draw of x_t's shape and is ignored at t = 1
Tensor p_sample_step(const Tensor& x_t, Index t, const NoiseSchedule& s,
                     const EpsFn& eps_fn, const Tensor& z);

struct SamplerConfig {
  Index T = 25;
  std::uint64_t seed = 0;
};

enum class Ablation { Full, NoUmse, NoContext, FlowOnly, NoConditioning };

struct ModelConfig {
  Index window = 5;  // L degraded frames ending at the target
  Index post = 2;    // K post-target frames for the PTCM
  Index sampler_T = 25;
  Ablation ablation = Ablation::Full;
  backbone::DenoiserConfig denoiser;
  flow::FlowConfig flow;
  umse::UmseConfig umse;
  context::ContextConfig context;
};

// All learnable components behind one parameter store.
struct Model {
  ModelConfig cfg;
  nn::ParamStore ps;
  flow::FlowNet flow_net;
  umse::Umse umse_enc;
  context::ContextEncoder ctx_enc;
  backbone::Denoiser denoiser;

  Model(std::uint64_t seed, ModelConfig cfg = {});

  // conditioning for a window of degraded frames ending at the target; the
  // active ablation decides which components are populated
  backbone::DenoiserCond make_cond(const std::vector<Tensor>& input_frames,
                                   const std::vector<Tensor>& post_frames,
                                   const data::StructuralPriors& priors) const;
};

// Full reverse diffusion over every frame of a degraded sequence; windows are
// clamped at the sequence edges, the residual estimate is added back onto the
// degraded frame, and outputs are clamped to [0, 1].
data::FrameSequence restore(Model& model, const data::FrameSequence& f_deg,
                            SamplerConfig sampler, double quality_q = 1.0);

}  // namespace umad::diffusion
