#include "umad/data/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace umad::data {

namespace {

constexpr double kPi = 3.14159265358979323846;

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct Sinusoid {
  double ax, ay, phase, amp;
};

// deterministic per-(seed, channel) sinusoid bank for the noise texture
std::vector<Sinusoid> sinusoid_bank(std::uint64_t seed, Index channel) {
  std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(channel) + 1);
  std::uniform_real_distribution<double> ang(0.0, 2 * kPi);
  std::uniform_real_distribution<double> per(20.0, 48.0);
  std::uniform_real_distribution<double> am(0.03, 0.08);
  std::vector<Sinusoid> bank(10);
  for (auto& s : bank) {
    double theta = ang(rng);
    double omega = 2 * kPi / per(rng);
    s.ax = omega * std::cos(theta);
    s.ay = omega * std::sin(theta);
    s.phase = ang(rng);
    s.amp = am(rng);
  }
  return bank;
}

struct Sprite {
  double cx, cy, sigma, amp;
};

std::vector<Sprite> sprite_bank(std::uint64_t seed, Index channel) {
  std::mt19937_64 rng(seed * 7919ULL + static_cast<std::uint64_t>(channel) + 13);
  std::uniform_real_distribution<double> pos(-80.0, 160.0);
  std::uniform_real_distribution<double> sig(3.0, 9.0);
  std::uniform_real_distribution<double> am(0.2, 0.6);
  std::vector<Sprite> bank(24);
  for (auto& s : bank) {
    s.cx = pos(rng);
    s.cy = pos(rng);
    s.sigma = sig(rng);
    s.amp = am(rng);
  }
  return bank;
}

}  // namespace

double eval_texture(TextureKind kind, std::uint64_t seed, Index channel, double x,
                    double y) {
  switch (kind) {
    case TextureKind::Checker: {
      // smooth checker; period 16 px, phase offset per channel
      double ph = 0.7 * static_cast<double>(channel);
      double s = std::sin(kPi * (x + ph) / 8.0) * std::sin(kPi * (y - ph) / 8.0);
      return clamp01(0.5 + 0.42 * std::tanh(2.0 * s));
    }
    case TextureKind::NoiseTexture: {
      static thread_local std::uint64_t cached_seed = ~0ULL;
      static thread_local std::vector<Sinusoid> banks[3];
      if (cached_seed != seed) {
        for (Index c = 0; c < 3; ++c) banks[c] = sinusoid_bank(seed, c);
        cached_seed = seed;
      }
      double v = 0.5;
      for (const auto& s : banks[channel % 3])
        v += s.amp * std::sin(s.ax * x + s.ay * y + s.phase);
      return clamp01(v);
    }
    case TextureKind::Sprites: {
      static thread_local std::uint64_t cached_seed = ~0ULL;
      static thread_local std::vector<Sprite> banks[3];
      if (cached_seed != seed) {
        for (Index c = 0; c < 3; ++c) banks[c] = sprite_bank(seed, c);
        cached_seed = seed;
      }
      double v = 0.15 + 0.05 * static_cast<double>(channel);
      for (const auto& s : banks[channel % 3]) {
        double dx = x - s.cx, dy = y - s.cy;
        v += s.amp * std::exp(-(dx * dx + dy * dy) / (2 * s.sigma * s.sigma));
      }
      return clamp01(v);
    }
  }
  return 0.0;
}

SynthResult generate_synthetic_sequence(std::uint64_t seed, Index T, Index H, Index W,
                                        const MotionSpec& motion, TextureKind texture) {
  require(T >= 2 && H >= 1 && W >= 1, "generate_synthetic_sequence: invalid dimensions");
  if (motion.kind == MotionSpec::Kind::Shift)
    require(std::abs(motion.dx) < static_cast<double>(std::min(H, W)) / 4 &&
                std::abs(motion.dy) < static_cast<double>(std::min(H, W)) / 4,
            "generate_synthetic_sequence: shift too large");

  SynthResult out;
  out.clean.frame_rate = 120.0;
  double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;
  double theta = motion.deg_per_frame * kPi / 180.0;

  for (Index t = 0; t < T; ++t) {
    Tensor f = Tensor::zeros({3, H, W});
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          double sx, sy;
          if (motion.kind == MotionSpec::Kind::Shift) {
            sx = static_cast<double>(x) + static_cast<double>(t) * motion.dx;
            sy = static_cast<double>(y) + static_cast<double>(t) * motion.dy;
          } else {
            double a = static_cast<double>(t) * theta;
            double rx = static_cast<double>(x) - cx, ry = static_cast<double>(y) - cy;
            sx = cx + std::cos(a) * rx - std::sin(a) * ry;
            sy = cy + std::sin(a) * rx + std::cos(a) * ry;
          }
          f.data[(c * H + y) * W + x] = eval_texture(texture, seed, c, sx, sy);
        }
    out.clean.frames.push_back(std::move(f));
  }

  for (Index t = 0; t + 1 < T; ++t) {
    FlowField fl = FlowField::zeros(H, W);
    if (motion.kind == MotionSpec::Kind::Shift) {
      fl.u.data.setConstant(motion.dx);
      fl.v.data.setConstant(motion.dy);
    } else {
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          double rx = static_cast<double>(x) - cx, ry = static_cast<double>(y) - cy;
          fl.u.data[y * W + x] = std::cos(theta) * rx - std::sin(theta) * ry - rx;
          fl.v.data[y * W + x] = std::sin(theta) * rx + std::cos(theta) * ry - ry;
        }
    }
    out.gt_flows.push_back(std::move(fl));
  }
  return out;
}

namespace {

Tensor gaussian_blur(const Tensor& img, double sigma) {
  Index C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Index r = static_cast<Index>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * r + 1));
  double s = 0;
  for (Index i = -r; i <= r; ++i) {
    double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<size_t>(i + r)] = v;
    s += v;
  }
  for (auto& v : k) v /= s;
  auto refl = [](Index i, Index n) {
    if (n == 1) return Index{0};
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
  };
  Tensor tmp = Tensor::zeros(img.shape), out = Tensor::zeros(img.shape);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        double acc = 0;
        for (Index i = -r; i <= r; ++i)
          acc += k[static_cast<size_t>(i + r)] * img.data[(c * H + y) * W + refl(x + i, W)];
        tmp.data[(c * H + y) * W + x] = acc;
      }
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        double acc = 0;
        for (Index i = -r; i <= r; ++i)
          acc += k[static_cast<size_t>(i + r)] * tmp.data[(c * H + refl(y + i, H)) * W + x];
        out.data[(c * H + y) * W + x] = acc;
      }
  return out;
}

// 8x8 uniform quantization of block mean and residual; levels = round(2 + 62 q)
Tensor block_quantize(const Tensor& img, double q) {
  Index C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Index levels = static_cast<Index>(std::lround(2 + 62 * q));
  double step = 1.0 / static_cast<double>(levels - 1);
  Tensor out = img;
  for (Index c = 0; c < C; ++c)
    for (Index by = 0; by < H; by += 8)
      for (Index bx = 0; bx < W; bx += 8) {
        Index bh = std::min<Index>(8, H - by), bw = std::min<Index>(8, W - bx);
        double m = 0;
        for (Index y = 0; y < bh; ++y)
          for (Index x = 0; x < bw; ++x)
            m += img.data[(c * H + by + y) * W + bx + x];
        m /= static_cast<double>(bh * bw);
        double mq = std::round(m / step) * step;
        for (Index y = 0; y < bh; ++y)
          for (Index x = 0; x < bw; ++x) {
            double res = img.data[(c * H + by + y) * W + bx + x] - m;
            double rq = std::round(res / step) * step;
            out.data[(c * H + by + y) * W + bx + x] = clamp01(mq + rq);
          }
      }
  return out;
}

}  // namespace

FrameSequence degrade(const FrameSequence& clean, const DegradationSpec& spec,
                      std::uint64_t seed) {
  spec.validate();
  if (spec.is_identity()) return clean;
  FrameSequence out;
  out.frame_rate = clean.frame_rate;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (const Tensor& f : clean.frames) {
    Tensor g = f;
    if (spec.blur_sigma > 0) g = gaussian_blur(g, spec.blur_sigma);
    if (spec.quality_q < 1.0) g = block_quantize(g, spec.quality_q);
    if (spec.noise_sigma > 0)
      for (Index i = 0; i < g.numel(); ++i) g.data[i] += spec.noise_sigma * gauss(rng);
    if (spec.flicker_amp > 0) {
      double gain = 1.0 + spec.flicker_amp * uni(rng);
      g.data *= gain;
    }
    for (Index i = 0; i < g.numel(); ++i) g.data[i] = clamp01(g.data[i]);
    out.frames.push_back(std::move(g));
  }
  return out;
}

std::vector<std::pair<FrameSequence, PatchWindow>> crop_patches(const FrameSequence& seq,
                                                                Index size,
                                                                Index stride) {
  Index H = seq.height(), W = seq.width(), C = seq.channels();
  require(size >= 1 && size <= std::min(H, W), "crop_patches: size exceeds frame");
  require(stride >= 1, "crop_patches: stride must be positive");
  std::vector<Index> xs, ys;
  for (Index x = 0;; x += stride) {
    Index x0 = std::min(x, W - size);
    if (xs.empty() || xs.back() != x0) xs.push_back(x0);
    if (x0 == W - size) break;
  }
  for (Index y = 0;; y += stride) {
    Index y0 = std::min(y, H - size);
    if (ys.empty() || ys.back() != y0) ys.push_back(y0);
    if (y0 == H - size) break;
  }
  std::vector<std::pair<FrameSequence, PatchWindow>> out;
  for (Index y0 : ys)
    for (Index x0 : xs) {
      FrameSequence p;
      p.frame_rate = seq.frame_rate;
      for (const Tensor& f : seq.frames) {
        Tensor t = Tensor::zeros({C, size, size});
        for (Index c = 0; c < C; ++c)
          for (Index y = 0; y < size; ++y)
            for (Index x = 0; x < size; ++x)
              t.data[(c * size + y) * size + x] = f.data[(c * H + y0 + y) * W + x0 + x];
        p.frames.push_back(std::move(t));
      }
      out.emplace_back(std::move(p), PatchWindow{x0, y0, size});
    }
  return out;
}

namespace {

double cubic_keys(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1) return (a + 2) * x * x * x - (a + 3) * x * x + 1;
  if (x < 2) return a * x * x * x - 5 * a * x * x + 8 * a * x - 4 * a;
  return 0;
}

}  // namespace

Tensor downsample(const Tensor& frame, Index factor) {
  require(factor >= 1, "downsample: factor must be >= 1");
  if (factor == 1) return frame;
  Index C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  Index Ho = (H + factor - 1) / factor, Wo = (W + factor - 1) / factor;
  auto clampi = [](Index i, Index n) { return std::min(n - 1, std::max<Index>(0, i)); };
  double f = static_cast<double>(factor);
  Tensor out = Tensor::zeros({C, Ho, Wo});
  for (Index c = 0; c < C; ++c)
    for (Index yo = 0; yo < Ho; ++yo)
      for (Index xo = 0; xo < Wo; ++xo) {
        // source position of the output sample center
        double sx = (static_cast<double>(xo) + 0.5) * f - 0.5;
        double sy = (static_cast<double>(yo) + 0.5) * f - 0.5;
        Index ix = static_cast<Index>(std::floor(sx));
        Index iy = static_cast<Index>(std::floor(sy));
        double acc = 0, wsum = 0;
        for (Index dy = -1; dy <= 2; ++dy)
          for (Index dx = -1; dx <= 2; ++dx) {
            double w = cubic_keys(sx - static_cast<double>(ix + dx)) *
                       cubic_keys(sy - static_cast<double>(iy + dy));
            acc += w * frame.data[(c * H + clampi(iy + dy, H)) * W + clampi(ix + dx, W)];
            wsum += w;
          }
        out.data[(c * Ho + yo) * Wo + xo] = clamp01(acc / wsum);
      }
  return out;
}

TrainingWindow sample_training_window(const FrameSequence& degraded,
                                      const FrameSequence& clean, Index t, Index L,
                                      Index K, Index global_downsample_factor,
                                      double window_scale, double quality_q) {
  Index T = degraded.length();
  require(clean.length() == T, "sample_training_window: sequence length mismatch");
  require(L >= 1 && K >= 1, "sample_training_window: L and K must be positive");
  if (t - L + 1 < 0 || t + K > T - 1)
    throw std::out_of_range("sample_training_window: t out of valid range");
  TrainingWindow w;
  for (Index i = t - L + 1; i <= t; ++i) w.input_frames.push_back(degraded.frames[static_cast<size_t>(i)]);
  w.target_frame = clean.frames[static_cast<size_t>(t)];
  for (Index i = t + 1; i <= t + K; ++i)
    w.post_frames.push_back(degraded.frames[static_cast<size_t>(i)]);
  w.global_frame =
      downsample(degraded.frames[static_cast<size_t>(t)], global_downsample_factor);
  w.priors.frame_index = t;
  w.priors.sequence_length = T;
  w.priors.window_scale = window_scale;
  w.priors.quality_q = quality_q;
  return w;
}

}  // namespace umad::data
