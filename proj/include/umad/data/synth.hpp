#pragma once

#include "umad/data/types.hpp"

#include <cstdint>
#include <utility>

namespace umad::data {

struct SynthResult {
  FrameSequence clean;
  std::vector<FlowField> gt_flows;  // T-1 fields, pair (t, t+1)
};

// Frames are rendered by analytic texture evaluation at motion-transformed
// coordinates, so the returned flows are exact by construction.
SynthResult generate_synthetic_sequence(std::uint64_t seed, Index T, Index H, Index W,
                                        const MotionSpec& motion, TextureKind texture);

FrameSequence degrade(const FrameSequence& clean, const DegradationSpec& spec,
                      std::uint64_t seed);

struct PatchWindow {
  Index x0 = 0, y0 = 0, size = 0;
};
std::vector<std::pair<FrameSequence, PatchWindow>> crop_patches(const FrameSequence& seq,
                                                                Index size, Index stride);

// Bicubic (Keys, a = -0.5) resampling at output sample centers.
Tensor downsample(const Tensor& frame, Index factor);

TrainingWindow sample_training_window(const FrameSequence& degraded,
                                      const FrameSequence& clean, Index t, Index L,
                                      Index K, Index global_downsample_factor = 4,
                                      double window_scale = 1.0, double quality_q = 1.0);

// analytic texture value in [0,1]; coordinates may be any reals
double eval_texture(TextureKind kind, std::uint64_t seed, Index channel, double x,
                    double y);

}  // namespace umad::data
