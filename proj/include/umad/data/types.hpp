#pragma once

#include "umad/core/tensor.hpp"

#include <string>
#include <vector>

namespace umad::data {

// Ordered stack of same-size frames, each (C, H, W) in [0,1].
struct FrameSequence {
  std::vector<Tensor> frames;
  double frame_rate = 0.0;  // metadata only

  Index length() const { return static_cast<Index>(frames.size()); }
  Index channels() const { return frames.empty() ? 0 : frames[0].dim(0); }
  Index height() const { return frames.empty() ? 0 : frames[0].dim(1); }
  Index width() const { return frames.empty() ? 0 : frames[0].dim(2); }
};

// Per-pixel displacement between two frames, in pixels.
// Convention used throughout: u,v form the sampling map of the pair
// (f_t, f_{t+1}) — sampling f_t at (x + u, y + v) reproduces f_{t+1}.
struct FlowField {
  Tensor u;  // (H, W) horizontal
  Tensor v;  // (H, W) vertical

  static FlowField zeros(Index h, Index w) {
    return {Tensor::zeros({h, w}), Tensor::zeros({h, w})};
  }
  Index height() const { return u.dim(0); }
  Index width() const { return u.dim(1); }
};

struct DegradationSpec {
  double noise_sigma = 0.0;
  double blur_sigma = 0.0;
  double quality_q = 1.0;  // (0,1], 1 = lossless
  double flicker_amp = 0.0;

  bool is_identity() const {
    return noise_sigma == 0.0 && blur_sigma == 0.0 && quality_q == 1.0 &&
           flicker_amp == 0.0;
  }
  void validate() const {
    require(noise_sigma >= 0 && blur_sigma >= 0 && flicker_amp >= 0,
            "DegradationSpec: negative parameter");
    require(quality_q > 0 && quality_q <= 1, "DegradationSpec: quality_q out of (0,1]");
  }
};

struct StructuralPriors {
  Index frame_index = 0;
  Index sequence_length = 1;
  double window_scale = 1.0;  // patch size / full frame size
  double quality_q = 1.0;
};

struct TrainingWindow {
  std::vector<Tensor> input_frames;  // L consecutive degraded frames, ends at t
  Tensor target_frame;               // clean frame at t
  std::vector<Tensor> post_frames;   // degraded frames t+1 .. t+K
  Tensor global_frame;               // downsampled full degraded frame at t
  StructuralPriors priors;
};

struct ManifestEntry {
  std::string clean_dir;
  std::string degraded_dir;
  std::string flow_dir;  // optional, empty if absent
  Index T = 0, H = 0, W = 0;
  DegradationSpec degradation;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

struct MotionSpec {
  enum class Kind { Shift, Rotate } kind = Kind::Shift;
  double dx = 0.0, dy = 0.0;     // pixels per frame (Shift)
  double deg_per_frame = 0.0;    // degrees per frame about center (Rotate)
};

enum class TextureKind { Checker, NoiseTexture, Sprites };

}  // namespace umad::data
