#pragma once

#include "umad/data/types.hpp"

#include <functional>
#include <string>
#include <vector>

namespace umad::metrics {

// deterministic flow estimator used by the flow-based metrics
using FlowFn =
    std::function<data::FlowField(const Tensor& f_prev, const Tensor& f_next)>;

// block-match oracle with fixed search parameters; parameter-free evaluation
FlowFn default_flow_fn();

// pluggable perceptual metric slot; no implementation is bundled
using LpipsFn = std::function<double(const Tensor& a, const Tensor& b)>;

// 10 log10(1 / MSE); +inf for identical images
double psnr(const Tensor& a, const Tensor& b);

// luminance SSIM, 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03, range 1,
// averaged over valid (unpadded) windows
double ssim(const Tensor& a, const Tensor& b);

// Reference-relative flow discrepancy: mean over t of the per-channel-mean L1
// distance between flow(restored_t, restored_{t+1}) and the same flow on the
// reference pair. With self_consistency the reference is the restored
// sequence's own previous flow (temporal smoothness; needs T >= 3).
double tof(const data::FrameSequence& restored,
           const data::FrameSequence& reference, FlowFn flow_fn = {},
           bool self_consistency = false);

double mean_flow_magnitude(const data::FrameSequence& seq, FlowFn flow_fn = {});

struct MetricsReport {
  double psnr_db = 0, ssim = 0, tof = 0, mean_flow_mag = 0;
  std::vector<double> per_frame_psnr, per_frame_ssim;  // length T
  std::vector<double> per_frame_tof, per_frame_flow;   // length T-1
};

MetricsReport evaluate_sequences(const data::FrameSequence& restored,
                                 const data::FrameSequence& reference,
                                 FlowFn flow_fn = {});

std::string to_json(const MetricsReport& r);
std::string to_csv(const MetricsReport& r);  // per-frame rows

}  // namespace umad::metrics
