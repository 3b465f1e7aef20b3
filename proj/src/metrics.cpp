#include "umad/metrics/metrics.hpp"

#include "umad/flow/flow.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <sstream>

namespace umad::metrics {

FlowFn default_flow_fn() {
  return [](const Tensor& a, const Tensor& b) {
    return flow::block_match_oracle(a, b, 4, 8);
  };
}

double psnr(const Tensor& a, const Tensor& b) {
  require(a.shape == b.shape, "psnr: shape mismatch");
  double mse = (a.data - b.data).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

// luminance plane of a (3,H,W) or (1,H,W) image
Tensor to_luma(const Tensor& img) {
  require(img.shape.size() == 3, "ssim: expected (C,H,W)");
  Index C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (C == 1) return Tensor({H, W}, img.data);
  require(C == 3, "ssim: expected 1 or 3 channels");
  Tensor y = Tensor::zeros({H, W});
  for (Index i = 0; i < H * W; ++i)
    y.data[i] = 0.299 * img.data[i] + 0.587 * img.data[H * W + i] +
                0.114 * img.data[2 * H * W + i];
  return y;
}

std::vector<double> gaussian_window(Index k, double sigma) {
  std::vector<double> w(static_cast<size_t>(k * k));
  Index r = k / 2;
  double sum = 0;
  for (Index y = 0; y < k; ++y)
    for (Index x = 0; x < k; ++x) {
      double dy = static_cast<double>(y - r), dx = static_cast<double>(x - r);
      double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      w[static_cast<size_t>(y * k + x)] = v;
      sum += v;
    }
  for (double& v : w) v /= sum;
  return w;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  require(a.shape == b.shape, "ssim: shape mismatch");
  Tensor xa = to_luma(a), xb = to_luma(b);
  Index H = xa.dim(0), W = xa.dim(1);
  const Index k = 11;
  require(H >= k && W >= k, "ssim: image smaller than the window");
  static const std::vector<double> win = gaussian_window(k, 1.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  double total = 0;
  Index count = 0;
  for (Index y = 0; y + k <= H; ++y)
    for (Index x = 0; x + k <= W; ++x) {
      double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
      for (Index wy = 0; wy < k; ++wy)
        for (Index wx = 0; wx < k; ++wx) {
          double wgt = win[static_cast<size_t>(wy * k + wx)];
          double va = xa.data[(y + wy) * W + x + wx];
          double vb = xb.data[(y + wy) * W + x + wx];
          mx += wgt * va;
          my += wgt * vb;
          mxx += wgt * va * va;
          myy += wgt * vb * vb;
          mxy += wgt * va * vb;
        }
      double vx = mxx - mx * mx, vy = myy - my * my, cxy = mxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

namespace {

double flow_l1(const data::FlowField& a, const data::FlowField& b) {
  return (a.u.data - b.u.data).abs().mean() + (a.v.data - b.v.data).abs().mean();
}

}  // namespace

double tof(const data::FrameSequence& restored,
           const data::FrameSequence& reference, FlowFn flow_fn,
           bool self_consistency) {
  if (!flow_fn) flow_fn = default_flow_fn();
  Index T = static_cast<Index>(restored.frames.size());
  require(T >= 2, "tof: need at least two frames");
  if (self_consistency) {
    require(T >= 3, "tof: self-consistency needs at least three frames");
    double total = 0;
    data::FlowField prev = flow_fn(restored.frames[0], restored.frames[1]);
    for (Index t = 1; t + 1 < T; ++t) {
      data::FlowField cur = flow_fn(restored.frames[static_cast<size_t>(t)],
                                    restored.frames[static_cast<size_t>(t + 1)]);
      total += flow_l1(cur, prev);
      prev = cur;
    }
    return total / static_cast<double>(T - 2);
  }
  require(reference.frames.size() == restored.frames.size(),
          "tof: sequence length mismatch");
  double total = 0;
  for (Index t = 0; t + 1 < T; ++t) {
    auto fr = flow_fn(restored.frames[static_cast<size_t>(t)],
                      restored.frames[static_cast<size_t>(t + 1)]);
    auto fg = flow_fn(reference.frames[static_cast<size_t>(t)],
                      reference.frames[static_cast<size_t>(t + 1)]);
    total += flow_l1(fr, fg);
  }
  return total / static_cast<double>(T - 1);
}

double mean_flow_magnitude(const data::FrameSequence& seq, FlowFn flow_fn) {
  if (!flow_fn) flow_fn = default_flow_fn();
  Index T = static_cast<Index>(seq.frames.size());
  require(T >= 2, "mean_flow_magnitude: need at least two frames");
  double total = 0;
  for (Index t = 0; t + 1 < T; ++t) {
    auto f = flow_fn(seq.frames[static_cast<size_t>(t)],
                     seq.frames[static_cast<size_t>(t + 1)]);
    total += (f.u.data.square() + f.v.data.square()).sqrt().mean();
  }
  return total / static_cast<double>(T - 1);
}

MetricsReport evaluate_sequences(const data::FrameSequence& restored,
                                 const data::FrameSequence& reference,
                                 FlowFn flow_fn) {
  if (!flow_fn) flow_fn = default_flow_fn();
  require(restored.frames.size() == reference.frames.size() &&
              !restored.frames.empty(),
          "evaluate_sequences: length mismatch");
  Index T = static_cast<Index>(restored.frames.size());
  MetricsReport r;
  for (Index t = 0; t < T; ++t) {
    r.per_frame_psnr.push_back(psnr(restored.frames[static_cast<size_t>(t)],
                                    reference.frames[static_cast<size_t>(t)]));
    r.per_frame_ssim.push_back(ssim(restored.frames[static_cast<size_t>(t)],
                                    reference.frames[static_cast<size_t>(t)]));
  }
  for (Index t = 0; t + 1 < T; ++t) {
    auto fr = flow_fn(restored.frames[static_cast<size_t>(t)],
                      restored.frames[static_cast<size_t>(t + 1)]);
    auto fg = flow_fn(reference.frames[static_cast<size_t>(t)],
                      reference.frames[static_cast<size_t>(t + 1)]);
    r.per_frame_tof.push_back(flow_l1(fr, fg));
    r.per_frame_flow.push_back(
        (fr.u.data.square() + fr.v.data.square()).sqrt().mean());
  }
  auto mean_of = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  r.psnr_db = mean_of(r.per_frame_psnr);
  r.ssim = mean_of(r.per_frame_ssim);
  r.tof = mean_of(r.per_frame_tof);
  r.mean_flow_mag = mean_of(r.per_frame_flow);
  return r;
}

std::string to_json(const MetricsReport& r) {
  nlohmann::json j;
  auto enc = [](double x) {
    return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json("inf");
  };
  j["psnr_db"] = enc(r.psnr_db);
  j["ssim"] = r.ssim;
  j["tof"] = r.tof;
  j["mean_flow_mag"] = r.mean_flow_mag;
  for (double v : r.per_frame_psnr) j["per_frame"]["psnr_db"].push_back(enc(v));
  for (double v : r.per_frame_ssim) j["per_frame"]["ssim"].push_back(v);
  for (double v : r.per_frame_tof) j["per_frame"]["tof"].push_back(v);
  for (double v : r.per_frame_flow) j["per_frame"]["flow_mag"].push_back(v);
  return j.dump(2);
}

std::string to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "frame,psnr_db,ssim,tof,flow_mag\n";
  for (size_t t = 0; t < r.per_frame_psnr.size(); ++t) {
    os << t << ',' << r.per_frame_psnr[t] << ',' << r.per_frame_ssim[t] << ',';
    if (t < r.per_frame_tof.size())
      os << r.per_frame_tof[t] << ',' << r.per_frame_flow[t];
    else
      os << ',';
    os << '\n';
  }
  return os.str();
}

}  // namespace umad::metrics
