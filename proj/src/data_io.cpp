#include "umad/data/io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace umad::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr float kFlowMagic = 202021.25f;

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_le_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void write_le_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
float read_le_f32(std::istream& is) {
  float v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::int32_t read_le_i32(std::istream& is) {
  std::int32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace

void write_flow_file(const fs::path& path, const FlowField& flow) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_flow_file: cannot open " + path.string());
  Index H = flow.height(), W = flow.width();
  write_le_f32(os, kFlowMagic);
  write_le_i32(os, static_cast<std::int32_t>(W));
  write_le_i32(os, static_cast<std::int32_t>(H));
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      write_le_f32(os, static_cast<float>(flow.u.data[y * W + x]));
      write_le_f32(os, static_cast<float>(flow.v.data[y * W + x]));
    }
}

FlowField read_flow_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_flow_file: cannot open " + path.string());
  float magic = read_le_f32(is);
  if (magic != kFlowMagic)
    throw FormatError("read_flow_file: bad magic in " + path.string());
  Index W = read_le_i32(is);
  Index H = read_le_i32(is);
  if (W < 1 || H < 1) throw FormatError("read_flow_file: bad dimensions");
  FlowField f = FlowField::zeros(H, W);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      f.u.data[y * W + x] = read_le_f32(is);
      f.v.data[y * W + x] = read_le_f32(is);
    }
  if (!is) throw FormatError("read_flow_file: truncated file");
  return f;
}

void write_ppm(const fs::path& path, const Tensor& frame) {
  Index C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  require(C == 3, "write_ppm: expected 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path.string());
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c) {
        double v = frame.data[(c * H + y) * W + x];
        v = std::min(1.0, std::max(0.0, v));
        row[static_cast<size_t>(x * 3 + c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P6") throw FormatError("read_ppm: not a P6 file: " + path.string());
  Index W, H, maxval;
  is >> W >> H >> maxval;
  if (maxval != 255) throw FormatError("read_ppm: expected 8-bit file");
  is.get();  // single whitespace after header
  Tensor t = Tensor::zeros({3, H, W});
  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (Index y = 0; y < H; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!is) throw FormatError("read_ppm: truncated file");
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c)
        t.data[(c * H + y) * W + x] =
            static_cast<double>(row[static_cast<size_t>(x * 3 + c)]) / 255.0;
  }
  return t;
}

void write_frames(const fs::path& dir, const FrameSequence& seq) {
  fs::create_directories(dir);
  char name[32];
  for (Index t = 0; t < seq.length(); ++t) {
    std::snprintf(name, sizeof(name), "frame_%06d.ppm", static_cast<int>(t));
    write_ppm(dir / name, seq.frames[static_cast<size_t>(t)]);
  }
}

FrameSequence read_frames(const fs::path& dir) {
  FrameSequence seq;
  char name[32];
  for (Index t = 0;; ++t) {
    std::snprintf(name, sizeof(name), "frame_%06d.ppm", static_cast<int>(t));
    fs::path p = dir / name;
    if (!fs::exists(p)) break;
    seq.frames.push_back(read_ppm(p));
  }
  require(!seq.frames.empty(), "read_frames: no frames found");
  return seq;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  json j;
  j["entries"] = json::array();
  for (const auto& e : m.entries) {
    json je;
    je["clean_dir"] = e.clean_dir;
    je["degraded_dir"] = e.degraded_dir;
    if (!e.flow_dir.empty()) je["flow_dir"] = e.flow_dir;
    je["T"] = e.T;
    je["H"] = e.H;
    je["W"] = e.W;
    je["degradation"] = {{"noise_sigma", e.degradation.noise_sigma},
                         {"blur_sigma", e.degradation.blur_sigma},
                         {"quality_q", e.degradation.quality_q},
                         {"flicker_amp", e.degradation.flicker_amp}};
    j["entries"].push_back(je);
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_manifest: cannot open " + path.string());
  os << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_manifest: cannot open " + path.string());
  json j = json::parse(is);
  DatasetManifest m;
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.clean_dir = je.at("clean_dir");
    e.degraded_dir = je.at("degraded_dir");
    e.flow_dir = je.value("flow_dir", "");
    e.T = je.at("T");
    e.H = je.at("H");
    e.W = je.at("W");
    const auto& jd = je.at("degradation");
    e.degradation.noise_sigma = jd.value("noise_sigma", 0.0);
    e.degradation.blur_sigma = jd.value("blur_sigma", 0.0);
    e.degradation.quality_q = jd.value("quality_q", 1.0);
    e.degradation.flicker_amp = jd.value("flicker_amp", 0.0);
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace umad::data
