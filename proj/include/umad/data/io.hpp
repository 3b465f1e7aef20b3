#pragma once

#include "umad/data/types.hpp"

#include <filesystem>
#include <string>

namespace umad::data {

// Middlebury-style .flo: float32 magic 202021.25, int32 width, int32 height,
// then row-major interleaved (u, v) float32, all little-endian.
void write_flow_file(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flow_file(const std::filesystem::path& path);

// Binary PPM (P6), 8-bit RGB.
void write_ppm(const std::filesystem::path& path, const Tensor& frame);
Tensor read_ppm(const std::filesystem::path& path);

// frame_%06d.ppm under dir
void write_frames(const std::filesystem::path& dir, const FrameSequence& seq);
FrameSequence read_frames(const std::filesystem::path& dir);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace umad::data
