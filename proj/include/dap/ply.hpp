#pragma once

#include <filesystem>

#include "dap/geom.hpp"

namespace dap {

enum class PlyFormat { ascii, binary_little_endian };

// Writes per-vertex `x y z nx ny nz` plus `score` when the cloud carries one.
void write_ply(const std::filesystem::path& path, const PointCloud& pc, PlyFormat format = PlyFormat::ascii);

// Reads the vertex element of an ASCII or little-endian binary PLY file.
// Positions and normals are required; a `score` property is optional.
// Other elements are ignored.
PointCloud read_ply(const std::filesystem::path& path);

}  // namespace dap
