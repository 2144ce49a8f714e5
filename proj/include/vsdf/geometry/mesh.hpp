#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "vsdf/geometry/tsdf.hpp"

namespace vsdf::geometry {

struct TriangleMesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<int, 3>> faces;

  double area() const;
  bool is_closed() const;  // every undirected edge shared by exactly two faces
};

TriangleMesh make_icosphere(double radius, int subdivisions, std::array<double, 3> center = {0, 0, 0});
TriangleMesh make_box_mesh(double hx, double hy, double hz);

struct VoxelizeOptions {
  bool normalize = true;  // center, longest bounding-box axis -> 0.9
  bool allow_open_mesh_sign = false;
};

// Brute-force unsigned distance, signed by the generalized winding number.
TsdfGrid voxelize_mesh(const TriangleMesh& mesh, int D, float tau, const VoxelizeOptions& opt = {});

// Marching cubes over voxel centers. Vertices shared by adjacent cells are
// welded; faces are wound so normals point toward positive values.
TriangleMesh extract_isosurface(const TsdfGrid& g, float iso = 0.0f);

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path);
// v and f records only; polygons are fan-triangulated, v/vt/vn and negative
// indices accepted, everything else ignored.
TriangleMesh read_obj(const std::filesystem::path& path);

}  // namespace vsdf::geometry
