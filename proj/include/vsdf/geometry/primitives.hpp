#pragma once
// Analytic shapes used as oracles and as the procedural dataset source.
//
// Text form (whitespace ignored):
//   sphere(r[, cx, cy, cz])
//   box(hx, hy, hz[, cx, cy, cz])
//   cylinder(r, half_height[, cx, cy, cz])      axis along y
//   union(a, b, ...)    difference(a, b)

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "vsdf/geometry/tsdf.hpp"

namespace vsdf::geometry {

struct Primitive {
  enum class Kind { kSphere, kBox, kCylinder, kUnion, kDifference };
  Kind kind = Kind::kSphere;
  std::array<double, 3> center{0, 0, 0};
  std::array<double, 3> size{0, 0, 0};  // sphere: r; box: half extents; cylinder: r, half height
  std::vector<Primitive> children;

  double sdf(const std::array<double, 3>& p) const;
  std::string to_string() const;
};

Primitive sphere(double r, std::array<double, 3> c = {0, 0, 0});
Primitive box(double hx, double hy, double hz, std::array<double, 3> c = {0, 0, 0});
Primitive cylinder(double r, double half_height, std::array<double, 3> c = {0, 0, 0});
Primitive csg_union(std::vector<Primitive> parts);
Primitive csg_difference(Primitive a, Primitive b);

// Throws std::invalid_argument on syntax errors or unknown primitive names.
Primitive parse_primitive(const std::string& text);

// Clamped SDF of `prim` at the voxel centers of a unit-cube D^3 grid.
TsdfGrid analytic_sdf(const Primitive& prim, int D, float tau);

}  // namespace vsdf::geometry
