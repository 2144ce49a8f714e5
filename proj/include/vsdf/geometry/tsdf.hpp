#pragma once
// Truncated signed distance grids, patch views and occupancy.
//
// Conventions shared by every module:
//   - values are stored x-fastest: index (z*D + y)*D + x
//   - voxel (x, y, z) samples the world point origin + (i + 0.5) * voxel_size
//   - the default frame is the unit cube [-0.5, 0.5]^3, y up
//   - negative inside, |v| <= tau

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace vsdf::geometry {

struct TsdfGrid {
  int D = 0;
  float tau = 0.0f;
  float voxel_size = 0.0f;
  std::array<float, 3> origin{-0.5f, -0.5f, -0.5f};
  std::vector<float> values;

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * D + y) * D + x;
  }
  float at(int x, int y, int z) const { return values[index(x, y, z)]; }
  std::array<double, 3> center(int x, int y, int z) const;
  std::size_t size() const { return values.size(); }
};

// Default truncation: three voxels.
inline float default_tau(int D) { return 3.0f / static_cast<float>(D); }

// Unit-cube grid filled with `fill` (defaults to +tau, i.e. empty space).
TsdfGrid make_grid(int D, float tau);
TsdfGrid make_grid(int D, float tau, float fill);

// Throws std::invalid_argument when the grid breaks a type invariant
// (size, finiteness, |v| <= tau).
void check_grid(const TsdfGrid& g);

struct PatchSequence {
  int P = 0;
  int per_side = 0;  // D / P
  // Patch (px, py, pz) is entry (pz*n + py)*n + px; each patch is x-fastest.
  std::vector<std::vector<float>> patches;
  float tau = 0.0f;
  float voxel_size = 0.0f;
  std::array<float, 3> origin{-0.5f, -0.5f, -0.5f};
};

PatchSequence split_patches(const TsdfGrid& g, int P);
TsdfGrid merge_patches(const PatchSequence& ps);

struct OccupancyGrid {
  int R = 0;
  std::vector<std::uint8_t> bits;
  std::size_t count() const;
};

// Source occupancy is v < 0; blocks of (D/R)^3 are occupied if any voxel is.
OccupancyGrid to_occupancy(const TsdfGrid& g, int R);

// "VSDF" | u16 version | u32 D | f32 tau | f32 voxel_size | 3 x f32 origin |
// D^3 f32 values, all little-endian.
void save_tsdf(const TsdfGrid& g, const std::filesystem::path& path);
TsdfGrid load_tsdf(const std::filesystem::path& path);

}  // namespace vsdf::geometry
