#include "vsdf/geometry/tsdf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "common/binio.hpp"

namespace vsdf::geometry {

std::array<double, 3> TsdfGrid::center(int x, int y, int z) const {
  return {origin[0] + (x + 0.5) * voxel_size, origin[1] + (y + 0.5) * voxel_size,
          origin[2] + (z + 0.5) * voxel_size};
}

TsdfGrid make_grid(int D, float tau) { return make_grid(D, tau, tau); }

TsdfGrid make_grid(int D, float tau, float fill) {
  if (D <= 0) throw std::invalid_argument("grid resolution must be positive");
  if (!(tau > 0.0f)) throw std::invalid_argument("truncation must be positive");
  TsdfGrid g;
  g.D = D;
  g.tau = tau;
  g.voxel_size = 1.0f / static_cast<float>(D);
  g.values.assign(static_cast<std::size_t>(D) * D * D, std::clamp(fill, -tau, tau));
  return g;
}

void check_grid(const TsdfGrid& g) {
  if (g.D <= 0 || g.values.size() != static_cast<std::size_t>(g.D) * g.D * g.D) {
    throw std::invalid_argument("grid holds " + std::to_string(g.values.size()) + " values, expected D^3 for D=" +
                                std::to_string(g.D));
  }
  for (float v : g.values) {
    if (!std::isfinite(v) || std::abs(v) > g.tau) {
      throw std::invalid_argument("grid value " + std::to_string(v) + " violates |v| <= tau=" + std::to_string(g.tau));
    }
  }
}

PatchSequence split_patches(const TsdfGrid& g, int P) {
  if (P <= 0 || g.D % P != 0) {
    throw std::invalid_argument("patch size " + std::to_string(P) + " does not divide D=" + std::to_string(g.D));
  }
  PatchSequence ps;
  ps.P = P;
  ps.per_side = g.D / P;
  ps.tau = g.tau;
  ps.voxel_size = g.voxel_size;
  ps.origin = g.origin;
  const int n = ps.per_side;
  ps.patches.resize(static_cast<std::size_t>(n) * n * n);
  for (int pz = 0; pz < n; ++pz)
    for (int py = 0; py < n; ++py)
      for (int px = 0; px < n; ++px) {
        auto& patch = ps.patches[(static_cast<std::size_t>(pz) * n + py) * n + px];
        patch.resize(static_cast<std::size_t>(P) * P * P);
        for (int z = 0; z < P; ++z)
          for (int y = 0; y < P; ++y) {
            const float* src = &g.values[g.index(px * P, py * P + y, pz * P + z)];
            std::copy(src, src + P, patch.begin() + (static_cast<std::size_t>(z) * P + y) * P);
          }
      }
  return ps;
}

TsdfGrid merge_patches(const PatchSequence& ps) {
  const std::size_t count = ps.patches.size();
  int n = static_cast<int>(std::lround(std::cbrt(static_cast<double>(count))));
  if (count == 0 || static_cast<std::size_t>(n) * n * n != count) {
    throw std::invalid_argument("patch count " + std::to_string(count) + " is not a perfect cube");
  }
  const int P = ps.P;
  for (const auto& p : ps.patches) {
    if (p.size() != static_cast<std::size_t>(P) * P * P) throw std::invalid_argument("patch has wrong size");
  }
  TsdfGrid g;
  g.D = n * P;
  g.tau = ps.tau;
  g.voxel_size = ps.voxel_size;
  g.origin = ps.origin;
  g.values.resize(static_cast<std::size_t>(g.D) * g.D * g.D);
  for (int pz = 0; pz < n; ++pz)
    for (int py = 0; py < n; ++py)
      for (int px = 0; px < n; ++px) {
        const auto& patch = ps.patches[(static_cast<std::size_t>(pz) * n + py) * n + px];
        for (int z = 0; z < P; ++z)
          for (int y = 0; y < P; ++y) {
            const auto src = patch.begin() + (static_cast<std::size_t>(z) * P + y) * P;
            std::copy(src, src + P, g.values.begin() + g.index(px * P, py * P + y, pz * P + z));
          }
      }
  return g;
}

std::size_t OccupancyGrid::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

OccupancyGrid to_occupancy(const TsdfGrid& g, int R) {
  if (R <= 0 || g.D % R != 0) {
    throw std::invalid_argument("occupancy resolution " + std::to_string(R) + " does not divide D=" +
                                std::to_string(g.D));
  }
  const int f = g.D / R;
  OccupancyGrid o;
  o.R = R;
  o.bits.assign(static_cast<std::size_t>(R) * R * R, 0);
  for (int z = 0; z < g.D; ++z)
    for (int y = 0; y < g.D; ++y)
      for (int x = 0; x < g.D; ++x) {
        if (g.at(x, y, z) < 0.0f) o.bits[(static_cast<std::size_t>(z / f) * R + y / f) * R + x / f] = 1;
      }
  return o;
}

namespace {
constexpr char kMagic[4] = {'V', 'S', 'D', 'F'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

void save_tsdf(const TsdfGrid& g, const std::filesystem::path& path) {
  check_grid(g);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kMagic, 4);
  binio::put_le<std::uint16_t>(os, kVersion);
  binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(g.D));
  binio::put_f32(os, g.tau);
  binio::put_f32(os, g.voxel_size);
  for (float o : g.origin) binio::put_f32(os, o);
  for (float v : g.values) binio::put_f32(os, v);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

TsdfGrid load_tsdf(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  const std::string what = path.string();
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw std::runtime_error(what + ": not a TSDF file");
  }
  const auto version = binio::get_le<std::uint16_t>(is, what);
  if (version != kVersion) throw std::runtime_error(what + ": unsupported TSDF version " + std::to_string(version));
  TsdfGrid g;
  g.D = static_cast<int>(binio::get_le<std::uint32_t>(is, what));
  if (g.D <= 0 || g.D > 1024) throw std::runtime_error(what + ": implausible resolution");
  g.tau = binio::get_f32(is, what);
  g.voxel_size = binio::get_f32(is, what);
  for (auto& o : g.origin) o = binio::get_f32(is, what);
  g.values.resize(static_cast<std::size_t>(g.D) * g.D * g.D);
  for (auto& v : g.values) v = binio::get_f32(is, what);
  check_grid(g);
  return g;
}

}  // namespace vsdf::geometry
