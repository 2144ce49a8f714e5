#pragma once
// Procedural chair / table / stool shapes with template captions, and the
// JSON-lines dataset manifest.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vsdf/geometry/primitives.hpp"
#include "vsdf/geometry/tsdf.hpp"

namespace vsdf::data {

// Class label = index in this list.
inline const std::vector<std::string>& all_categories() {
  static const std::vector<std::string> k{"chair", "table", "stool"};
  return k;
}
int category_index(const std::string& name);  // -1 if unknown

struct ProceduralShape {
  std::string category;
  geometry::Primitive shape;
  std::vector<std::string> captions;  // detailed first, then "a <category>"
  bool has_back = false;
  int legs = 4;
  bool tall = false;
  bool thin_legs = false;
};

ProceduralShape sample_shape(const std::string& category, std::mt19937_64& rng);

struct ManifestEntry {
  std::string shape_path;  // relative to the manifest directory unless absolute
  std::vector<std::string> captions;
  std::string category;
  std::string split;  // train | val | test
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  int D = 0;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory holding the manifest

  std::filesystem::path resolve(const ManifestEntry& e) const;
  std::vector<const ManifestEntry*> split(const std::string& name) const;
};

// Entries are assigned train/val/test by index: i % 10 == 8 -> val, == 9 -> test.
std::string split_for_index(int i);

// Writes out_dir/shapes/*.tsdf and out_dir/manifest.jsonl. Categories are
// cycled so each gets n/|categories| shapes. Byte-identical for a fixed seed.
DatasetManifest build_procedural_dataset(int n_shapes, const std::vector<std::string>& categories, int D,
                                         std::uint64_t seed, const std::filesystem::path& out_dir);

// First line: {"format_version", "seed", "D"}; then one entry per line.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
// Throws with the line number on malformed input and names missing shape files.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true);

struct LoadedShape {
  geometry::TsdfGrid grid;
  std::vector<std::string> captions;
  int label = -1;
};
std::vector<LoadedShape> load_shapes(const DatasetManifest& m, const std::string& split);

}  // namespace vsdf::data
