#include "vsdf/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace vsdf::data {

using geometry::Primitive;

namespace {

constexpr double kFloor = -0.45;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Smallest half-extent of any part: about three voxels of full thickness at
// D=32, below that a part barely survives the 32^3 grid.
constexpr double kMinHalf = 0.045;

const char* count_word(int n) { return n == 3 ? "three" : "four"; }

ProceduralShape make_chair(std::mt19937_64& rng) {
  const double sw = uniform(rng, 0.18, 0.26);
  const double st = uniform(rng, kMinHalf, 0.06);
  const double lh = uniform(rng, 0.22, 0.4);
  const double lt = uniform(rng, kMinHalf, 0.075);
  const double bh = uniform(rng, 0.2, 0.35);
  std::vector<Primitive> parts;
  for (int sx : {-1, 1})
    for (int sz : {-1, 1}) {
      parts.push_back(geometry::box(lt, lh / 2, lt, {sx * (sw - lt), kFloor + lh / 2, sz * (sw - lt)}));
    }
  const double seat_y = kFloor + lh + st;
  parts.push_back(geometry::box(sw, st, sw, {0, seat_y, 0}));
  parts.push_back(geometry::box(sw, bh / 2, kMinHalf, {0, seat_y + st + bh / 2, -sw + kMinHalf}));
  ProceduralShape s;
  s.category = "chair";
  s.shape = geometry::csg_union(std::move(parts));
  s.has_back = true;
  s.tall = lh > 0.31;
  s.thin_legs = lt < 0.06;
  s.captions = {std::string("a ") + (s.tall ? "tall" : "short") + " chair with four " + (s.thin_legs ? "thin" : "thick") +
                    " legs and a " + (bh > 0.275 ? "high" : "low") + " back",
                "a chair"};
  return s;
}

ProceduralShape make_table(std::mt19937_64& rng) {
  const double hx = uniform(rng, 0.32, 0.44);
  const double hz = uniform(rng, 0.22, 0.34);
  const double tt = uniform(rng, kMinHalf, 0.06);
  const double lh = uniform(rng, 0.35, 0.75);
  const double lt = uniform(rng, kMinHalf, 0.075);
  std::vector<Primitive> parts;
  for (int sx : {-1, 1})
    for (int sz : {-1, 1}) {
      parts.push_back(geometry::box(lt, lh / 2, lt, {sx * (hx - lt - 0.02), kFloor + lh / 2, sz * (hz - lt - 0.02)}));
    }
  parts.push_back(geometry::box(hx, tt, hz, {0, kFloor + lh + tt, 0}));
  ProceduralShape s;
  s.category = "table";
  s.shape = geometry::csg_union(std::move(parts));
  s.tall = lh > 0.55;
  s.thin_legs = lt < 0.06;
  s.captions = {std::string("a ") + (s.tall ? "tall" : "short") + " table with four " + (s.thin_legs ? "thin" : "thick") +
                    " legs",
                "a table"};
  return s;
}

ProceduralShape make_stool(std::mt19937_64& rng) {
  const double r = uniform(rng, 0.18, 0.26);
  const double st = uniform(rng, kMinHalf, 0.06);
  const double lh = uniform(rng, 0.3, 0.55);
  const double lr = uniform(rng, kMinHalf, 0.07);
  const int legs = std::bernoulli_distribution(0.5)(rng) ? 3 : 4;
  const bool back = std::bernoulli_distribution(0.3)(rng);
  const double bh = uniform(rng, 0.1, 0.18);
  std::vector<Primitive> parts;
  for (int i = 0; i < legs; ++i) {
    const double a = M_PI / 2 + 2 * M_PI * i / legs;
    parts.push_back(geometry::cylinder(lr, lh / 2, {0.75 * r * std::cos(a), kFloor + lh / 2, 0.75 * r * std::sin(a)}));
  }
  const double seat_y = kFloor + lh + st;
  parts.push_back(geometry::cylinder(r, st, {0, seat_y, 0}));
  if (back) parts.push_back(geometry::box(0.8 * r, bh / 2, kMinHalf, {0, seat_y + st + bh / 2, -0.8 * r}));
  ProceduralShape s;
  s.category = "stool";
  s.shape = geometry::csg_union(std::move(parts));
  s.has_back = back;
  s.legs = legs;
  s.tall = lh > 0.425;
  s.thin_legs = lr < 0.0575;
  s.captions = {std::string("a ") + (s.tall ? "tall" : "short") + " round stool with " + count_word(legs) + " " +
                    (s.thin_legs ? "thin" : "thick") + " legs and " + (back ? "a low back" : "no back"),
                "a stool"};
  return s;
}

}  // namespace

int category_index(const std::string& name) {
  const auto& c = all_categories();
  auto it = std::find(c.begin(), c.end(), name);
  return it == c.end() ? -1 : static_cast<int>(it - c.begin());
}

ProceduralShape sample_shape(const std::string& category, std::mt19937_64& rng) {
  if (category == "chair") return make_chair(rng);
  if (category == "table") return make_table(rng);
  if (category == "stool") return make_stool(rng);
  throw std::invalid_argument("unknown category '" + category + "' (expected chair, table or stool)");
}

std::filesystem::path DatasetManifest::resolve(const ManifestEntry& e) const {
  std::filesystem::path p(e.shape_path);
  return p.is_absolute() ? p : root / p;
}

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (name.empty() || e.split == name) out.push_back(&e);
  return out;
}

std::string split_for_index(int i) {
  const int r = i % 10;
  return r == 8 ? "val" : (r == 9 ? "test" : "train");
}

DatasetManifest build_procedural_dataset(int n_shapes, const std::vector<std::string>& categories, int D,
                                         std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (n_shapes < 1) throw std::invalid_argument("dataset build: n must be at least 1");
  if (categories.empty()) throw std::invalid_argument("dataset build: no categories");
  for (const auto& c : categories) {
    if (category_index(c) < 0) throw std::invalid_argument("dataset build: unknown category '" + c + "'");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "shapes", ec);
  if (ec) throw std::runtime_error("dataset build: cannot create " + (out_dir / "shapes").string() + ": " + ec.message());
  DatasetManifest m;
  m.seed = seed;
  m.D = D;
  m.root = out_dir;
  const float tau = geometry::default_tau(D);
  for (int i = 0; i < n_shapes; ++i) {
    const std::string& cat = categories[i % categories.size()];
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i));
    auto shape = sample_shape(cat, rng);
    char name[64];
    std::snprintf(name, sizeof(name), "shapes/%05d_%s.tsdf", i, cat.c_str());
    geometry::save_tsdf(geometry::analytic_sdf(shape.shape, D, tau), out_dir / name);
    m.entries.push_back({name, shape.captions, cat, split_for_index(i)});
  }
  save_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  nlohmann::json head{{"format_version", 1}, {"seed", m.seed}, {"D", m.D}};
  os << head.dump() << '\n';
  for (const auto& e : m.entries) {
    nlohmann::json j{{"shape_path", e.shape_path}, {"captions", e.captions}, {"category", e.category}, {"split", e.split}};
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
    if (!have_header) {
      if (!j.contains("format_version")) throw std::runtime_error(where() + "missing manifest header");
      if (j["format_version"] != 1) throw std::runtime_error(where() + "unsupported manifest version");
      m.seed = j.value("seed", std::uint64_t{0});
      m.D = j.value("D", 0);
      have_header = true;
      continue;
    }
    ManifestEntry e;
    try {
      e.shape_path = j.at("shape_path").get<std::string>();
      e.captions = j.at("captions").get<std::vector<std::string>>();
      e.category = j.at("category").get<std::string>();
      e.split = j.value("split", "train");
    } catch (const nlohmann::json::exception& ex) {
      throw std::runtime_error(where() + "bad entry: " + ex.what());
    }
    if (e.captions.empty()) throw std::runtime_error(where() + "entry has no captions");
    if (e.split != "train" && e.split != "val" && e.split != "test") {
      throw std::runtime_error(where() + "unknown split '" + e.split + "'");
    }
    if (check_files && !std::filesystem::exists(m.resolve(e))) {
      throw std::runtime_error(where() + "missing shape file " + m.resolve(e).string());
    }
    m.entries.push_back(std::move(e));
  }
  if (!have_header) throw std::runtime_error(path.string() + ": empty manifest (no header line)");
  return m;
}

std::vector<LoadedShape> load_shapes(const DatasetManifest& m, const std::string& split) {
  std::vector<LoadedShape> out;
  for (const auto* e : m.split(split)) {
    out.push_back({geometry::load_tsdf(m.resolve(*e)), e->captions, category_index(e->category)});
  }
  return out;
}

}  // namespace vsdf::data
