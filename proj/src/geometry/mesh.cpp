#include "vsdf/geometry/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "mc_tables.hpp"

namespace vsdf::geometry {

namespace {

using Vec = std::array<double, 3>;

Vec sub(const Vec& a, const Vec& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec add(const Vec& a, const Vec& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec mul(const Vec& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot(const Vec& a, const Vec& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec cross(const Vec& a, const Vec& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

// Closest point on triangle (Ericson, Real-Time Collision Detection 5.1.5).
double point_triangle_distance(const Vec& p, const Vec& a, const Vec& b, const Vec& c) {
  const Vec ab = sub(b, a), ac = sub(c, a), ap = sub(p, a);
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0 && d2 <= 0) return norm(ap);
  const Vec bp = sub(p, b);
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0 && d4 <= d3) return norm(bp);
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return norm(sub(p, add(a, mul(ab, d1 / (d1 - d3)))));
  const Vec cp = sub(p, c);
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0 && d5 <= d6) return norm(cp);
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return norm(sub(p, add(a, mul(ac, d2 / (d2 - d6)))));
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return norm(sub(p, add(b, mul(sub(c, b), w))));
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return norm(sub(p, add(a, add(mul(ab, v), mul(ac, w)))));
}

// Signed solid angle of triangle abc seen from p (Van Oosterom and Strackee).
double solid_angle(const Vec& p, const Vec& a, const Vec& b, const Vec& c) {
  const Vec ra = sub(a, p), rb = sub(b, p), rc = sub(c, p);
  const double la = norm(ra), lb = norm(rb), lc = norm(rc);
  const double num = dot(ra, cross(rb, rc));
  const double den = la * lb * lc + dot(ra, rb) * lc + dot(rb, rc) * la + dot(rc, ra) * lb;
  return 2.0 * std::atan2(num, den);
}

std::uint64_t edge_key(int a, int b) {
  const auto lo = static_cast<std::uint64_t>(std::min(a, b)), hi = static_cast<std::uint64_t>(std::max(a, b));
  return (lo << 32) | hi;
}

}  // namespace

double TriangleMesh::area() const {
  double s = 0;
  for (const auto& f : faces) {
    s += 0.5 * norm(cross(sub(vertices[f[1]], vertices[f[0]]), sub(vertices[f[2]], vertices[f[0]])));
  }
  return s;
}

bool TriangleMesh::is_closed() const {
  if (faces.empty()) return false;
  std::unordered_map<std::uint64_t, int> uses;
  for (const auto& f : faces)
    for (int e = 0; e < 3; ++e) ++uses[edge_key(f[e], f[(e + 1) % 3])];
  return std::all_of(uses.begin(), uses.end(), [](const auto& kv) { return kv.second == 2; });
}

TriangleMesh make_icosphere(double radius, int subdivisions, std::array<double, 3> center) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriangleMesh m;
  m.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (auto& v : m.vertices) v = mul(v, 1.0 / norm(v));
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::uint64_t, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = edge_key(a, b);
      if (auto it = mid.find(key); it != mid.end()) return it->second;
      Vec p = mul(add(m.vertices[a], m.vertices[b]), 0.5);
      m.vertices.push_back(mul(p, 1.0 / norm(p)));
      return mid[key] = static_cast<int>(m.vertices.size()) - 1;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& f : m.faces) {
      const int a = midpoint(f[0], f[1]), b = midpoint(f[1], f[2]), c = midpoint(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.faces = std::move(next);
  }
  for (auto& v : m.vertices) v = add(mul(v, radius), center);
  return m;
}

TriangleMesh make_box_mesh(double hx, double hy, double hz) {
  TriangleMesh m;
  for (int i = 0; i < 8; ++i) m.vertices.push_back({(i & 1) ? hx : -hx, (i & 2) ? hy : -hy, (i & 4) ? hz : -hz});
  // Outward winding.
  m.faces = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
             {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  return m;
}

TsdfGrid voxelize_mesh(const TriangleMesh& mesh, int D, float tau, const VoxelizeOptions& opt) {
  if (D < 8) throw std::invalid_argument("voxelize_mesh: D must be at least 8");
  if (mesh.faces.empty()) throw std::invalid_argument("voxelize_mesh: mesh has no faces");
  for (const auto& v : mesh.vertices) {
    if (!std::isfinite(v[0]) || !std::isfinite(v[1]) || !std::isfinite(v[2])) {
      throw std::invalid_argument("voxelize_mesh: non-finite vertex");
    }
  }
  for (const auto& f : mesh.faces) {
    for (int i : f) {
      if (i < 0 || static_cast<std::size_t>(i) >= mesh.vertices.size()) {
        throw std::invalid_argument("voxelize_mesh: face index out of range");
      }
    }
  }
  if (!opt.allow_open_mesh_sign && !mesh.is_closed()) {
    throw std::invalid_argument("voxelize_mesh: cannot sign distances of an open mesh");
  }

  std::vector<Vec> verts = mesh.vertices;
  if (opt.normalize) {
    Vec lo = verts[0], hi = verts[0];
    for (const auto& v : verts)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], v[a]);
        hi[a] = std::max(hi[a], v[a]);
      }
    const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    if (!(extent > 0)) throw std::invalid_argument("voxelize_mesh: degenerate bounding box");
    const Vec mid = mul(add(lo, hi), 0.5);
    for (auto& v : verts) v = mul(sub(v, mid), 0.9 / extent);
  }

  struct Tri {
    Vec a, b, c, lo, hi;
  };
  std::vector<Tri> tris;
  tris.reserve(mesh.faces.size());
  for (const auto& f : mesh.faces) {
    Tri t{verts[f[0]], verts[f[1]], verts[f[2]], {}, {}};
    for (int a = 0; a < 3; ++a) {
      t.lo[a] = std::min({t.a[a], t.b[a], t.c[a]}) - tau;
      t.hi[a] = std::max({t.a[a], t.b[a], t.c[a]}) + tau;
    }
    tris.push_back(t);
  }

  TsdfGrid g = make_grid(D, tau);
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < D; ++y)
      for (int x = 0; x < D; ++x) {
        const Vec p = g.center(x, y, z);
        double dist = tau;
        double omega = 0.0;
        for (const auto& t : tris) {
          omega += solid_angle(p, t.a, t.b, t.c);
          if (p[0] < t.lo[0] || p[0] > t.hi[0] || p[1] < t.lo[1] || p[1] > t.hi[1] || p[2] < t.lo[2] ||
              p[2] > t.hi[2]) {
            continue;
          }
          dist = std::min(dist, point_triangle_distance(p, t.a, t.b, t.c));
        }
        // |w| so either consistent winding works.
        const bool inside = std::abs(omega / (4.0 * M_PI)) > 0.5;
        const double v = std::min(dist, static_cast<double>(tau));
        g.values[g.index(x, y, z)] = static_cast<float>(inside ? -v : v);
      }
  return g;
}

TriangleMesh extract_isosurface(const TsdfGrid& g, float iso) {
  if (!(std::abs(iso) < g.tau)) throw std::invalid_argument("extract_isosurface: |iso| must be below tau");
  TriangleMesh mesh;
  const int D = g.D;
  if (D < 2) return mesh;
  std::unordered_map<std::uint64_t, int> welded;
  static constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                        {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  for (int z = 0; z + 1 < D; ++z)
    for (int y = 0; y + 1 < D; ++y)
      for (int x = 0; x + 1 < D; ++x) {
        float v[8];
        int id[8];
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          const int cx = x + kCorner[c][0], cy = y + kCorner[c][1], cz = z + kCorner[c][2];
          id[c] = static_cast<int>(g.index(cx, cy, cz));
          v[c] = g.values[id[c]];
          if (v[c] < iso) cube |= 1 << c;
        }
        const int edges = detail::kEdgeTable[cube];
        if (edges == 0) continue;
        int vert[12];
        for (int e = 0; e < 12; ++e) {
          if (!(edges & (1 << e))) continue;
          const int c0 = detail::kEdgeCorners[e][0], c1 = detail::kEdgeCorners[e][1];
          const auto key = edge_key(id[c0], id[c1]);
          if (auto it = welded.find(key); it != welded.end()) {
            vert[e] = it->second;
            continue;
          }
          // Interpolate from the lower grid index so shared edges weld to identical points.
          const int a = id[c0] < id[c1] ? c0 : c1, b = a == c0 ? c1 : c0;
          const double t = (iso - v[a]) / static_cast<double>(v[b] - v[a]);
          const Vec pa = g.center(x + kCorner[a][0], y + kCorner[a][1], z + kCorner[a][2]);
          const Vec pb = g.center(x + kCorner[b][0], y + kCorner[b][1], z + kCorner[b][2]);
          mesh.vertices.push_back(add(pa, mul(sub(pb, pa), t)));
          vert[e] = welded[key] = static_cast<int>(mesh.vertices.size()) - 1;
        }
        for (int i = 0; detail::kTriTable[cube][i] != -1; i += 3) {
          // The table winds triangles clockwise seen from outside; reverse them.
          std::array<int, 3> f{vert[detail::kTriTable[cube][i]], vert[detail::kTriTable[cube][i + 2]],
                               vert[detail::kTriTable[cube][i + 1]]};
          if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
          const Vec n = cross(sub(mesh.vertices[f[1]], mesh.vertices[f[0]]), sub(mesh.vertices[f[2]], mesh.vertices[f[0]]));
          if (norm(n) <= 1e-14) continue;
          mesh.faces.push_back(f);
        }
      }
  return mesh;
}

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(7);
  for (const auto& v : mesh.vertices) os << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
  for (const auto& f : mesh.faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

TriangleMesh read_obj(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  TriangleMesh m;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + what);
  };
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec v;
      if (!(ls >> v[0] >> v[1] >> v[2])) fail("bad vertex");
      m.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      for (std::string tok; ls >> tok;) {
        const std::string head = tok.substr(0, tok.find('/'));
        long i = 0;
        try {
          std::size_t used = 0;
          i = std::stol(head, &used);
          if (used != head.size()) fail("bad face index '" + tok + "'");
        } catch (const std::logic_error&) {
          fail("bad face index '" + tok + "'");
        }
        const long n = static_cast<long>(m.vertices.size());
        const long k = i > 0 ? i - 1 : n + i;
        if (i == 0 || k < 0 || k >= n) fail("face index " + head + " out of range");
        idx.push_back(static_cast<int>(k));
      }
      if (idx.size() < 3) fail("face with fewer than three vertices");
      for (std::size_t j = 1; j + 1 < idx.size(); ++j) m.faces.push_back({idx[0], idx[j], idx[j + 1]});
    }
  }
  return m;
}

}  // namespace vsdf::geometry
