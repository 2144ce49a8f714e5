#include "vsdf/geometry/primitives.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace vsdf::geometry {

namespace {

double length3(double x, double y, double z) { return std::sqrt(x * x + y * y + z * z); }

}  // namespace

double Primitive::sdf(const std::array<double, 3>& p) const {
  const double x = p[0] - center[0], y = p[1] - center[1], z = p[2] - center[2];
  switch (kind) {
    case Kind::kSphere:
      return length3(x, y, z) - size[0];
    case Kind::kBox: {
      const double qx = std::abs(x) - size[0], qy = std::abs(y) - size[1], qz = std::abs(z) - size[2];
      return length3(std::max(qx, 0.0), std::max(qy, 0.0), std::max(qz, 0.0)) +
             std::min(std::max({qx, qy, qz}), 0.0);
    }
    case Kind::kCylinder: {
      const double dr = std::hypot(x, z) - size[0], dy = std::abs(y) - size[1];
      return std::hypot(std::max(dr, 0.0), std::max(dy, 0.0)) + std::min(std::max(dr, dy), 0.0);
    }
    case Kind::kUnion: {
      double d = std::numeric_limits<double>::infinity();
      for (const auto& c : children) d = std::min(d, c.sdf(p));
      return d;
    }
    case Kind::kDifference:
      return std::max(children[0].sdf(p), -children[1].sdf(p));
  }
  return 0.0;
}

std::string Primitive::to_string() const {
  std::ostringstream os;
  os.precision(6);
  auto centered = [&] {
    if (center != std::array<double, 3>{0, 0, 0}) os << ", " << center[0] << ", " << center[1] << ", " << center[2];
  };
  switch (kind) {
    case Kind::kSphere:
      os << "sphere(" << size[0];
      centered();
      os << ')';
      break;
    case Kind::kBox:
      os << "box(" << size[0] << ", " << size[1] << ", " << size[2];
      centered();
      os << ')';
      break;
    case Kind::kCylinder:
      os << "cylinder(" << size[0] << ", " << size[1];
      centered();
      os << ')';
      break;
    case Kind::kUnion:
    case Kind::kDifference:
      os << (kind == Kind::kUnion ? "union(" : "difference(");
      for (std::size_t i = 0; i < children.size(); ++i) os << (i ? ", " : "") << children[i].to_string();
      os << ')';
      break;
  }
  return os.str();
}

Primitive sphere(double r, std::array<double, 3> c) {
  if (!(r > 0)) throw std::invalid_argument("sphere radius must be positive");
  Primitive p;
  p.kind = Primitive::Kind::kSphere;
  p.size = {r, 0, 0};
  p.center = c;
  return p;
}

Primitive box(double hx, double hy, double hz, std::array<double, 3> c) {
  if (!(hx > 0 && hy > 0 && hz > 0)) throw std::invalid_argument("box half extents must be positive");
  Primitive p;
  p.kind = Primitive::Kind::kBox;
  p.size = {hx, hy, hz};
  p.center = c;
  return p;
}

Primitive cylinder(double r, double half_height, std::array<double, 3> c) {
  if (!(r > 0 && half_height > 0)) throw std::invalid_argument("cylinder dimensions must be positive");
  Primitive p;
  p.kind = Primitive::Kind::kCylinder;
  p.size = {r, half_height, 0};
  p.center = c;
  return p;
}

Primitive csg_union(std::vector<Primitive> parts) {
  if (parts.empty()) throw std::invalid_argument("union needs at least one operand");
  Primitive p;
  p.kind = Primitive::Kind::kUnion;
  p.children = std::move(parts);
  return p;
}

Primitive csg_difference(Primitive a, Primitive b) {
  Primitive p;
  p.kind = Primitive::Kind::kDifference;
  p.children = {std::move(a), std::move(b)};
  return p;
}

namespace {

class Parser {
 public:
  explicit Parser(const std::string& s) : s_(s) {}

  Primitive parse() {
    Primitive p = primitive();
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters");
    return p;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw std::invalid_argument("primitive spec: " + what + " at offset " + std::to_string(pos_) + " in '" + s_ + "'");
  }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  bool peek(char c) {
    skip_ws();
    return pos_ < s_.size() && s_[pos_] == c;
  }

  void expect(char c) {
    if (!peek(c)) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string identifier() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalpha(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) ++pos_;
    if (start == pos_) fail("expected a primitive name");
    return s_.substr(start, pos_ - start);
  }

  double number() {
    skip_ws();
    const char* begin = s_.c_str() + pos_;
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin) fail("expected a number");
    pos_ += static_cast<std::size_t>(end - begin);
    if (!std::isfinite(v)) fail("non-finite number");
    return v;
  }

  std::vector<double> numbers() {
    std::vector<double> out{number()};
    while (peek(',')) {
      ++pos_;
      out.push_back(number());
    }
    return out;
  }

  static std::array<double, 3> center_of(const std::vector<double>& a, std::size_t from) {
    return {a[from], a[from + 1], a[from + 2]};
  }

  Primitive primitive() {
    const std::string name = identifier();
    expect('(');
    Primitive p;
    if (name == "sphere" || name == "box" || name == "cylinder") {
      const auto a = numbers();
      const std::size_t base = name == "sphere" ? 1 : (name == "box" ? 3 : 2);
      if (a.size() != base && a.size() != base + 3) {
        fail(name + " takes " + std::to_string(base) + " or " + std::to_string(base + 3) + " arguments");
      }
      const std::array<double, 3> c = a.size() == base ? std::array<double, 3>{0, 0, 0} : center_of(a, base);
      if (name == "sphere") p = sphere(a[0], c);
      if (name == "box") p = box(a[0], a[1], a[2], c);
      if (name == "cylinder") p = cylinder(a[0], a[1], c);
    } else if (name == "union" || name == "difference") {
      std::vector<Primitive> parts{primitive()};
      while (peek(',')) {
        ++pos_;
        parts.push_back(primitive());
      }
      if (name == "difference") {
        if (parts.size() != 2) fail("difference takes exactly two operands");
        p = csg_difference(std::move(parts[0]), std::move(parts[1]));
      } else {
        p = csg_union(std::move(parts));
      }
    } else {
      throw std::invalid_argument("unknown primitive '" + name + "'");
    }
    expect(')');
    return p;
  }

  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

Primitive parse_primitive(const std::string& text) { return Parser(text).parse(); }

TsdfGrid analytic_sdf(const Primitive& prim, int D, float tau) {
  if (D < 1) throw std::invalid_argument("grid resolution must be positive");
  TsdfGrid g = make_grid(D, tau);
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < D; ++y)
      for (int x = 0; x < D; ++x) {
        const double d = prim.sdf(g.center(x, y, z));
        g.values[g.index(x, y, z)] = static_cast<float>(std::clamp(d, -static_cast<double>(tau), static_cast<double>(tau)));
      }
  return g;
}

}  // namespace vsdf::geometry
