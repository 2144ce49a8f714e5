#include "vsdf/nn/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vsdf::nn {

template <typename T>
Var<T> ParamStore<T>::add(const std::string& name, Tensor<T> init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_[name] = params_.size();
  names_.push_back(name);
  params_.push_back(parameter(std::move(init)));
  return params_.back();
}

template <typename T>
const Var<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return params_[it->second];
}

template <typename T>
std::size_t ParamStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.mutable_grad() = Tensor<T>();
}

template class ParamStore<float>;
template class ParamStore<double>;

template <typename T>
Tensor<T> uniform_init(const Shape& shape, int fan_in, std::mt19937_64& rng, double gain) {
  const double a = gain / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

template Tensor<float> uniform_init<float>(const Shape&, int, std::mt19937_64&, double);
template Tensor<double> uniform_init<double>(const Shape&, int, std::mt19937_64&, double);

Adam::Adam(ParamStore<float>& params, AdamConfig cfg) : params_(params), cfg_(cfg) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_.emplace_back(params_.at(i).numel(), 0.0f);
    v_.emplace_back(params_.at(i).numel(), 0.0f);
  }
}

double Adam::current_lr() const {
  if (cfg_.total_steps <= 0) return cfg_.lr;
  const double frac = std::min(1.0, static_cast<double>(t_) / static_cast<double>(cfg_.total_steps));
  return cfg_.lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

double Adam::step() {
  double sq = 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_.at(i).grad();
    for (float v : g.data) sq += static_cast<double>(v) * v;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient norm");
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(cfg_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_.at(i);
    const auto& g = p.grad();
    if (g.empty()) continue;
    auto& w = p.mutable_value();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.numel(); ++k) {
      const float gk = static_cast<float>(g[k] * clip);
      m[k] = b1 * m[k] + (1.0f - b1) * gk;
      v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
      w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
  params_.zero_grad();
  return norm;
}

namespace {

constexpr char kMagic[4] = {'V', 'W', 'T', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("weights file truncated");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_weights(const ParamStore<float>& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.at(i).value();
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

void load_weights(ParamStore<float>& params, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error(path.string() + ": not a weights file");
  }
  if (get_u32(is) != kVersion) throw std::runtime_error(path.string() + ": unsupported weights version");
  const std::uint32_t count = get_u32(is);
  if (count != params.size()) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(params.size()) + " tensors, found " +
                             std::to_string(count));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(get_u32(is));
    for (auto& d : shape) d = static_cast<int>(get_u32(is));
    auto& dst = const_cast<Var<float>&>(params.get(name)).mutable_value();
    if (dst.shape != shape) {
      throw std::runtime_error(path.string() + ": shape mismatch for " + name + ": " + shape_to_string(shape) +
                               " vs " + shape_to_string(dst.shape));
    }
    for (auto& v : dst.data) {
      const std::uint32_t bits = get_u32(is);
      std::memcpy(&v, &bits, 4);
    }
  }
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (stream * 0xd1342543de82ef95ULL);
  splitmix64(s);
  return splitmix64(s);
}

}  // namespace vsdf::nn
