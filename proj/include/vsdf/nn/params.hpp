#pragma once
// Named parameter container shared by all models, plus Adam and the weights
// blob format.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vsdf/nn/autograd.hpp"

namespace vsdf::nn {

template <typename T>
class ParamStore {
 public:
  // Registers a new parameter; names must be unique.
  Var<T> add(const std::string& name, Tensor<T> init);
  const Var<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Var<T>& at(std::size_t i) const { return params_[i]; }
  Var<T>& at(std::size_t i) { return params_[i]; }
  const std::vector<std::string>& names() const { return names_; }
  // Total number of scalars.
  std::size_t count() const;

  void zero_grad();
  // Same names and values in another precision.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.add(names_[i], params_[i].value().template cast<U>());
    return out;
  }
  // Copies values by name; shapes must match and every name must exist.
  template <typename U>
  void assign_from(const ParamStore<U>& other) {
    for (std::size_t i = 0; i < other.size(); ++i) {
      auto& dst = const_cast<Var<T>&>(get(other.name(i))).mutable_value();
      const auto& src = other.at(i).value();
      if (dst.shape != src.shape) throw std::invalid_argument("parameter shape mismatch for " + other.name(i));
      for (std::size_t k = 0; k < src.numel(); ++k) dst[k] = static_cast<T>(src[k]);
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// Fan-in scaled uniform init, U(-a, a) with a = gain / sqrt(fan_in).
template <typename T>
Tensor<T> uniform_init(const Shape& shape, int fan_in, std::mt19937_64& rng, double gain = 1.0);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::int64_t total_steps = 0;  // cosine decay horizon; 0 keeps lr constant
};

class Adam {
 public:
  Adam(ParamStore<float>& params, AdamConfig cfg);
  // Applies one update from the gradients currently held by the parameters,
  // then clears them. Returns the pre-clip gradient norm.
  double step();
  double current_lr() const;
  std::int64_t steps() const { return t_; }

 private:
  ParamStore<float>& params_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// "VWTS" | u32 version | u32 count | per tensor: u32 name_len, name, u32 rank,
// rank x u32 dims, f32 values (little-endian).
void save_weights(const ParamStore<float>& params, const std::filesystem::path& path);
// Fills an already constructed store; names and shapes must match exactly.
void load_weights(ParamStore<float>& params, const std::filesystem::path& path);

// FNV-1a 64-bit, used for config digests and caption hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& s);
std::uint64_t splitmix64(std::uint64_t& state);
// Deterministic child seed for a named purpose.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace vsdf::nn
