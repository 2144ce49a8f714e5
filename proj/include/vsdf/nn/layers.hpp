#pragma once
// Parameter registration and application helpers. A layer named "foo" owns
// "foo.weight" and, optionally, "foo.bias" (norms: "foo.gamma", "foo.beta").

#include <random>
#include <string>

#include "vsdf/nn/ops.hpp"
#include "vsdf/nn/params.hpp"

namespace vsdf::nn {

template <typename T>
void add_conv(ParamStore<T>& ps, const std::string& name, int co, int ci, int k, std::mt19937_64& rng,
              double gain = 1.0) {
  const int fan_in = ci * k * k * k;
  ps.add(name + ".weight", uniform_init<T>({co, ci, k, k, k}, fan_in, rng, gain));
  ps.add(name + ".bias", Tensor<T>({co}));
}

template <typename T>
void add_linear(ParamStore<T>& ps, const std::string& name, int dout, int din, std::mt19937_64& rng,
                double gain = 1.0, bool bias = true) {
  ps.add(name + ".weight", uniform_init<T>({dout, din}, din, rng, gain));
  if (bias) ps.add(name + ".bias", Tensor<T>({dout}));
}

template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& name, int channels) {
  ps.add(name + ".gamma", Tensor<T>({channels}, T{1}));
  ps.add(name + ".beta", Tensor<T>({channels}));
}

template <typename T>
Var<T> optional_param(const ParamStore<T>& ps, const std::string& name) {
  return ps.contains(name) ? ps.get(name) : Var<T>();
}

template <typename T>
Var<T> apply_conv(const ParamStore<T>& ps, const std::string& name, const Var<T>& x, int stride = 1, int pad = -1) {
  const auto& w = ps.get(name + ".weight");
  if (pad < 0) pad = w.dim(2) / 2;
  return conv3d(x, w, optional_param(ps, name + ".bias"), stride, pad);
}

template <typename T>
Var<T> apply_linear(const ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return linear(x, ps.get(name + ".weight"), optional_param(ps, name + ".bias"));
}

template <typename T>
Var<T> apply_group_norm(const ParamStore<T>& ps, const std::string& name, const Var<T>& x, int groups) {
  return group_norm(x, groups, ps.get(name + ".gamma"), ps.get(name + ".beta"));
}

template <typename T>
Var<T> apply_layer_norm(const ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return layer_norm(x, ps.get(name + ".gamma"), ps.get(name + ".beta"));
}

// Channel layer norm applied independently at every cell of a (B, C, ...) volume.
template <typename T>
Var<T> apply_cell_norm(const ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  const Shape spatial(x.shape().begin() + 2, x.shape().end());
  return from_tokens(apply_layer_norm(ps, name, to_tokens(x)), spatial);
}

// Largest group count <= 8 that divides `channels`.
inline int norm_groups(int channels) {
  for (int g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

}  // namespace vsdf::nn
