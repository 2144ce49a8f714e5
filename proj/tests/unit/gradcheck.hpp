#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "vsdf/nn/autograd.hpp"
#include "vsdf/nn/params.hpp"

namespace testutil {

using vsdf::nn::Tensor;
using vsdf::nn::Var;

inline Tensor<double> random_tensor(const vsdf::nn::Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.data) v = d(rng);
  return t;
}

// Worst relative error between the autograd gradient of a scalar function and
// central differences, over every element of every input.
inline double max_grad_error(const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                             std::vector<Tensor<double>> inputs, double h = 1e-5) {
  std::vector<Var<double>> vars;
  for (auto& t : inputs) vars.push_back(vsdf::nn::parameter(t));
  auto y = f(vars);
  vsdf::nn::backward(y);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].numel(); ++k) {
      auto eval = [&](double delta) {
        std::vector<Var<double>> vs;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          auto t = inputs[j];
          if (j == i) t[k] += delta;
          vs.push_back(vsdf::nn::constant(t));
        }
        return f(vs).value()[0];
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double an = vars[i].grad().empty() ? 0.0 : vars[i].grad()[k];
      const double err = std::abs(fd - an) / std::max(1e-3, std::abs(fd) + std::abs(an));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace testutil

namespace testutil {

// Central-difference check of d(loss)/d(param) on `count` scalars picked at
// random across the whole store. Returns the worst relative error.
template <typename Loss>
double param_slice_grad_error(vsdf::nn::ParamStore<double>& ps, Loss&& loss, int count, double h,
                              std::mt19937_64& rng) {
  ps.zero_grad();
  auto y = loss(ps);
  vsdf::nn::backward(y);
  const std::size_t total = ps.count();
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  double worst = 0.0;
  for (int n = 0; n < count; ++n) {
    std::size_t flat = pick(rng), p = 0;
    while (flat >= ps.at(p).value().numel()) flat -= ps.at(p++).value().numel();
    auto& value = ps.at(p).mutable_value();
    const double saved = value[flat];
    const double an = ps.at(p).grad().empty() ? 0.0 : ps.at(p).grad()[flat];
    double fp, fm;
    {
      vsdf::nn::NoGradGuard ng;
      value[flat] = saved + h;
      fp = loss(ps).value()[0];
      value[flat] = saved - h;
      fm = loss(ps).value()[0];
      value[flat] = saved;
    }
    const double fd = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(fd - an) / std::max(1e-3, std::abs(fd) + std::abs(an)));
  }
  return worst;
}

}  // namespace testutil
