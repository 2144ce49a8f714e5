#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "vsdf/diffusion/diffusion.hpp"
#include "vsdf/nn/ops.hpp"

using namespace vsdf;
using namespace vsdf::diffusion;

namespace {

Tensor<float> filled(const Shape& shape, std::mt19937_64& rng, float sd = 1.0f) {
  std::normal_distribution<float> nd(0.0f, sd);
  Tensor<float> t(shape);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

double rel_norm_error(const Tensor<float>& a, const Tensor<float>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    den += double(b[i]) * b[i];
  }
  return std::sqrt(num / den);
}

struct Moments {
  double mean = 0, sd = 0;
  std::size_t n = 0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  m.n = v.size();
  for (double x : v) m.mean += x;
  m.mean /= m.n;
  for (double x : v) m.sd += (x - m.mean) * (x - m.mean);
  m.sd = std::sqrt(m.sd / (m.n - 1));
  return m;
}

// Sample mean and sd agree with (mu, sigma) within 3 standard errors.
void check_gaussian(const std::vector<double>& v, double mu, double sigma) {
  auto m = moments(v);
  const double se_mean = sigma / std::sqrt(double(m.n));
  const double se_sd = sigma / std::sqrt(2.0 * (m.n - 1));
  CHECK(std::abs(m.mean - mu) < 3 * se_mean);
  CHECK(std::abs(m.sd - sigma) < 3 * se_sd);
}

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("linear schedule tables") {
  auto s = build_schedule(1000, 1e-4, 0.02);
  REQUIRE(s.alpha_bar.size() == 1001);
  CHECK(s.alpha_bar_at(0) == 1.0);
  CHECK(s.alpha_bar_at(1) == doctest::Approx(0.9999).epsilon(1e-12));
  CHECK(s.beta_at(1000) == doctest::Approx(0.02).epsilon(1e-12));
  // oracle: log-sum of the closed-form betas
  long double log_ab = 0;
  for (int t = 1; t <= 1000; ++t) log_ab += std::log1p(-(1e-4L + (0.02L - 1e-4L) * (t - 1) / 999.0L));
  CHECK(s.alpha_bar_at(1000) == doctest::Approx(static_cast<double>(std::exp(log_ab))).epsilon(1e-9));
  CHECK(s.alpha_bar_at(1000) == doctest::Approx(4.0e-5).epsilon(0.02));
  CHECK(s.alpha_bar_at(1000) < 1e-3);
  for (int t = 1; t <= 1000; ++t) {
    REQUIRE(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    if (t > 1) REQUIRE(s.beta_at(t) >= s.beta_at(t - 1));
  }
  for (auto [b0, b1] : {std::pair{0.0, 0.02}, std::pair{0.03, 0.02}, std::pair{1e-4, 1.0}, std::pair{-1e-4, 0.02}}) {
    CHECK_THROWS_AS(build_schedule(1000, b0, b1), std::invalid_argument);
  }
  CHECK_THROWS_AS(build_schedule(0), std::invalid_argument);
}

TEST_CASE("q_sample closed form") {
  auto s = build_schedule();
  std::mt19937_64 rng(1);
  auto z0 = filled({2, 3, 3, 3}, rng);
  auto zero = Tensor<float>(z0.shape);
  auto zt = q_sample(z0, 300, zero, s);
  for (std::size_t i = 0; i < z0.numel(); ++i) CHECK(zt[i] == doctest::Approx(std::sqrt(s.alpha_bar_at(300)) * z0[i]));

  // at t = T the signal is nearly gone
  double norm = 0;
  for (float v : z0.data) norm += double(v) * v;
  for (auto& v : z0.data) v = static_cast<float>(v / std::sqrt(norm));
  auto eps = filled(z0.shape, rng);
  CHECK(rel_norm_error(q_sample(z0, 1000, eps, s), eps) < 0.01);

  CHECK_THROWS_AS(q_sample(z0, 0, eps, s), std::out_of_range);
  CHECK_THROWS_AS(q_sample(z0, 1001, eps, s), std::out_of_range);
  CHECK_THROWS_AS(q_sample(z0, 5, Tensor<float>({3}), s), std::invalid_argument);
}

TEST_CASE("q_sample moments over many draws") {
  auto s = build_schedule();
  std::mt19937_64 rng(2);
  Tensor<float> z0({4});
  z0.data = {1.5f, -0.5f, 0.0f, 2.0f};
  for (int t : {1, 50, 400, 1000}) {
    std::vector<std::vector<double>> per(4);
    for (int trial = 0; trial < 10000; ++trial) {
      auto zt = q_sample(z0, t, filled({4}, rng), s);
      for (int i = 0; i < 4; ++i) per[i].push_back(zt[i]);
    }
    for (int i = 0; i < 4; ++i) check_gaussian(per[i], std::sqrt(s.alpha_bar_at(t)) * z0[i], std::sqrt(1 - s.alpha_bar_at(t)));
  }
}

TEST_CASE("single-step forward transitions compose to the closed form") {
  auto s = build_schedule();
  std::mt19937_64 rng(3);
  const double z0[3] = {1.0, -2.0, 0.25};
  for (int k : {1, 10, 100}) {
    std::vector<std::vector<double>> per(3);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 10000; ++trial) {
      for (int i = 0; i < 3; ++i) {
        double z = z0[i];
        for (int t = 1; t <= k; ++t) z = std::sqrt(s.alpha_at(t)) * z + std::sqrt(s.beta_at(t)) * nd(rng);
        per[i].push_back(z);
      }
    }
    for (int i = 0; i < 3; ++i) check_gaussian(per[i], std::sqrt(s.alpha_bar_at(k)) * z0[i], std::sqrt(1 - s.alpha_bar_at(k)));
  }
}

TEST_CASE("ddpm step") {
  auto s = build_schedule();
  std::mt19937_64 rng(4);
  auto z0 = filled({4, 4, 4, 4}, rng);
  auto eps = filled(z0.shape, rng);
  auto noise = filled(z0.shape, rng);
  // inversion at t = 1 with the true noise; the noise argument is ignored there
  auto z1 = q_sample(z0, 1, eps, s);
  auto back = ddpm_step(z1, 1, eps, s, noise);
  CHECK(rel_norm_error(back, z0) < 1e-5);
  CHECK(back.data == ddpm_step(z1, 1, eps, s, Tensor<float>()).data);

  // noiseless steps are deterministic
  auto zt = q_sample(z0, 500, eps, s);
  Tensor<float> zero(z0.shape);
  CHECK(ddpm_step(zt, 500, eps, s, zero).data == ddpm_step(zt, 500, eps, s, zero).data);

  // explicit formula at a middle step
  auto out = ddpm_step(zt, 500, eps, s, noise);
  const double a = s.alpha_at(500), ab = s.alpha_bar_at(500), b = s.beta_at(500);
  for (std::size_t i = 0; i < 20; ++i) {
    const double ref = (zt[i] - b / std::sqrt(1 - ab) * eps[i]) / std::sqrt(a) + std::sqrt(b) * noise[i];
    CHECK(out[i] == doctest::Approx(ref).epsilon(1e-6));
  }

  // small beta: the step barely moves the state
  auto z2 = ddpm_step(zt, 2, eps, s, zero);
  CHECK(rel_norm_error(z2, zt) < 10 * std::sqrt(s.beta_at(2)));

  CHECK_THROWS_AS(ddpm_step(zt, 0, eps, s, zero), std::out_of_range);
  CHECK_THROWS_AS(ddpm_step(zt, 1001, eps, s, zero), std::out_of_range);
}

TEST_CASE("ddim step with the true noise lands on the forward marginal") {
  auto s = build_schedule();
  std::mt19937_64 rng(5);
  auto z0 = filled({4, 4, 4, 4}, rng);
  auto eps = filled(z0.shape, rng);
  for (auto [t, tp] : {std::pair{1000, 980}, std::pair{1000, 0}, std::pair{700, 300}, std::pair{20, 1},
                       std::pair{2, 1}, std::pair{1, 0}, std::pair{500, 499}, std::pair{900, 10}}) {
    CAPTURE(t);
    CAPTURE(tp);
    auto zt = q_sample(z0, t, eps, s);
    auto out = ddim_step(zt, t, tp, eps, s, 0.0, Tensor<float>());
    auto ref = tp == 0 ? z0 : q_sample(z0, tp, eps, s);
    CHECK(rel_norm_error(out, ref) < 1e-5);
  }
  // t_prev = 0 returns the z0 prediction
  auto zt = q_sample(z0, 600, eps, s);
  auto other = filled(z0.shape, rng);
  CHECK(ddim_step(zt, 600, 0, other, s, 0.0, Tensor<float>()).data == predict_z0(zt, 600, other, s).data);

  CHECK(ddim_step(zt, 600, 400, other, s, 0.0, Tensor<float>()).data ==
        ddim_step(zt, 600, 400, other, s, 0.0, Tensor<float>()).data);
  CHECK_THROWS_AS(ddim_step(zt, 600, 600, eps, s, 0.0, {}), std::invalid_argument);
  CHECK_THROWS_AS(ddim_step(zt, 600, -1, eps, s, 0.0, {}), std::invalid_argument);
  CHECK_THROWS_AS(ddim_step(zt, 1001, 3, eps, s, 0.0, {}), std::out_of_range);
  // eta > 0 needs a noise field
  CHECK_THROWS_AS(ddim_step(zt, 600, 400, eps, s, 1.0, Tensor<float>()), std::invalid_argument);
}

TEST_CASE("ddim with eta = 1 over consecutive steps matches the posterior variance") {
  // sigma^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t for t_prev = t - 1
  auto s = build_schedule();
  Tensor<float> z({1}), e({1}), n({1});
  z[0] = 0.3f;
  e[0] = 0.0f;
  for (int t : {2, 100, 999}) {
    n[0] = 0.0f;
    auto base = ddim_step(z, t, t - 1, e, s, 1.0, n);
    n[0] = 1.0f;
    auto shifted = ddim_step(z, t, t - 1, e, s, 1.0, n);
    const double sigma = std::sqrt((1 - s.alpha_bar_at(t - 1)) / (1 - s.alpha_bar_at(t)) * s.beta_at(t));
    CHECK(shifted[0] - base[0] == doctest::Approx(sigma).epsilon(1e-4));
  }
}

TEST_CASE("timestep grid") {
  auto g = timestep_grid(1000, 50);
  REQUIRE(g.size() == 51);
  CHECK(g.front() == 1000);
  CHECK(g.back() == 0);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 1000 - 20 * static_cast<int>(i));
  CHECK(timestep_grid(10, 3) == std::vector<int>{10, 7, 3, 0});
  auto full = timestep_grid(1000, 1000);
  for (int i = 0; i <= 1000; ++i) REQUIRE(full[i] == 1000 - i);
  CHECK(snap_to_grid(g, 1000) == 1000);
  CHECK(snap_to_grid(g, 999) == 1000);
  CHECK(snap_to_grid(g, 989) == 980);
  CHECK(snap_to_grid(g, 990) == 980);
  CHECK(snap_to_grid(g, 700) == 700);
  CHECK(snap_to_grid(g, 9) == 0);
  CHECK(snap_to_grid(g, 0) == 0);
  CHECK(snap_to_grid(g, 5000) == 1000);
  CHECK_THROWS_AS(timestep_grid(1000, 0), std::invalid_argument);
  CHECK_THROWS_AS(timestep_grid(1000, 1001), std::invalid_argument);
  CHECK(parse_sampler("ddim") == Sampler::ddim);
  CHECK_THROWS_WITH(parse_sampler("euler"), doctest::Contains("euler"));
}

TEST_CASE("training loss with oracle and constant denoisers") {
  auto s = build_schedule();
  std::mt19937_64 data_rng(6);
  auto z0 = filled({8, 4, 4, 4, 4}, data_rng);

  // recovers eps exactly from z_t, t and the known z0
  EpsModel oracle = [&](const Var<float>& zt, const std::vector<int>& t) {
    const std::size_t per = z0.numel() / 8;
    Tensor<float> e(z0.shape);
    for (int b = 0; b < 8; ++b) {
      const double a = std::sqrt(s.alpha_bar_at(t[b])), c = std::sqrt(1 - s.alpha_bar_at(t[b]));
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) e[i] = static_cast<float>((zt.value()[i] - a * z0[i]) / c);
    }
    return nn::constant(std::move(e));
  };
  std::mt19937_64 rng(7);
  for (int i = 0; i < 5; ++i) CHECK(training_loss(oracle, z0, s, rng).value()[0] < 1e-6);

  EpsModel zero = [](const Var<float>& zt, const std::vector<int>&) { return nn::constant(Tensor<float>(zt.shape())); };
  double mean = 0;
  const int draws = 20;  // 20 x 2048 = 40960 squared normals
  for (int i = 0; i < draws; ++i) {
    const double l = training_loss(zero, z0, s, rng).value()[0];
    CHECK(l >= 0.0);
    mean += l / draws;
  }
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));

  std::vector<int> seen;
  EpsModel spy = [&](const Var<float>& zt, const std::vector<int>& t) {
    seen.insert(seen.end(), t.begin(), t.end());
    return nn::constant(Tensor<float>(zt.shape()));
  };
  for (int i = 0; i < 200; ++i) training_loss(spy, z0, s, rng);
  CHECK(*std::min_element(seen.begin(), seen.end()) >= 1);
  CHECK(*std::max_element(seen.begin(), seen.end()) <= 1000);
  const double tmean = std::accumulate(seen.begin(), seen.end(), 0.0) / seen.size();
  CHECK(tmean == doctest::Approx(500.5).epsilon(0.05));

  EpsModel nan_model = [](const Var<float>& zt, const std::vector<int>&) {
    Tensor<float> e(zt.shape());
    e[0] = std::nanf("");
    return nn::constant(std::move(e));
  };
  CHECK_THROWS_WITH_AS(training_loss(nan_model, z0, s, rng), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("sample loop determinism, hooks and errors") {
  auto s = build_schedule();
  EpsFn eps = [](const Tensor<float>& z, int) {
    Tensor<float> e(z.shape);
    for (std::size_t i = 0; i < z.numel(); ++i) e[i] = 0.5f * z[i];
    return e;
  };
  SamplerConfig cfg;
  cfg.seed = 42;
  SampleRequest req{{4, 2, 2, 2}};
  auto a = sample_loop(eps, s, cfg, req);
  auto b = sample_loop(eps, s, cfg, req);
  CHECK(a.data == b.data);
  for (float v : a.data) CHECK(std::isfinite(v));
  cfg.seed = 43;
  CHECK(sample_loop(eps, s, cfg, req).data != a.data);

  std::vector<std::pair<int, int>> steps;
  req.hook = [&](int t, int tp, Tensor<float>&) { steps.emplace_back(t, tp); };
  cfg.num_steps = 10;
  sample_loop(eps, s, cfg, req);
  REQUIRE(steps.size() == 10);
  CHECK(steps.front() == std::pair{1000, 900});
  CHECK(steps.back() == std::pair{100, 0});

  // a hook that pins part of the state sees its edit carried forward
  req.hook = [](int, int, Tensor<float>& z) { z[0] = 0.25f; };
  CHECK(sample_loop(eps, s, cfg, req)[0] == 0.25f);

  // start part-way from a given state
  Tensor<float> init({4, 2, 2, 2});
  steps.clear();
  req.hook = [&](int t, int tp, Tensor<float>&) { steps.emplace_back(t, tp); };
  req.initial = &init;
  req.start_t = 300;
  sample_loop(eps, s, cfg, req);
  CHECK(steps.size() == 3);
  req.start_t = 350;
  CHECK_THROWS_WITH_AS(sample_loop(eps, s, cfg, req), doctest::Contains("grid"), std::invalid_argument);

  cfg.sampler = Sampler::ddpm;
  req.start_t = 0;
  CHECK_THROWS_WITH_AS(sample_loop(eps, s, cfg, req), doctest::Contains("num_steps"), std::invalid_argument);

  EpsFn blowup = [](const Tensor<float>& z, int) {
    Tensor<float> e(z.shape);
    for (auto& v : e.data) v = 1e38f;
    return e;
  };
  cfg = SamplerConfig{};
  CHECK_THROWS_WITH_AS(sample_loop(blowup, s, cfg, {{2, 2}}), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("both samplers reproduce a Gaussian data distribution under its exact score") {
  // For z0 ~ N(m, v) per element the optimal predictor is
  // E[eps | z_t] = sqrt(1 - ab) (z_t - sqrt(ab) m) / (ab v + 1 - ab).
  auto s = build_schedule();
  const double m = 0.7, v = 0.25;
  EpsFn exact = [&](const Tensor<float>& z, int t) {
    const double ab = s.alpha_bar_at(t);
    Tensor<float> e(z.shape);
    for (std::size_t i = 0; i < z.numel(); ++i)
      e[i] = static_cast<float>(std::sqrt(1 - ab) * (z[i] - std::sqrt(ab) * m) / (ab * v + 1 - ab));
    return e;
  };
  for (auto [sampler, eta, steps] : {std::tuple{Sampler::ddpm, 0.0, 1000}, std::tuple{Sampler::ddim, 1.0, 1000},
                                     std::tuple{Sampler::ddim, 0.0, 50}}) {
    CAPTURE(sampler_name(sampler));
    CAPTURE(eta);
    std::vector<double> out;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      SamplerConfig cfg{sampler, steps, eta, 1.0, seed};
      auto z = sample_loop(exact, s, cfg, {{16}});
      out.insert(out.end(), z.data.begin(), z.data.end());
    }
    check_gaussian(out, m, std::sqrt(v));
  }
}

}  // TEST_SUITE
