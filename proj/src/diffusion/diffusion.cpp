#include "vsdf/diffusion/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vsdf/nn/ops.hpp"

namespace vsdf::diffusion {

namespace {

void check_t(const NoiseSchedule& s, int t, const char* what) {
  if (t < 1 || t > s.T) {
    throw std::out_of_range(std::string(what) + ": timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(s.T) + "]");
  }
}

void check_same(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
  if (a.shape != b.shape) {
    throw std::invalid_argument(std::string(what) + ": shape " + nn::shape_to_string(b.shape) + " does not match " +
                                nn::shape_to_string(a.shape));
  }
}

}  // namespace

NoiseSchedule build_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
  if (T < 1) throw std::invalid_argument("schedule: T must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) +
                                ", " + std::to_string(beta_end));
  }
  (void)kind;
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

Tensor<float> q_sample(const Tensor<float>& z0, int t, const Tensor<float>& eps, const NoiseSchedule& s) {
  check_t(s, t, "q_sample");
  check_same(z0, eps, "q_sample");
  const double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1.0 - s.alpha_bar_at(t));
  Tensor<float> out(z0.shape);
  for (std::size_t i = 0; i < z0.numel(); ++i) out[i] = static_cast<float>(a * z0[i] + b * eps[i]);
  return out;
}

Tensor<float> ddpm_step(const Tensor<float>& z_t, int t, const Tensor<float>& eps_hat, const NoiseSchedule& s,
                        const Tensor<float>& noise) {
  check_t(s, t, "ddpm_step");
  check_same(z_t, eps_hat, "ddpm_step");
  const bool add_noise = t > 1;
  if (add_noise) check_same(z_t, noise, "ddpm_step noise");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
  const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
  const double sigma = std::sqrt(s.beta_at(t));
  Tensor<float> out(z_t.shape);
  for (std::size_t i = 0; i < z_t.numel(); ++i) {
    double v = inv_sqrt_alpha * (z_t[i] - coef * eps_hat[i]);
    if (add_noise) v += sigma * noise[i];
    out[i] = static_cast<float>(v);
  }
  return out;
}

Tensor<float> predict_z0(const Tensor<float>& z_t, int t, const Tensor<float>& eps_hat, const NoiseSchedule& s) {
  check_t(s, t, "predict_z0");
  check_same(z_t, eps_hat, "predict_z0");
  const double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1.0 - s.alpha_bar_at(t));
  Tensor<float> out(z_t.shape);
  for (std::size_t i = 0; i < z_t.numel(); ++i) out[i] = static_cast<float>((z_t[i] - b * eps_hat[i]) / a);
  return out;
}

Tensor<float> ddim_step(const Tensor<float>& z_t, int t, int t_prev, const Tensor<float>& eps_hat,
                        const NoiseSchedule& s, double eta, const Tensor<float>& noise) {
  check_t(s, t, "ddim_step");
  if (t_prev < 0 || t_prev >= t) {
    throw std::invalid_argument("ddim_step: invalid step pair t=" + std::to_string(t) +
                                " t_prev=" + std::to_string(t_prev));
  }
  if (eta < 0.0) throw std::invalid_argument("ddim_step: eta must be non-negative");
  check_same(z_t, eps_hat, "ddim_step");
  const double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const bool add_noise = sigma > 0.0;
  if (add_noise) check_same(z_t, noise, "ddim_step noise");
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const double sa_prev = std::sqrt(ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  Tensor<float> out(z_t.shape);
  for (std::size_t i = 0; i < z_t.numel(); ++i) {
    const double z0 = (z_t[i] - sb * eps_hat[i]) / sa;
    double v = sa_prev * z0 + dir * eps_hat[i];
    if (add_noise) v += sigma * noise[i];
    out[i] = static_cast<float>(v);
  }
  return out;
}

std::vector<int> timestep_grid(int T, int num_steps) {
  if (num_steps < 1 || num_steps > T) {
    throw std::invalid_argument("num_steps must be in [1, " + std::to_string(T) + "], got " +
                                std::to_string(num_steps));
  }
  std::vector<int> grid;
  for (int k = num_steps; k >= 0; --k) {
    grid.push_back(static_cast<int>(std::lround(static_cast<double>(k) * T / num_steps)));
  }
  return grid;
}

int snap_to_grid(const std::vector<int>& grid, int t) {
  if (grid.empty()) throw std::invalid_argument("snap_to_grid: empty grid");
  int best = grid.front();
  for (int g : grid) {
    const int d = std::abs(g - t), bd = std::abs(best - t);
    if (d < bd || (d == bd && g < best)) best = g;
  }
  return best;
}

Sampler parse_sampler(const std::string& name) {
  if (name == "ddpm") return Sampler::ddpm;
  if (name == "ddim") return Sampler::ddim;
  throw std::invalid_argument("unknown sampler '" + name + "' (expected ddpm or ddim)");
}

std::string sampler_name(Sampler s) { return s == Sampler::ddpm ? "ddpm" : "ddim"; }

Tensor<float> gaussian_like(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Tensor<float> t(shape);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

Tensor<float> sample_loop(const EpsFn& eps, const NoiseSchedule& s, const SamplerConfig& cfg,
                          const SampleRequest& req) {
  if (cfg.sampler == Sampler::ddpm && cfg.num_steps != s.T) {
    throw std::invalid_argument("ddpm sampler visits every timestep: num_steps must equal T=" + std::to_string(s.T));
  }
  const auto grid = timestep_grid(s.T, cfg.num_steps);
  const int start = req.start_t == 0 ? s.T : req.start_t;
  auto it = std::find(grid.begin(), grid.end(), start);
  if (it == grid.end()) throw std::invalid_argument("start timestep " + std::to_string(start) + " is not on the step grid");

  std::mt19937_64 rng(cfg.seed);
  Tensor<float> z;
  if (req.initial) {
    if (!req.shape.empty() && req.initial->shape != req.shape) throw std::invalid_argument("sample_loop: initial state shape mismatch");
    z = *req.initial;
  } else {
    z = gaussian_like(req.shape, rng);
  }
  const bool stochastic = cfg.sampler == Sampler::ddpm || cfg.eta > 0.0;
  for (; it + 1 != grid.end(); ++it) {
    const int t = *it, t_prev = *(it + 1);
    const Tensor<float> e = eps(z, t);
    Tensor<float> noise;
    if (stochastic) noise = gaussian_like(z.shape, rng);
    z = cfg.sampler == Sampler::ddpm ? ddpm_step(z, t, e, s, noise) : ddim_step(z, t, t_prev, e, s, cfg.eta, noise);
    for (float v : z.data) {
      if (!std::isfinite(v)) throw std::runtime_error("sample_loop: non-finite latent at t=" + std::to_string(t_prev));
    }
    if (req.hook) req.hook(t, t_prev, z);
  }
  return z;
}

NoisedBatch draw_noised_batch(const Tensor<float>& z0, const NoiseSchedule& s, std::mt19937_64& rng) {
  if (z0.rank() < 1 || z0.dim(0) < 1) throw std::invalid_argument("draw_noised_batch: empty batch");
  const int batch = z0.dim(0);
  const std::size_t per = z0.numel() / static_cast<std::size_t>(batch);
  std::uniform_int_distribution<int> pick(1, s.T);
  NoisedBatch nb{Tensor<float>(z0.shape), gaussian_like(z0.shape, rng), {}};
  for (int b = 0; b < batch; ++b) {
    const int t = pick(rng);
    nb.t.push_back(t);
    const double a = std::sqrt(s.alpha_bar_at(t)), c = std::sqrt(1.0 - s.alpha_bar_at(t));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) nb.z_t[i] = static_cast<float>(a * z0[i] + c * nb.eps[i]);
  }
  return nb;
}

Var<float> training_loss(const EpsModel& model, const Tensor<float>& z0, const NoiseSchedule& s,
                         std::mt19937_64& rng) {
  auto nb = draw_noised_batch(z0, s, rng);
  Var<float> pred = model(nn::constant(std::move(nb.z_t)), nb.t);
  if (pred.shape() != nb.eps.shape) {
    throw std::invalid_argument("training_loss: model output " + nn::shape_to_string(pred.shape()) +
                                " does not match latent " + nn::shape_to_string(nb.eps.shape));
  }
  for (float v : pred.value().data) {
    if (!std::isfinite(v)) throw std::runtime_error("training_loss: denoiser produced a non-finite value");
  }
  return nn::mse_loss(pred, nb.eps);
}

}  // namespace vsdf::diffusion
