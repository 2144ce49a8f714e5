#pragma once
// Gaussian diffusion over latent grids: linear beta schedule, closed-form
// forward process, ancestral (DDPM) and DDIM reverse steps, and the
// epsilon-prediction training loss.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vsdf/nn/autograd.hpp"

namespace vsdf::diffusion {

using nn::Shape;
using nn::Tensor;
using nn::Var;

enum class ScheduleKind { linear };

// Tables are indexed by t in [0, T]; entry 0 is the clean state, so
// alpha_bar[0] = 1 and beta[0] = 0.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t)); }
  double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t)); }
  double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
};

NoiseSchedule build_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02,
                             ScheduleKind kind = ScheduleKind::linear);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, 1 <= t <= T.
Tensor<float> q_sample(const Tensor<float>& z0, int t, const Tensor<float>& eps, const NoiseSchedule& s);

// One ancestral step t -> t-1 with variance beta_t. noise is ignored at t = 1.
Tensor<float> ddpm_step(const Tensor<float>& z_t, int t, const Tensor<float>& eps_hat, const NoiseSchedule& s,
                        const Tensor<float>& noise);

// Predicted clean latent from z_t and an epsilon estimate.
Tensor<float> predict_z0(const Tensor<float>& z_t, int t, const Tensor<float>& eps_hat, const NoiseSchedule& s);

// DDIM step t -> t_prev (0 <= t_prev < t <= T). noise may be empty when eta = 0.
Tensor<float> ddim_step(const Tensor<float>& z_t, int t, int t_prev, const Tensor<float>& eps_hat,
                        const NoiseSchedule& s, double eta, const Tensor<float>& noise);

// Descending visit order T = t_0 > t_1 > ... > t_n = 0 with t_k = round((n-k) T / n).
std::vector<int> timestep_grid(int T, int num_steps);
// Nearest grid entry; ties go to the smaller step.
int snap_to_grid(const std::vector<int>& grid, int t);

enum class Sampler { ddpm, ddim };
Sampler parse_sampler(const std::string& name);
std::string sampler_name(Sampler s);

struct SamplerConfig {
  Sampler sampler = Sampler::ddim;
  int num_steps = 50;
  double eta = 0.0;
  double guidance_scale = 1.0;
  std::uint64_t seed = 0;
};

// Epsilon estimate for a single latent at timestep t (guidance already folded in).
using EpsFn = std::function<Tensor<float>(const Tensor<float>& z_t, int t)>;
// Called after every reverse step with the new state at t_prev; may edit it.
using StepHook = std::function<void(int t, int t_prev, Tensor<float>& z)>;

struct SampleRequest {
  Shape shape;
  // Start from this state at start_t instead of z_T ~ N(0, I). start_t must lie
  // on the step grid; 0 means T.
  const Tensor<float>* initial = nullptr;
  int start_t = 0;
  StepHook hook;
};

// Runs the reverse process. Every random draw comes from cfg.seed: first z_T
// (unless an initial state is given), then one noise field per stochastic step.
Tensor<float> sample_loop(const EpsFn& eps, const NoiseSchedule& s, const SamplerConfig& cfg,
                          const SampleRequest& req);

Tensor<float> gaussian_like(const Shape& shape, std::mt19937_64& rng);

// Noised training batch: z0 is (B, ...), one timestep per item.
struct NoisedBatch {
  Tensor<float> z_t;
  Tensor<float> eps;
  std::vector<int> t;
};
NoisedBatch draw_noised_batch(const Tensor<float>& z0, const NoiseSchedule& s, std::mt19937_64& rng);

using EpsModel = std::function<Var<float>(const Var<float>& z_t, const std::vector<int>& t)>;

// mean |eps - model(z_t, t)|^2 with t ~ U{1..T}, eps ~ N(0, I). Throws on a
// non-finite model output.
Var<float> training_loss(const EpsModel& model, const Tensor<float>& z0, const NoiseSchedule& s,
                         std::mt19937_64& rng);

}  // namespace vsdf::diffusion
