#pragma once
// Text-to-shape generation, mask-diffusion completion and cycle-sampling
// manipulation on top of a trained autoencoder + diffusion model pair.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vsdf/tasks/model.hpp"

namespace vsdf::tasks {

struct TaskSettings {
  diffusion::SamplerConfig sampler{.guidance_scale = 3.0};
};

struct GenerationRequest {
  std::string caption;
  int k = 1;
  TaskSettings settings;
  std::uint64_t seed = 0;
};

struct GeneratedSample {
  geometry::TsdfGrid grid;
  Tensor<float> latent;  // (c, n, n, n), scaled
};

// Sample i uses seed derive_seed(req.seed, i), so it does not depend on k.
std::vector<GeneratedSample> generate(const GenerationRequest& req, const DiffusionModel& m, const ae::Autoencoder& a);

// Noise prediction with classifier-free guidance for a (B, c, n, n, n) batch.
diffusion::EpsFn guided_eps(const DiffusionModel& m, const std::string& caption, double guidance_scale);

// Known patches of the latent grid; index (z*n + y)*n + x.
struct PatchMask {
  int side = 0;
  std::vector<std::uint8_t> bits;  // 1 = known
  std::size_t known() const;
};

// Presets name the region that is kept: top-half (y >= n/2), bottom-half, left-half (x < n/2).
PatchMask mask_preset(const std::string& name, int side);
// "D P" then (D/P)^3 '0'/'1' characters; whitespace between characters is ignored.
PatchMask load_mask(const std::filesystem::path& path, int expected_D, int expected_P);
void save_mask(const PatchMask& m, int D, int P, const std::filesystem::path& path);
// Throws "degenerate mask" for all-known or all-unknown masks.
void check_mask(const PatchMask& m, int side);

// Known cells take z_hat, the rest keep z_tilde; broadcast over channels.
Tensor<float> merge_masked(const Tensor<float>& z_tilde, const Tensor<float>& z_hat, const PatchMask& m);

// Per reverse step: (t, t_prev, sampler output, forward-noised known latent, merged latent).
using CompletionTrace = std::function<void(int t, int t_prev, const Tensor<float>& z_tilde, const Tensor<float>& z_hat,
                                           const Tensor<float>& merged)>;

struct CompletionResult {
  geometry::TsdfGrid grid;
  Tensor<float> latent;       // final (c, n, n, n)
  Tensor<float> known_latent;  // scaled encoder mean of the partial shape
};

CompletionResult complete_shape(const geometry::TsdfGrid& partial, const PatchMask& mask, const std::string& caption,
                                const TaskSettings& settings, const DiffusionModel& m, const ae::Autoencoder& a,
                                const CompletionTrace& trace = {});

struct ManipulationResult {
  geometry::TsdfGrid grid;
  Tensor<float> latent;
  Tensor<float> init_latent;
  int t_start = 0;  // t_mid snapped to the sampler grid
};

// t_mid is in units of the full schedule and snaps to the nearest sampler step.
ManipulationResult manipulate_shape(const geometry::TsdfGrid& init, const std::string& caption, int t_mid,
                                    const TaskSettings& settings, const DiffusionModel& m, const ae::Autoencoder& a);

// Scaled encoder mean, shaped (1, c, n, n, n).
Tensor<float> encode_mean_scaled(const ae::Autoencoder& a, const geometry::TsdfGrid& g);

}  // namespace vsdf::tasks
