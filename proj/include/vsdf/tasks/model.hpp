#pragma once
// Text-conditioned latent diffusion model: the denoiser, the built-in text
// encoder (or a file-backed one), the noise schedule and the latent geometry
// it was trained on, plus training and checkpointing.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vsdf/autoencoder/autoencoder.hpp"
#include "vsdf/conditioning/text.hpp"
#include "vsdf/denoiser/uinu_net.hpp"
#include "vsdf/diffusion/diffusion.hpp"

namespace vsdf::tasks {

using nn::Tensor;

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct DiffusionModelConfig {
  denoiser::UinUNetConfig denoiser;
  cond::TextEncoderConfig text;
  ScheduleConfig schedule;
  // Empty: built-in encoder trained with the denoiser. Otherwise a VEMB file
  // whose L and width must match text.length and denoiser.cond_embed_dim.
  std::string embedding_file;
  void validate() const;
};

// What the diffusion model needs from the autoencoder; generation refuses a
// mismatching autoencoder.
struct LatentSpec {
  int D = 32;
  int P = 4;
  int c = 4;
  float scale_factor = 1.0f;
};
LatentSpec latent_spec_of(const ae::Autoencoder& a);
// Throws naming the first field that differs.
void check_compatible(const LatentSpec& model, const ae::Autoencoder& a);

class DiffusionModel {
 public:
  DiffusionModel(DiffusionModelConfig cfg, cond::Vocabulary vocab, LatentSpec latent, std::uint64_t seed);
  DiffusionModel(DiffusionModelConfig cfg, cond::Vocabulary vocab, LatentSpec latent, nn::ParamStore<float> params);
  DiffusionModel(const DiffusionModel&) = delete;
  DiffusionModel& operator=(const DiffusionModel&) = delete;

  const DiffusionModelConfig& config() const { return cfg_; }
  const cond::Vocabulary& vocabulary() const { return vocab_; }
  const LatentSpec& latent() const { return latent_; }
  const diffusion::NoiseSchedule& schedule() const { return schedule_; }
  nn::ParamStore<float>& params() { return params_; }
  const nn::ParamStore<float>& params() const { return params_; }
  const cond::TextEncoder& text_encoder() const { return *encoder_; }
  bool builtin_text() const { return cfg_.embedding_file.empty(); }

  // (batch, c, n, n, n)
  nn::Shape latent_shape(int batch) const;
  // Plain noise prediction for a latent batch under (B, L, width) tokens.
  Tensor<float> predict_eps(const Tensor<float>& z, int t, const Tensor<float>& tokens) const;
  cond::CondDenoiser eps_fn() const;

 private:
  DiffusionModelConfig cfg_;
  cond::Vocabulary vocab_;
  LatentSpec latent_;
  diffusion::NoiseSchedule schedule_;
  nn::ParamStore<float> params_;
  std::unique_ptr<cond::TextEncoder> encoder_;
};

// One training shape: its encoder distribution (unscaled) and its captions.
struct LatentExample {
  ae::GaussianLatentField field;
  std::vector<std::string> captions;
};

std::vector<LatentExample> encode_examples(const ae::Autoencoder& a, const std::vector<geometry::TsdfGrid>& grids,
                                           const std::vector<std::vector<std::string>>& captions);

struct DiffusionTrainConfig {
  int epochs = 40;
  int batch_size = 8;
  double lr = 1e-3;
  double p_uncond = 0.1;
  std::uint64_t seed = 0;
};

using DiffusionEpochCallback = std::function<void(int epoch, double loss)>;

// Each step draws fresh latent samples z0 = (mean + sigma * n) * scale and a
// uniform caption per shape, drops captions to null with p_uncond, and takes
// one Adam step on the eps-prediction loss. Returns per-epoch mean losses.
std::vector<double> train_diffusion(DiffusionModel& m, const std::vector<LatentExample>& data,
                                    const DiffusionTrainConfig& tc, const DiffusionEpochCallback& cb = {});

struct DiffusionCheckpointInfo {
  std::uint64_t seed = 0;
  int epoch = 0;
  std::vector<double> loss_curve;
};

void save_diffusion(const DiffusionModel& m, const DiffusionCheckpointInfo& info, const std::filesystem::path& dir);
std::unique_ptr<DiffusionModel> load_diffusion(const std::filesystem::path& dir, DiffusionCheckpointInfo* info = nullptr);

}  // namespace vsdf::tasks
