#pragma once
// Patch-wise Gaussian autoencoder over TSDF grids.
//
// Encoder: each P^3 patch is folded into channels (space_to_depth) and mapped
// by 1x1x1 convolutions, so latent cell (i, j, k) only ever sees patch (i, j, k).
// Decoder: 3x3x3 residual blocks with group norms on the latent grid, a 1x1x1
// expansion that is unfolded back to full resolution, a final 3x3x3 conv and tau * tanh.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vsdf/geometry/tsdf.hpp"
#include "vsdf/nn/params.hpp"

namespace vsdf::ae {

using nn::Tensor;
using nn::Var;

struct AutoencoderConfig {
  int D = 32;
  int P = 4;
  int c = 4;
  float tau = 0.0f;  // 0 selects 3 voxels
  double kl_weight = 1e-4;
  int enc_width = 64;
  int dec_width = 32;
  int dec_blocks = 2;
  int dec_channels = 8;  // full-resolution channels before the output conv

  int latent_side() const { return D / P; }
  float truncation() const { return tau > 0.0f ? tau : geometry::default_tau(D); }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// Distribution parameters, each (c, n, n, n).
struct GaussianLatentField {
  Tensor<float> mean;
  Tensor<float> logvar;
};

// Scaled latent (c, n, n, n).
struct LatentGrid {
  Tensor<float> values;
  float scale_factor = 1.0f;
};

inline constexpr float kLogvarMin = -30.0f;
inline constexpr float kLogvarMax = 20.0f;

template <typename T>
nn::ParamStore<T> init_autoencoder_params(const AutoencoderConfig& cfg, std::uint64_t seed);

// x is (B, 1, D, D, D) in world units; returns mean and clamped logvar, each (B, c, n, n, n).
template <typename T>
std::pair<Var<T>, Var<T>> encoder_forward(const AutoencoderConfig& cfg, const nn::ParamStore<T>& ps, const Var<T>& x);

// z is (B, c, n, n, n) unscaled; returns (B, 1, D, D, D) bounded by tau.
template <typename T>
Var<T> decoder_forward(const AutoencoderConfig& cfg, const nn::ParamStore<T>& ps, const Var<T>& z);

struct AeLossTerms {
  double total = 0, recon = 0, kl = 0;
};

// Differentiable loss on a batch: recon = mean |x - decode(mean + sigma * noise)|.
template <typename T>
struct AeLossGraph {
  Var<T> total, recon, kl;
};
template <typename T>
AeLossGraph<T> ae_loss_graph(const AutoencoderConfig& cfg, const nn::ParamStore<T>& ps, const Tensor<T>& x,
                             const Tensor<T>& noise);

class Autoencoder {
 public:
  Autoencoder(AutoencoderConfig cfg, std::uint64_t seed);
  Autoencoder(AutoencoderConfig cfg, nn::ParamStore<float> params);

  const AutoencoderConfig& config() const { return cfg_; }
  nn::ParamStore<float>& params() { return params_; }
  const nn::ParamStore<float>& params() const { return params_; }

  float scale_factor = 1.0f;

  GaussianLatentField encode(const geometry::TsdfGrid& g) const;
  std::vector<GaussianLatentField> encode_batch(const std::vector<const geometry::TsdfGrid*>& grids) const;
  geometry::TsdfGrid decode(const LatentGrid& z) const;
  // Shortcut: decode(reparameterize(encode(g), 0)).
  geometry::TsdfGrid reconstruct(const geometry::TsdfGrid& g) const;

 private:
  AutoencoderConfig cfg_;
  nn::ParamStore<float> params_;
};

// z = (mean + exp(0.5 * logvar) * noise) * scale_factor.
LatentGrid reparameterize(const GaussianLatentField& f, const Tensor<float>& noise, float scale_factor);
// Unit-normal noise shaped like f, from seed.
Tensor<float> latent_noise(const GaussianLatentField& f, std::uint64_t seed);

// Plain evaluation of the loss terms on already computed quantities.
AeLossTerms ae_loss(const geometry::TsdfGrid& g, const geometry::TsdfGrid& reconstruction, const GaussianLatentField& f,
                    double kl_weight);

struct AeTrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct AeTrainLog {
  std::vector<double> total;  // per-epoch means
  std::vector<double> recon;
  std::vector<double> kl;
};

using EpochCallback = std::function<void(int epoch, double total, double recon)>;

// Deterministic given the seed. Throws on an empty dataset or a non-finite loss.
Autoencoder train_autoencoder(const std::vector<geometry::TsdfGrid>& data, const AutoencoderConfig& cfg,
                              const AeTrainConfig& tc, AeTrainLog* log = nullptr, const EpochCallback& cb = {});

// 1 / pooled std of reparameterized (unscaled) latents over `data`.
float compute_scale_factor(const std::vector<geometry::TsdfGrid>& data, const Autoencoder& ae, std::uint64_t seed);
float scale_factor_from_latents(const std::vector<float>& values);

struct AeCheckpointInfo {
  std::uint64_t seed = 0;
  int epoch = 0;
  AeTrainLog log;
};

// Directory with manifest.json and weights.bin.
void save_autoencoder(const Autoencoder& ae, const AeCheckpointInfo& info, const std::filesystem::path& dir);
Autoencoder load_autoencoder(const std::filesystem::path& dir, AeCheckpointInfo* info = nullptr);

}  // namespace vsdf::ae
